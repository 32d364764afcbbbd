//! Overlapping-window scan over the x-y footprint of a cloud.
//!
//! Windows are laid out on a regular grid anchored at the cloud's minimum
//! corner and always span the full z extent. Each window is resampled to a
//! fixed point count. When a window holds more points than that, sampling
//! prefers points no earlier window has taken, and any points still left
//! uncovered at the end get extra windows of their own, so every vertex is
//! seen by at least one window.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

/// Number of per-point input features: relative location, color, normal.
pub const FEATURE_WIDTH: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Footprint `[x, y]` in meters.
    pub size: [f64; 2],
    pub stride: [f64; 2],
    pub point_count: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            size: [1.0, 1.0],
            stride: [0.5, 0.5],
            point_count: 4096,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..2 {
            if !(self.size[a] > 0.0 && self.stride[a] > 0.0) {
                return Err(Error::Config("window size and stride must be positive".into()));
            }
            if self.stride[a] > self.size[a] {
                return Err(Error::Config("window stride must not exceed window size".into()));
            }
        }
        if self.point_count == 0 {
            return Err(Error::Config("window point count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Exactly `point_count` indices into the parent cloud; repeats occur
    /// when the window holds fewer points than that.
    pub vertex_indices: Vec<usize>,
    /// Minimum corner; z is the cloud's minimum z.
    pub origin: Vec3,
    pub size: [f64; 2],
}

impl Window {
    /// Sorted, de-duplicated vertex indices.
    pub fn unique_indices(&self) -> Vec<usize> {
        let mut v = self.vertex_indices.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn contains(&self, p: Vec3) -> bool {
        const EPS: f64 = 1e-6;
        (0..2).all(|a| p[a] >= self.origin[a] - EPS && p[a] <= self.origin[a] + self.size[a] + EPS)
    }
}

/// Number of grid positions needed along one axis.
pub fn grid_count(extent: f64, size: f64, stride: f64) -> usize {
    if extent <= size {
        1
    } else {
        ((extent - size) / stride - 1e-9).ceil() as usize + 1
    }
}

pub fn scan_windows(cloud: &PointCloud, cfg: &WindowConfig, seed: u64) -> Result<Vec<Window>> {
    cfg.validate()?;
    let (lo, hi) = cloud
        .bounds()
        .ok_or_else(|| Error::Invalid("cannot scan an empty cloud".into()))?;
    let nx = grid_count(hi[0] - lo[0], cfg.size[0], cfg.stride[0]);
    let ny = grid_count(hi[1] - lo[1], cfg.size[1], cfg.stride[1]);
    let origin = |ix: usize, iy: usize| {
        [
            lo[0] + ix as f64 * cfg.stride[0],
            lo[1] + iy as f64 * cfg.stride[1],
            lo[2],
        ]
    };

    // Bin every point into each grid cell whose footprint contains it.
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
    let axis_range = |x: f64, lo: f64, size: f64, stride: f64, n: usize| {
        let rel = x - lo;
        let first = ((rel - size) / stride - 1e-9).ceil().max(0.0) as usize;
        let last = ((rel / stride + 1e-9).floor() as usize).min(n - 1);
        first..=last
    };
    for (j, v) in cloud.points.iter().enumerate() {
        let p = v.location;
        for ix in axis_range(p[0], lo[0], cfg.size[0], cfg.stride[0], nx) {
            for iy in axis_range(p[1], lo[1], cfg.size[1], cfg.stride[1], ny) {
                cells[ix * ny + iy].push(j);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut covered = vec![false; cloud.len()];
    let mut out: Vec<(usize, Window)> = Vec::new();
    let count = cfg.point_count;
    for (c, pts) in cells.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let indices = if pts.len() <= count {
            let mut idx = pts.clone();
            while idx.len() < count {
                idx.push(pts[rng.random_range(0..pts.len())]);
            }
            idx
        } else {
            let mut shuffled = pts.clone();
            shuffled.shuffle(&mut rng);
            // Stable: uncovered points first, shuffled order otherwise kept.
            shuffled.sort_by_key(|&j| covered[j]);
            shuffled.truncate(count);
            shuffled
        };
        for &j in &indices {
            covered[j] = true;
        }
        let (ix, iy) = (c / ny, c % ny);
        out.push((
            c,
            Window {
                vertex_indices: indices,
                origin: origin(ix, iy),
                size: cfg.size,
            },
        ));
    }

    // Extra windows for points that every sampled window skipped.
    let mut leftovers: Vec<Vec<usize>> = vec![Vec::new(); cells.len()];
    for (c, pts) in cells.iter().enumerate() {
        for &j in pts {
            if !covered[j] {
                leftovers[c].push(j);
                covered[j] = true;
            }
        }
    }
    for (c, rest) in leftovers.into_iter().enumerate() {
        for chunk in rest.chunks(count) {
            let mut idx = chunk.to_vec();
            let mut others: Vec<usize> = cells[c]
                .iter()
                .copied()
                .filter(|j| !chunk.contains(j))
                .collect();
            others.shuffle(&mut rng);
            idx.extend(others.into_iter().take(count - chunk.len()));
            while idx.len() < count {
                idx.push(idx[rng.random_range(0..chunk.len())]);
            }
            let (ix, iy) = (c / ny, c % ny);
            out.push((
                c,
                Window {
                    vertex_indices: idx,
                    origin: origin(ix, iy),
                    size: cfg.size,
                },
            ));
        }
    }
    // Stable sort keeps each cell's extra windows right after the cell.
    out.sort_by_key(|(c, _)| *c);
    Ok(out.into_iter().map(|(_, w)| w).collect())
}

/// Network input for one window: location relative to the window origin,
/// color, and normal (zeros when absent), one row per vertex index.
pub fn window_features(cloud: &PointCloud, window: &Window) -> Array2<f64> {
    features_for(cloud, &window.vertex_indices, window.origin)
}

pub fn features_for(cloud: &PointCloud, indices: &[usize], origin: Vec3) -> Array2<f64> {
    let mut x = Array2::zeros((indices.len(), FEATURE_WIDTH));
    for (r, &j) in indices.iter().enumerate() {
        let v = &cloud.points[j];
        let n = v.normal.unwrap_or([0.0; 3]);
        for a in 0..3 {
            x[[r, a]] = v.location[a] - origin[a];
            x[[r, 3 + a]] = v.color[a];
            x[[r, 6 + a]] = n[a];
        }
    }
    x
}
