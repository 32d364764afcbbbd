//! Flat-kernel mean-shift clustering of embeddings.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanShiftConfig {
    pub bandwidth: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Seed from occupied grid cells of side `bandwidth` instead of from
    /// every point.
    pub bin_seeding: bool,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.5,
            max_iters: 300,
            tol: 1e-4,
            bin_seeding: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Cluster index per point, dense from 0.
    pub assignment: Vec<usize>,
    /// One row per cluster.
    pub modes: Array2<f64>,
    pub bandwidth: f64,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.modes.nrows()
    }
}

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Moves `x` to the mean of points within `bandwidth` until it stops.
/// Returns the mode and the number of points in its final window.
fn climb(data: ArrayView2<f64>, start: Array1<f64>, bw2: f64, cfg: &MeanShiftConfig) -> (Array1<f64>, usize) {
    let mut x = start;
    let mut sum = Array1::zeros(data.ncols());
    let mut count = 0;
    for _ in 0..cfg.max_iters {
        sum.fill(0.0);
        count = 0;
        for row in data.rows() {
            if dist2(row, x.view()) <= bw2 {
                sum += &row;
                count += 1;
            }
        }
        if count == 0 {
            break;
        }
        let next = &sum / count as f64;
        let shift = dist2(next.view(), x.view()).sqrt();
        x = next;
        if shift < cfg.tol {
            break;
        }
    }
    (x, count)
}

fn bin_seeds(data: ArrayView2<f64>, bandwidth: f64) -> Vec<Array1<f64>> {
    let mut bins: BTreeMap<Vec<i64>, ()> = BTreeMap::new();
    for row in data.rows() {
        bins.insert(row.iter().map(|v| (v / bandwidth).round() as i64).collect(), ());
    }
    bins.into_keys()
        .map(|k| k.into_iter().map(|c| c as f64 * bandwidth).collect())
        .collect()
}

pub fn mean_shift(embeddings: ArrayView2<f64>, cfg: &MeanShiftConfig) -> Result<ClusterResult> {
    let bw = cfg.bandwidth;
    if !(bw > 0.0 && bw.is_finite()) {
        return Err(Error::Config(format!("mean-shift bandwidth must be positive, got {bw}")));
    }
    if !(cfg.tol >= 0.0) {
        return Err(Error::Config("mean-shift tolerance must be >= 0".into()));
    }
    let n = embeddings.nrows();
    if n == 0 {
        return Err(Error::Invalid("mean-shift needs at least one point".into()));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite embedding passed to mean-shift".into()));
    }
    // Work on rows in lexicographic order so every floating-point sum, and
    // hence the result, is independent of the input row order.
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| lex_cmp(embeddings.row(a), embeddings.row(b)));
    let sorted = embeddings.select(Axis(0), &rank);
    let result = mean_shift_sorted(sorted.view(), cfg)?;
    let mut assignment = vec![0; n];
    for (pos, &orig) in rank.iter().enumerate() {
        assignment[orig] = result.assignment[pos];
    }
    Ok(ClusterResult { assignment, ..result })
}

fn lex_cmp(a: ArrayView1<f64>, b: ArrayView1<f64>) -> std::cmp::Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn mean_shift_sorted(embeddings: ArrayView2<f64>, cfg: &MeanShiftConfig) -> Result<ClusterResult> {
    let bw = cfg.bandwidth;
    let bw2 = bw * bw;
    let seeds: Vec<Array1<f64>> = if cfg.bin_seeding {
        bin_seeds(embeddings, bw)
    } else {
        embeddings.rows().into_iter().map(|r| r.to_owned()).collect()
    };
    let climbed: Vec<(Array1<f64>, usize)> = seeds
        .into_iter()
        .map(|s| climb(embeddings, s, bw2, cfg))
        .filter(|(_, c)| *c > 0)
        .collect();

    // Strongest modes first; equal support falls back to coordinates.
    let mut order: Vec<usize> = (0..climbed.len()).collect();
    order.sort_by(|&a, &b| {
        climbed[b]
            .1
            .cmp(&climbed[a].1)
            .then_with(|| lex_cmp(climbed[a].0.view(), climbed[b].0.view()))
    });
    let merge2 = (bw / 2.0) * (bw / 2.0);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| dist2(climbed[i].0.view(), climbed[k].0.view()) >= merge2) {
            kept.push(i);
        }
    }

    let nearest = |x: ArrayView1<f64>| {
        let mut best = (0, f64::INFINITY);
        for (c, &k) in kept.iter().enumerate() {
            let d = dist2(x, climbed[k].0.view());
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    };
    let raw: Vec<usize> = if cfg.bin_seeding {
        embeddings.rows().into_iter().map(nearest).collect()
    } else {
        climbed.iter().map(|(m, _)| nearest(m.view())).collect()
    };

    // Drop modes nobody landed on and renumber densely.
    let mut hit = vec![false; kept.len()];
    for &c in &raw {
        hit[c] = true;
    }
    let used: Vec<usize> = (0..kept.len()).filter(|&c| hit[c]).collect();
    let mut remap = vec![0; kept.len()];
    for (i, &c) in used.iter().enumerate() {
        remap[c] = i;
    }
    let mut modes = Array2::zeros((used.len(), embeddings.ncols()));
    for (i, &c) in used.iter().enumerate() {
        modes.row_mut(i).assign(&climbed[kept[c]].0);
    }
    Ok(ClusterResult {
        assignment: raw.into_iter().map(|c| remap[c]).collect(),
        modes,
        bandwidth: bw,
    })
}
