//! Point-cloud data model and scene I/O.
//!
//! A [`PointCloud`] is an immutable list of [`Vertex`] records plus the
//! ordered list of semantic class names that defines the label space. The
//! submodules cover PLY files, plain-text label files, synthetic scene
//! generation and the overlapping-window scan used to feed the network.

pub mod labels;
pub mod ply;
pub mod synth;
pub mod window;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Tolerance on the Euclidean norm of stored normals.
pub const NORMAL_TOLERANCE: f64 = 1e-6;

/// Color assigned to vertices read from files without color properties.
pub const DEFAULT_COLOR: Vec3 = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    /// Location in meters.
    pub location: Vec3,
    pub normal: Option<Vec3>,
    /// RGB in `[0, 1]`.
    pub color: Vec3,
    pub gt_semantic: Option<usize>,
    pub gt_instance: Option<u32>,
}

impl Vertex {
    pub fn new(location: Vec3) -> Self {
        Self {
            location,
            normal: None,
            color: DEFAULT_COLOR,
            gt_semantic: None,
            gt_instance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vertex>,
    pub class_names: Vec<String>,
}

impl PointCloud {
    /// Builds a cloud and checks every invariant of the data model.
    pub fn new(points: Vec<Vertex>, class_names: Vec<String>) -> Result<Self> {
        let cloud = Self {
            points,
            class_names,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut instance_class = std::collections::HashMap::new();
        for (j, v) in self.points.iter().enumerate() {
            if v.location.iter().any(|c| !c.is_finite()) {
                return Err(Error::Invalid(format!("vertex {j}: non-finite location")));
            }
            if let Some(n) = v.normal {
                let norm = norm3(n);
                if !norm.is_finite() || (norm - 1.0).abs() > NORMAL_TOLERANCE {
                    return Err(Error::Invalid(format!(
                        "vertex {j}: normal has norm {norm}, expected unit length"
                    )));
                }
            }
            if v.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!("vertex {j}: color outside [0, 1]")));
            }
            if let Some(s) = v.gt_semantic {
                if !self.class_names.is_empty() && s >= self.class_names.len() {
                    return Err(Error::Invalid(format!(
                        "vertex {j}: semantic label {s} out of range for {} classes",
                        self.class_names.len()
                    )));
                }
            }
            if let Some(i) = v.gt_instance {
                let Some(s) = v.gt_semantic else {
                    return Err(Error::Invalid(format!(
                        "vertex {j}: instance label without semantic label"
                    )));
                };
                match instance_class.insert(i, s) {
                    Some(prev) if prev != s => {
                        return Err(Error::Invalid(format!(
                            "instance {i} carries two semantic labels ({prev} and {s})"
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.points.first()?.location;
        let mut lo = first;
        let mut hi = first;
        for v in &self.points[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(v.location[a]);
                hi[a] = hi[a].max(v.location[a]);
            }
        }
        Some((lo, hi))
    }

    /// True when every vertex carries both ground-truth labels.
    pub fn is_labeled(&self) -> bool {
        !self.points.is_empty()
            && self
                .points
                .iter()
                .all(|v| v.gt_semantic.is_some() && v.gt_instance.is_some())
    }

    /// Ground-truth `(semantic, instance)` vectors, if every point is labeled.
    pub fn gt_labels(&self) -> Option<(Vec<usize>, Vec<u32>)> {
        if !self.is_labeled() {
            return None;
        }
        Some(
            self.points
                .iter()
                .map(|v| (v.gt_semantic.unwrap(), v.gt_instance.unwrap()))
                .unzip(),
        )
    }

    /// Copies ground-truth labels from a label file into the cloud.
    pub fn attach_labels(&mut self, records: &[labels::LabelRecord]) -> Result<()> {
        if records.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "label file has {} rows but the cloud has {} vertices",
                records.len(),
                self.points.len()
            )));
        }
        for (v, r) in self.points.iter_mut().zip(records) {
            v.gt_semantic = Some(r.semantic);
            v.gt_instance = r.instance;
        }
        self.validate()
    }
}

pub(crate) fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub3(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

pub(crate) fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(loc: Vec3, s: usize, i: u32) -> Vertex {
        Vertex {
            gt_semantic: Some(s),
            gt_instance: Some(i),
            ..Vertex::new(loc)
        }
    }

    #[test]
    fn rejects_non_finite_location() {
        let err = PointCloud::new(vec![Vertex::new([0.0, f64::NAN, 0.0])], vec![]).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn rejects_non_unit_normal() {
        let mut v = Vertex::new([0.0; 3]);
        v.normal = Some([0.0, 0.0, 1.1]);
        assert!(PointCloud::new(vec![v], vec![]).is_err());
    }

    #[test]
    fn rejects_instance_with_two_classes() {
        let names = vec!["a".to_string(), "b".to_string()];
        let pts = vec![labeled([0.0; 3], 0, 3), labeled([1.0; 3], 1, 3)];
        assert!(PointCloud::new(pts, names).is_err());
    }

    #[test]
    fn bounds_and_labels() {
        let names = vec!["a".to_string(), "b".to_string()];
        let pts = vec![labeled([0.0, 2.0, -1.0], 0, 0), labeled([1.0, -2.0, 3.0], 1, 1)];
        let cloud = PointCloud::new(pts, names).unwrap();
        assert_eq!(cloud.bounds(), Some(([0.0, -2.0, -1.0], [1.0, 2.0, 3.0])));
        assert_eq!(cloud.gt_labels(), Some((vec![0, 1], vec![0, 1])));
    }
}
