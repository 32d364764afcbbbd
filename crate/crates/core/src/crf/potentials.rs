//! Individual potentials and per-instance statistics.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView1;

use super::{CrfConfig, LabelState};
use crate::error::{Error, Result};
use crate::network::PredictionField;
use crate::scene::{PointCloud, Vec3};

/// Floor applied to class probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

/// Mean, covariance factor, size and class histogram of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub mean: DVector<f64>,
    /// Lower Cholesky factor of the (ridged) covariance.
    pub chol: DMatrix<f64>,
    /// `-0.5 * (d ln 2pi + ln det)`.
    pub log_norm: f64,
    pub size: usize,
    /// Member count per class.
    pub counts: Vec<usize>,
}

impl InstanceStats {
    /// Statistics of the listed member rows. Single-point instances get an
    /// isotropic covariance of `cov_scale`; larger ones the maximum-likelihood
    /// covariance plus `cov_epsilon` on the diagonal.
    pub fn from_members(
        embeddings: ndarray::ArrayView2<f64>,
        members: &[usize],
        semantic: &[usize],
        num_classes: usize,
        cfg: &CrfConfig,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Invalid("instance statistics of an empty instance".into()));
        }
        let d = embeddings.ncols();
        let n = members.len() as f64;
        let mut mean = DVector::zeros(d);
        for &j in members {
            for a in 0..d {
                mean[a] += embeddings[[j, a]];
            }
        }
        mean /= n;
        let cov = if members.len() == 1 {
            DMatrix::identity(d, d) * cfg.cov_scale
        } else {
            let mut cov = DMatrix::zeros(d, d);
            for &j in members {
                let r = DVector::from_iterator(d, (0..d).map(|a| embeddings[[j, a]] - mean[a]));
                cov.ger(1.0, &r, &r, 1.0);
            }
            cov /= n;
            for a in 0..d {
                cov[(a, a)] += cfg.cov_epsilon;
            }
            cov
        };
        let chol = nalgebra::Cholesky::new(cov)
            .ok_or_else(|| Error::Numeric("instance covariance is not positive definite".into()))?
            .unpack();
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        let mut counts = vec![0; num_classes];
        for &j in members {
            *counts.get_mut(semantic[j]).ok_or_else(|| {
                Error::Invalid(format!("class index {} out of range", semantic[j]))
            })? += 1;
        }
        Ok(Self {
            mean,
            chol,
            log_norm,
            size: members.len(),
            counts,
        })
    }

    pub fn log_density(&self, e: ArrayView1<f64>) -> f64 {
        let r = DVector::from_iterator(e.len(), e.iter().zip(self.mean.iter()).map(|(x, m)| x - m));
        let y = self
            .chol
            .solve_lower_triangular(&r)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * y.norm_squared()
    }

    pub fn density(&self, e: ArrayView1<f64>) -> f64 {
        self.log_density(e).exp()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    /// Relative class frequencies.
    pub fn histogram(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.size as f64).collect()
    }
}

pub fn semantic_unary(pred: &PredictionField, j: usize, s: usize) -> f64 {
    -pred.probs[[j, s]].max(PROB_FLOOR).ln()
}

pub(crate) fn potts(same: bool) -> f64 {
    if same {
        -1.0
    } else {
        1.0
    }
}

pub(crate) fn score_kernel(a: f64, b: f64, theta: f64) -> f64 {
    (-(a - b) * (a - b) / (2.0 * theta * theta)).exp()
}

/// Compatibility of class `s` at `j` with class `s_prime` at `k`, using each
/// point's probability of its candidate class.
pub fn semantic_pairwise(pred: &PredictionField, j: usize, k: usize, s: usize, s_prime: usize, theta: f64) -> f64 {
    potts(s == s_prime) * score_kernel(pred.probs[[j, s]], pred.probs[[k, s_prime]], theta)
}

/// `-N(e_j; mu_i, Sigma_i) - ln size_i` for instance column `i`.
pub fn instance_unary(state: &LabelState, embeddings: ndarray::ArrayView2<f64>, j: usize, i: usize) -> Result<f64> {
    let stats = state
        .stats
        .get(i)
        .ok_or_else(|| Error::Invalid(format!("instance column {i} is not live")))?;
    if stats.size == 0 {
        return Err(Error::Invalid(format!("instance column {i} has no members")));
    }
    Ok(unary_from_stats(stats, embeddings.row(j)))
}

pub(crate) fn unary_from_stats(stats: &InstanceStats, e: ArrayView1<f64>) -> f64 {
    -stats.density(e) - (stats.size as f64).ln()
}

/// Per-point location, normal (zero when absent) and color.
#[derive(Debug, Clone)]
pub(crate) struct Appearance {
    pub loc: Vec<Vec3>,
    pub normal: Vec<Vec3>,
    pub color: Vec<Vec3>,
}

impl Appearance {
    pub fn of(cloud: &PointCloud) -> Self {
        Self {
            loc: cloud.points.iter().map(|v| v.location).collect(),
            normal: cloud.points.iter().map(|v| v.normal.unwrap_or([0.0; 3])).collect(),
            color: cloud.points.iter().map(|v| v.color).collect(),
        }
    }
}

#[inline]
fn d2(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Gaussian mixture kernel over location, normal and color, without the
/// compatibility sign.
pub(crate) fn appearance_kernel(
    a: (&Vec3, &Vec3, &Vec3),
    b: (&Vec3, &Vec3, &Vec3),
    cfg: &CrfConfig,
) -> f64 {
    let mut x = -d2(a.0, b.0) / (2.0 * cfg.lambda1 * cfg.lambda1) - d2(a.2, b.2) / (2.0 * cfg.lambda3 * cfg.lambda3);
    if cfg.use_normals {
        x -= d2(a.1, b.1) / (2.0 * cfg.lambda2 * cfg.lambda2);
    }
    x.exp()
}

impl Appearance {
    pub fn kernel(&self, j: usize, k: usize, cfg: &CrfConfig) -> f64 {
        appearance_kernel(
            (&self.loc[j], &self.normal[j], &self.color[j]),
            (&self.loc[k], &self.normal[k], &self.color[k]),
            cfg,
        )
    }
}

pub fn instance_pairwise(cloud: &PointCloud, j: usize, k: usize, i: usize, i_prime: usize, cfg: &CrfConfig) -> f64 {
    let a = &cloud.points[j];
    let b = &cloud.points[k];
    let na = a.normal.unwrap_or([0.0; 3]);
    let nb = b.normal.unwrap_or([0.0; 3]);
    potts(i == i_prime) * appearance_kernel((&a.location, &na, &a.color), (&b.location, &nb, &b.color), cfg)
}

/// `-h ln h` with `0 ln 0 = 0`.
pub fn consistency_term(h: f64) -> f64 {
    if h > 0.0 {
        -h * h.ln()
    } else {
        0.0
    }
}

/// Entropy of a class histogram.
pub fn entropy(hist: &[f64]) -> f64 {
    hist.iter().map(|&h| consistency_term(h)).sum()
}

/// `sum_s h ln h / size` for `counts` after moving one member out of class
/// `from` (if any) and into class `to`.
pub(crate) fn counterfactual_m(counts: &[usize], size: usize, from: Option<usize>, to: usize) -> f64 {
    let size_f = size as f64;
    let mut total = 0.0;
    for (s, &c) in counts.iter().enumerate() {
        let mut c = c as f64;
        if Some(s) == from {
            c -= 1.0;
        }
        if s == to {
            c += 1.0;
        }
        if c > 0.0 {
            let h = c / size_f;
            total += h * h.ln();
        }
    }
    total / size_f
}

/// Per-point share of the consistency term with point `j` relabelled to
/// class `candidate` and everyone else at their argmax labels.
pub fn m_term(state: &LabelState, j: usize, candidate: usize) -> f64 {
    let col = super::argmax_row(state.qi.row(j));
    let current = super::argmax_row(state.qs.row(j));
    let stats = &state.stats[col];
    counterfactual_m(&stats.counts, stats.size, Some(current), candidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::CrfConfig;
    use crate::scene::Vertex;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};

    fn pred(probs: Array2<f64>) -> PredictionField {
        let n = probs.nrows();
        PredictionField {
            probs,
            embeddings: Array2::zeros((n, 2)),
        }
    }

    #[test]
    fn semantic_unary_values() {
        let p = pred(array![[1.0, 0.0], [(-1.0f64).exp(), 1.0 - (-1.0f64).exp()]]);
        assert_eq!(semantic_unary(&p, 0, 0), 0.0);
        assert_relative_eq!(semantic_unary(&p, 1, 0), 1.0, max_relative = 1e-15);
        assert_relative_eq!(semantic_unary(&p, 0, 1), 18.420680743952367, max_relative = 1e-15);
    }

    #[test]
    fn semantic_pairwise_values() {
        let p = pred(array![[0.9, 0.1], [0.1, 0.9], [0.9, 0.1]]);
        assert_eq!(semantic_pairwise(&p, 0, 2, 0, 0, 0.1), -1.0);
        assert!(semantic_pairwise(&p, 0, 2, 0, 1, 0.1) < 1e-10);
        // p_j(s) = 0.9 and p_k(s') = 0.9 for different classes.
        assert_eq!(semantic_pairwise(&p, 0, 1, 0, 1, 0.1), 1.0);
    }

    fn stats_state(emb: Array2<f64>, members: &[usize], cfg: &CrfConfig) -> LabelState {
        let n = emb.nrows();
        let stats = InstanceStats::from_members(emb.view(), members, &vec![0; n], 1, cfg).unwrap();
        let mut qi = Array2::zeros((n, 1));
        qi.fill(1.0);
        LabelState {
            qs: Array2::ones((n, 1)),
            qi,
            instance_ids: vec![0],
            stats: vec![stats],
        }
    }

    #[test]
    fn instance_unary_at_mean() {
        // Unit covariance at the mean of a single-point instance.
        let cfg = CrfConfig {
            cov_scale: 1.0,
            ..Default::default()
        };
        let emb = array![[0.3, -0.2]];
        let state = stats_state(emb.clone(), &[0], &cfg);
        let v = instance_unary(&state, emb.view(), 0, 0).unwrap();
        assert_relative_eq!(v, -1.0 / (2.0 * std::f64::consts::PI), max_relative = 1e-14);
        assert_relative_eq!(v, -0.1592, epsilon = 5e-5);
        assert!(instance_unary(&state, emb.view(), 0, 1).is_err());
    }

    #[test]
    fn instance_unary_size_and_decay() {
        let cfg = CrfConfig::default();
        let far = array![[100.0, 100.0]];
        let mut stats = InstanceStats::from_members(array![[0.0, 0.0], [1.0, 1.0]].view(), &[0, 1], &[0, 0], 1, &cfg).unwrap();
        let small = unary_from_stats(&stats, far.row(0));
        assert_relative_eq!(small, -(2f64).ln(), max_relative = 1e-12);
        stats.size = 5;
        assert!(unary_from_stats(&stats, far.row(0)) < small);
    }

    #[test]
    fn covariance_is_ml_plus_ridge() {
        let cfg = CrfConfig::default();
        let emb = array![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]];
        let s = InstanceStats::from_members(emb.view(), &[0, 1, 2, 3], &[0; 4], 1, &cfg).unwrap();
        let cov = s.covariance();
        assert_relative_eq!(cov[(0, 0)], 1.0 + 1e-4, max_relative = 1e-12);
        assert_relative_eq!(cov[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.mean[0], 1.0);
    }

    #[test]
    fn instance_pairwise_values() {
        let cfg = CrfConfig::default();
        let mut a = Vertex::new([0.0; 3]);
        a.normal = Some([0.0, 0.0, 1.0]);
        let mut b = a.clone();
        let cloud = PointCloud::new(vec![a.clone(), b.clone()], vec![]).unwrap();
        assert_eq!(instance_pairwise(&cloud, 0, 1, 3, 3, &cfg), -1.0);
        assert_eq!(instance_pairwise(&cloud, 0, 1, 3, 4, &cfg), 1.0);
        b.location = [cfg.lambda1, 0.0, 0.0];
        let cloud = PointCloud::new(vec![a, b], vec![]).unwrap();
        assert_relative_eq!(instance_pairwise(&cloud, 0, 1, 0, 0, &cfg), -(-0.5f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(instance_pairwise(&cloud, 0, 1, 0, 0, &cfg), -0.6065, epsilon = 5e-5);
    }

    #[test]
    fn normals_term_can_be_dropped() {
        let mut a = Vertex::new([0.0; 3]);
        a.normal = Some([0.0, 0.0, 1.0]);
        let mut b = a.clone();
        b.normal = Some([1.0, 0.0, 0.0]);
        let cloud = PointCloud::new(vec![a, b], vec![]).unwrap();
        let with = CrfConfig::default();
        let without = CrfConfig {
            use_normals: false,
            ..Default::default()
        };
        assert!(instance_pairwise(&cloud, 0, 1, 0, 0, &with) > -1.0);
        assert_eq!(instance_pairwise(&cloud, 0, 1, 0, 0, &without), -1.0);
    }

    #[test]
    fn consistency_values() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert_relative_eq!(entropy(&[0.5, 0.5]), 2f64.ln(), max_relative = 1e-15);
        assert_relative_eq!(entropy(&[0.5, 0.5]), 0.6931, epsilon = 5e-5);
        assert_eq!(consistency_term(0.0), 0.0);
    }

    #[test]
    fn counterfactual_histogram() {
        // Instance of 4 with classes [3, 1]; moving the odd one to class 0
        // makes it pure.
        assert_eq!(counterfactual_m(&[3, 1], 4, Some(1), 0), 0.0);
        let m = counterfactual_m(&[3, 1], 4, Some(1), 1);
        assert_relative_eq!(m, (0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 4.0, max_relative = 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entropy_is_bounded(counts in prop::collection::vec(0usize..20, 1..8)) {
                let total: usize = counts.iter().sum();
                prop_assume!(total > 0);
                let hist: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
                let h = entropy(&hist);
                prop_assert!(h >= 0.0);
                prop_assert!(h <= (counts.len() as f64).ln() + 1e-12);
                let direct: f64 = -hist.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
                prop_assert!((h - direct).abs() < 1e-12);
            }
        }
    }
}
