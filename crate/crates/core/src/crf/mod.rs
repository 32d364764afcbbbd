//! Multi-value CRF over joint semantic and instance labels.
//!
//! Every point carries a class label and an instance label. The energy
//! combines per-point costs from the network output, fully connected
//! pairwise terms (class-score similarity for semantics, a Gaussian
//! mixture over location, normal and color for instances) and an entropy
//! term rewarding instances whose points agree on their class. Inference is
//! parallel mean-field on factorised distributions `Q^S` and `Q^I`.

mod energy;
mod meanfield;
mod potentials;

pub use energy::{energy, energy_terms, EnergyTerms};
pub use meanfield::{infer, mean_field_step, InferenceOutput, InferenceTrace};
pub use potentials::{
    consistency_term, entropy, instance_pairwise, instance_unary, m_term, semantic_pairwise, semantic_unary,
    InstanceStats, PROB_FLOOR,
};

use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which groups of terms drive the mean-field updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// No refinement: network argmax and the initial clusters.
    None,
    Unary,
    /// Unary and pairwise terms, no semantic-instance consistency.
    Pairwise,
    #[default]
    Full,
}

impl Ablation {
    pub fn uses_pairwise(self) -> bool {
        matches!(self, Ablation::Pairwise | Ablation::Full)
    }

    pub fn uses_consistency(self) -> bool {
        self == Ablation::Full
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "unary" => Ok(Ablation::Unary),
            "pairwise" => Ok(Ablation::Pairwise),
            "full" => Ok(Ablation::Full),
            _ => Err(Error::Config(format!(
                "unknown ablation mode `{s}` (expected none, unary, pairwise or full)"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Unary => "unary",
            Ablation::Pairwise => "pairwise",
            Ablation::Full => "full",
        })
    }
}

/// Scaling of the semantic pairwise group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairwiseNorm {
    /// Plain sum over all pairs.
    Sum,
    /// Sum divided by `N - 1`, so each point sees an average over the others.
    #[default]
    Mean,
}

/// How pairwise messages are computed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum MessagePassing {
    /// Exact `O(N^2)` sums.
    #[default]
    Dense,
    /// Gaussian filtering on a downsampled grid: class scores are binned
    /// on `[0, 1]` and locations on a voxel grid of side `lambda1`, the
    /// kernel is applied between grid cells and read back per point,
    /// truncated at `truncate` kernel widths.
    Downsampled { truncate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    pub theta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mf_iters: usize,
    pub mf_tol: f64,
    pub cov_epsilon: f64,
    /// Covariance scale for single-point instances.
    pub cov_scale: f64,
    pub use_normals: bool,
    pub semantic_pairwise_norm: PairwiseNorm,
    pub message_passing: MessagePassing,
    /// Worker threads for per-point updates.
    pub jobs: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            theta: 0.1,
            lambda1: 0.1,
            lambda2: 0.5,
            lambda3: 0.2,
            mf_iters: 10,
            mf_tol: 1e-3,
            cov_epsilon: 1e-4,
            cov_scale: 0.25,
            use_normals: true,
            semantic_pairwise_norm: PairwiseNorm::Mean,
            message_passing: MessagePassing::Dense,
            jobs: 1,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.theta, self.lambda1, self.lambda2, self.lambda3, self.cov_epsilon, self.cov_scale];
        if widths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("CRF kernel widths and covariance terms must be positive".into()));
        }
        if !(self.mf_tol >= 0.0) {
            return Err(Error::Config("mean-field tolerance must be >= 0".into()));
        }
        if let MessagePassing::Downsampled { truncate } = self.message_passing {
            if !(truncate > 0.0) {
                return Err(Error::Config("filter truncation must be positive".into()));
            }
        }
        Ok(())
    }

    /// Weight applied to every semantic pair for a scene of `n` points.
    pub fn semantic_pair_weight(&self, n: usize) -> f64 {
        match self.semantic_pairwise_norm {
            PairwiseNorm::Sum => 1.0,
            PairwiseNorm::Mean => 1.0 / (n.max(2) - 1) as f64,
        }
    }
}

/// Hard labels: a class index and an instance id per point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointLabeling {
    pub semantic: Vec<usize>,
    pub instance: Vec<usize>,
}

/// Factorised mean-field distributions plus the statistics of the current
/// hard instance assignment.
#[derive(Debug, Clone)]
pub struct LabelState {
    /// `N x |S|`.
    pub qs: Array2<f64>,
    /// `N x K`, one column per live instance.
    pub qi: Array2<f64>,
    /// External instance id of every `qi` column.
    pub instance_ids: Vec<usize>,
    /// Statistics per `qi` column.
    pub stats: Vec<InstanceStats>,
}

pub(crate) fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl LabelState {
    pub fn num_instances(&self) -> usize {
        self.instance_ids.len()
    }

    /// Column index of the argmax instance per point.
    pub fn instance_columns(&self) -> Vec<usize> {
        self.qi.rows().into_iter().map(argmax_row).collect()
    }

    pub fn semantic_argmax(&self) -> Vec<usize> {
        self.qs.rows().into_iter().map(argmax_row).collect()
    }

    pub fn labeling(&self) -> JointLabeling {
        JointLabeling {
            semantic: self.semantic_argmax(),
            instance: self.instance_columns().into_iter().map(|c| self.instance_ids[c]).collect(),
        }
    }

    /// Largest deviation of any row sum from 1 in either distribution.
    pub fn max_row_error(&self) -> f64 {
        self.qs
            .rows()
            .into_iter()
            .chain(self.qi.rows())
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
