//! Energy of a hard joint labeling.

use std::collections::BTreeMap;

use super::potentials::{potts, score_kernel, unary_from_stats, Appearance, InstanceStats, PROB_FLOOR};
use super::{entropy, CrfConfig, JointLabeling};
use crate::error::{Error, Result};
use crate::network::PredictionField;
use crate::scene::PointCloud;

/// The five groups of terms making up the energy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyTerms {
    pub semantic_unary: f64,
    /// Already scaled by the configured pair weight.
    pub semantic_pairwise: f64,
    pub instance_unary: f64,
    pub instance_pairwise: f64,
    pub consistency: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.semantic_unary + self.semantic_pairwise + self.instance_unary + self.instance_pairwise + self.consistency
    }
}

pub(crate) fn check_inputs(cloud: &PointCloud, pred: &PredictionField) -> Result<()> {
    if cloud.len() != pred.len() {
        return Err(Error::Shape(format!(
            "cloud has {} points, predictions {}",
            cloud.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Instance statistics keyed by instance id, computed from the labeling.
pub(crate) fn stats_by_id(
    pred: &PredictionField,
    labeling: &JointLabeling,
    cfg: &CrfConfig,
) -> Result<BTreeMap<usize, InstanceStats>> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, &i) in labeling.instance.iter().enumerate() {
        members.entry(i).or_default().push(j);
    }
    members
        .into_iter()
        .map(|(id, m)| {
            InstanceStats::from_members(pred.embeddings.view(), &m, &labeling.semantic, pred.num_classes(), cfg)
                .map(|s| (id, s))
        })
        .collect()
}

pub fn energy_terms(
    cloud: &PointCloud,
    pred: &PredictionField,
    labeling: &JointLabeling,
    cfg: &CrfConfig,
) -> Result<EnergyTerms> {
    check_inputs(cloud, pred)?;
    let n = cloud.len();
    if labeling.semantic.len() != n || labeling.instance.len() != n {
        return Err(Error::Shape("labeling length differs from cloud size".into()));
    }
    if labeling.semantic.iter().any(|&s| s >= pred.num_classes()) {
        return Err(Error::Invalid("semantic label out of range".into()));
    }
    let stats = stats_by_id(pred, labeling, cfg)?;
    let app = Appearance::of(cloud);
    let sem = &labeling.semantic;
    let inst = &labeling.instance;
    let mut t = EnergyTerms::default();
    for j in 0..n {
        t.semantic_unary -= pred.probs[[j, sem[j]]].max(PROB_FLOOR).ln();
        t.instance_unary += unary_from_stats(&stats[&inst[j]], pred.embeddings.row(j));
    }
    let mut sp = 0.0;
    for j in 0..n {
        let pj = pred.probs[[j, sem[j]]];
        for k in (j + 1)..n {
            sp += potts(sem[j] == sem[k]) * score_kernel(pj, pred.probs[[k, sem[k]]], cfg.theta);
            t.instance_pairwise += potts(inst[j] == inst[k]) * app.kernel(j, k, cfg);
        }
    }
    t.semantic_pairwise = sp * cfg.semantic_pair_weight(n);
    t.consistency = stats.values().map(|s| entropy(&s.histogram())).sum();
    Ok(t)
}

/// Energy of a hard labeling, with instance statistics taken from the
/// labeling itself.
pub fn energy(cloud: &PointCloud, pred: &PredictionField, labeling: &JointLabeling, cfg: &CrfConfig) -> Result<f64> {
    energy_terms(cloud, pred, labeling, cfg).map(|t| t.total())
}
