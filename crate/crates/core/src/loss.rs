//! Discriminative instance-embedding loss and the classification loss.
//!
//! The embedding loss has three parts: a pull term drawing each embedding
//! to within `delta_v` of its instance centroid, a push term keeping
//! centroids at least `2 * delta_d` apart, and a small pull of every
//! centroid toward the origin. Hinges are `[x]+ = max(0, x)`; the
//! subgradient is 0 at hinge kinks and wherever a norm is exactly zero.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta_v: f64,
    pub delta_d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.001,
            delta_v: 0.5,
            delta_d: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta_v, self.delta_d];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights and margins must be finite and >= 0".into()));
        }
        if self.delta_d <= 2.0 * self.delta_v {
            log::warn!(
                "delta_d = {} <= 2 * delta_v = {}: zero loss no longer guarantees that \
                 embeddings are closer to their own centroid than to any other",
                self.delta_d,
                2.0 * self.delta_v
            );
        }
        Ok(())
    }
}

/// Assignment of points to `K` non-empty instances.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePartition {
    assignment: Vec<usize>,
    sizes: Vec<usize>,
}

impl InstancePartition {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            *sizes
                .get_mut(a)
                .ok_or_else(|| Error::Invalid(format!("instance index {a} out of range for K = {k}")))? += 1;
        }
        if let Some(empty) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::Invalid(format!("instance {empty} has no members")));
        }
        Ok(Self { assignment, sizes })
    }

    /// Dense partition from arbitrary instance ids, numbered by first appearance.
    pub fn from_ids<T: Copy + Eq + std::hash::Hash>(ids: &[T]) -> Self {
        let mut map = HashMap::new();
        let mut sizes = Vec::new();
        let assignment = ids
            .iter()
            .map(|id| {
                let next = map.len();
                let k = *map.entry(*id).or_insert(next);
                if k == sizes.len() {
                    sizes.push(0);
                }
                sizes[k] += 1;
                k
            })
            .collect();
        Self { assignment, sizes }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_instances(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// `K x d` matrix of per-instance mean embeddings.
    pub fn centroids(&self, embeddings: ArrayView2<f64>) -> Result<Array2<f64>> {
        if embeddings.nrows() != self.assignment.len() {
            return Err(Error::Shape(format!(
                "{} embeddings for a partition of {} points",
                embeddings.nrows(),
                self.assignment.len()
            )));
        }
        let mut mu = Array2::zeros((self.sizes.len(), embeddings.ncols()));
        for (row, &k) in embeddings.rows().into_iter().zip(&self.assignment) {
            let mut m = mu.row_mut(k);
            m += &row;
        }
        for (mut m, &n) in mu.rows_mut().into_iter().zip(&self.sizes) {
            m /= n as f64;
        }
        Ok(mu)
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn check_nonempty(partition: &InstancePartition) -> Result<()> {
    if partition.num_instances() == 0 {
        return Err(Error::Invalid("embedding loss needs at least one instance".into()));
    }
    Ok(())
}

pub fn pull_loss(
    embeddings: ArrayView2<f64>,
    partition: &InstancePartition,
    delta_v: f64,
) -> Result<f64> {
    check_nonempty(partition)?;
    let mu = partition.centroids(embeddings)?;
    let k = partition.num_instances() as f64;
    let mut total = 0.0;
    for (e, &c) in embeddings.rows().into_iter().zip(partition.assignment()) {
        let h = (norm((&mu.row(c) - &e).view()) - delta_v).max(0.0);
        total += h * h / partition.sizes()[c] as f64;
    }
    Ok(total / k)
}

pub fn push_loss(centroids: ArrayView2<f64>, delta_d: f64) -> f64 {
    let k = centroids.nrows();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                let h = (2.0 * delta_d - norm((&centroids.row(a) - &centroids.row(b)).view())).max(0.0);
                total += h * h;
            }
        }
    }
    total / (k * (k - 1)) as f64
}

pub fn reg_loss(centroids: ArrayView2<f64>) -> f64 {
    let k = centroids.nrows();
    if k == 0 {
        return 0.0;
    }
    centroids.rows().into_iter().map(norm).sum::<f64>() / k as f64
}

/// Weighted embedding loss and its gradient with respect to every
/// embedding, including the dependence of the centroids on their members.
pub fn embedding_loss_and_grad(
    embeddings: ArrayView2<f64>,
    partition: &InstancePartition,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    check_nonempty(partition)?;
    let mu = partition.centroids(embeddings)?;
    let (n, d) = embeddings.dim();
    let kk = partition.num_instances();
    let k = kk as f64;
    let sizes = partition.sizes();
    let assign = partition.assignment();

    let mut grad = Array2::<f64>::zeros((n, d));
    // Gradient with respect to each centroid, spread to members at the end.
    let mut grad_mu = Array2::<f64>::zeros((kk, d));

    // Pull: residual r_j = mu_c - e_j.
    let mut pull = 0.0;
    for j in 0..n {
        let c = assign[j];
        let r = &mu.row(c) - &embeddings.row(j);
        let dist = norm(r.view());
        let h = dist - cfg.delta_v;
        if h > 0.0 {
            let nk = sizes[c] as f64;
            pull += h * h / nk;
            if dist > 0.0 {
                let g = &r * (cfg.alpha * 2.0 * h / (k * nk * dist));
                let mut gj = grad.row_mut(j);
                gj -= &g;
                let mut gm = grad_mu.row_mut(c);
                gm += &g;
            }
        }
    }
    pull /= k;

    // Push over ordered pairs; each unordered pair contributes twice.
    let mut push = 0.0;
    if kk > 1 {
        let scale = 1.0 / (k * (k - 1.0));
        for a in 0..kk {
            for b in (a + 1)..kk {
                let diff = &mu.row(a) - &mu.row(b);
                let dist = norm(diff.view());
                let h = 2.0 * cfg.delta_d - dist;
                if h > 0.0 {
                    push += 2.0 * h * h * scale;
                    if dist > 0.0 {
                        let g = &diff * (cfg.beta * 2.0 * scale * 2.0 * h / dist);
                        let mut ga = grad_mu.row_mut(a);
                        ga -= &g;
                        let mut gb = grad_mu.row_mut(b);
                        gb += &g;
                    }
                }
            }
        }
    }

    let mut reg = 0.0;
    for c in 0..kk {
        let m = mu.row(c);
        let len = norm(m);
        reg += len;
        if len > 0.0 {
            let mut gm = grad_mu.row_mut(c);
            gm.scaled_add(cfg.gamma / (k * len), &m);
        }
    }
    reg /= k;

    for j in 0..n {
        let c = assign[j];
        let mut gj = grad.row_mut(j);
        gj.scaled_add(1.0 / sizes[c] as f64, &grad_mu.row(c));
    }

    let loss = cfg.alpha * pull + cfg.beta * push + cfg.gamma * reg;
    Ok((loss, grad))
}

/// Mean cross-entropy of per-point probabilities against class labels.
pub fn prediction_loss(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &s) in probs.rows().into_iter().zip(labels) {
        let p = *row.get(s).ok_or_else(|| {
            Error::Invalid(format!("class index {s} out of range for {} classes", row.len()))
        })?;
        total -= p.max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn total(e: ArrayView2<f64>, p: &InstancePartition, cfg: &LossConfig) -> f64 {
        let mu = p.centroids(e).unwrap();
        cfg.alpha * pull_loss(e, p, cfg.delta_v).unwrap()
            + cfg.beta * push_loss(mu.view(), cfg.delta_d)
            + cfg.gamma * reg_loss(mu.view())
    }

    #[test]
    fn pull_hand_value() {
        let e = array![[-1.0], [1.0]];
        let p = InstancePartition::new(vec![0, 0], 1).unwrap();
        assert_eq!(pull_loss(e.view(), &p, 0.5).unwrap(), 0.25);
    }

    #[test]
    fn pull_inactive_within_margin_and_on_boundary() {
        let p = InstancePartition::new(vec![0, 0], 1).unwrap();
        let inside = array![[-0.2, 0.1], [0.2, -0.1]];
        assert_eq!(pull_loss(inside.view(), &p, 0.5).unwrap(), 0.0);
        let boundary = array![[-0.5], [0.5]];
        assert_eq!(pull_loss(boundary.view(), &p, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn push_hand_values() {
        assert_eq!(push_loss(array![[3.0, 4.0]].view(), 1.5), 0.0);
        assert_eq!(push_loss(array![[0.0], [1.0]].view(), 1.5), 4.0);
        assert_eq!(push_loss(array![[0.0], [3.0], [6.0]].view(), 1.5), 0.0);
    }

    #[test]
    fn reg_hand_values() {
        assert_eq!(reg_loss(array![[0.0, 0.0]].view()), 0.0);
        assert_eq!(reg_loss(array![[3.0, 4.0], [0.0, 0.0]].view()), 2.5);
        assert_eq!(reg_loss(array![[0.0, 1.0]].view()), 1.0);
    }

    #[test]
    fn empty_instance_is_rejected() {
        assert!(InstancePartition::new(vec![0, 0, 2], 3).is_err());
        let p = InstancePartition::new(vec![], 0).unwrap();
        assert!(pull_loss(Array2::zeros((0, 2)).view(), &p, 0.5).is_err());
    }

    #[test]
    fn default_weights() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.alpha, cfg.beta, cfg.gamma), (1.0, 1.0, 0.001));
        assert_eq!((cfg.delta_v, cfg.delta_d), (0.5, 1.5));
    }

    #[test]
    fn zero_configuration_has_zero_loss_and_gradient() {
        let e = array![[0.1, 0.0], [-0.1, 0.0], [0.0, 0.0]];
        let p = InstancePartition::new(vec![0, 0, 0], 1).unwrap();
        let (l, g) = embedding_loss_and_grad(e.view(), &p, &LossConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let assignment: Vec<usize> = (0..10).map(|j| j % 3).collect();
            let p = InstancePartition::new(assignment, 3).unwrap();
            let e = Array2::from_shape_fn((10, 2), |_| rng.random_range(-1.5..1.5));
            let (l, g) = embedding_loss_and_grad(e.view(), &p, &cfg).unwrap();
            assert_relative_eq!(l, total(e.view(), &p, &cfg), max_relative = 1e-12);
            let h = 1e-6;
            for idx in ndarray::indices_of(&e) {
                let mut plus = e.clone();
                plus[idx] += h;
                let mut minus = e.clone();
                minus[idx] -= h;
                let fd = (total(plus.view(), &p, &cfg) - total(minus.view(), &p, &cfg)) / (2.0 * h);
                let tol = 1e-5 * fd.abs().max(g[idx].abs()).max(1e-3);
                assert!((fd - g[idx]).abs() <= tol, "seed {seed} {idx:?}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn pull_and_push_are_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = InstancePartition::new((0..12).map(|j| j % 4).collect(), 4).unwrap();
        let e = Array2::from_shape_fn((12, 3), |_| rng.random_range(-2.0..2.0));
        let shifted = &e + &array![5.0, -3.0, 0.5];
        let mu = p.centroids(e.view()).unwrap();
        let mu2 = p.centroids(shifted.view()).unwrap();
        assert_relative_eq!(
            pull_loss(e.view(), &p, 0.5).unwrap(),
            pull_loss(shifted.view(), &p, 0.5).unwrap(),
            max_relative = 1e-10
        );
        assert_relative_eq!(push_loss(mu.view(), 1.5), push_loss(mu2.view(), 1.5), max_relative = 1e-10);
        assert!((reg_loss(mu.view()) - reg_loss(mu2.view())).abs() > 1e-3);
    }

    #[test]
    fn zero_loss_implies_own_centroid_is_nearest() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Centroids 2*delta_d apart on a line, members within delta_v.
        let k = 4;
        let mut rows = Vec::new();
        let mut assignment = Vec::new();
        for c in 0..k {
            for _ in 0..5 {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r: f64 = rng.random_range(0.0..cfg.delta_v);
                rows.push([c as f64 * 2.0 * cfg.delta_d + 10.0 + r * angle.cos(), r * angle.sin()]);
                assignment.push(c);
            }
        }
        // Recenter each group so the centroid lands on the lattice point.
        let mut e = Array2::from_shape_fn((rows.len(), 2), |(i, a)| rows[i][a]);
        let p = InstancePartition::new(assignment.clone(), k).unwrap();
        let mu = p.centroids(e.view()).unwrap();
        for (j, &c) in assignment.iter().enumerate() {
            e[[j, 0]] -= mu[[c, 0]] - (c as f64 * 2.0 * cfg.delta_d + 10.0);
            e[[j, 1]] -= mu[[c, 1]];
        }
        let mu = p.centroids(e.view()).unwrap();
        if pull_loss(e.view(), &p, cfg.delta_v).unwrap() == 0.0 && push_loss(mu.view(), cfg.delta_d) == 0.0 {
            for (j, &c) in assignment.iter().enumerate() {
                let own = norm((&mu.row(c) - &e.row(j)).view());
                for other in 0..k {
                    if other != c {
                        assert!(own < norm((&mu.row(other) - &e.row(j)).view()));
                    }
                }
            }
        }
    }

    #[test]
    fn cross_entropy_of_uniform_thirteen_classes() {
        let probs = Array2::from_elem((5, 13), 1.0 / 13.0);
        let l = prediction_loss(probs.view(), &[0, 3, 12, 7, 1]).unwrap();
        assert_relative_eq!(l, 13f64.ln(), max_relative = 1e-12);
        assert!(prediction_loss(probs.view(), &[0, 3, 13, 7, 1]).is_err());
    }
}
