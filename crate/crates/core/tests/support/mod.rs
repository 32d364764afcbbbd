//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls into the code it is used to check
//! beyond building inputs.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use pointseg_core::crf::{CrfConfig, JointLabeling};
use pointseg_core::loss::LossConfig;
use pointseg_core::network::{forward, loss_and_gradient, total_loss, NetworkConfig, NetworkParams};
use pointseg_core::{PointCloud, PredictionField, Vertex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).unwrap().sample(rng)
}

// ---------------------------------------------------------------- gradients

/// `|a - n| <= abs` or `|a - n| <= rel * max(|a|, |n|)`.
pub fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs || diff <= rel * analytic.abs().max(numeric.abs())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose finite-difference stencil crosses a kink.
    pub skipped: usize,
    pub failures: usize,
    pub worst_abs: f64,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64, rel: f64, abs: f64) {
        self.checked += 1;
        self.worst_abs = self.worst_abs.max((analytic - numeric).abs());
        if !close(analytic, numeric, rel, abs) {
            self.failures += 1;
        }
    }

    pub fn merge(&mut self, o: GradCheck) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.failures += o.failures;
        self.worst_abs = self.worst_abs.max(o.worst_abs);
    }
}

/// A small labeled window and network.
pub struct NetCase {
    pub params: NetworkParams,
    pub x: Array2<f64>,
    pub semantic: Vec<usize>,
    pub instance: Vec<u32>,
    pub loss: LossConfig,
}

/// Random case with `N <= 16`, `|S| <= 3`, `d <= 3`.
pub fn small_net_case(seed: u64) -> NetCase {
    let mut r = rng(seed);
    let n = r.random_range(4..=16);
    let classes = r.random_range(2..=3);
    let d = r.random_range(1..=3);
    let cfg = NetworkConfig {
        input_width: 9,
        trunk_widths: vec![7, 6],
        head_widths: vec![5],
        embedding_dim: d,
    };
    let params = NetworkParams::init(&cfg, classes, seed).unwrap();
    let x = Array2::from_shape_fn((n, 9), |_| gaussian(&mut r, 1.0));
    let k = r.random_range(1..=n.min(4));
    NetCase {
        params,
        x,
        semantic: (0..n).map(|_| r.random_range(0..classes)).collect(),
        instance: (0..n).map(|_| r.random_range(0..k) as u32 * 3).collect(),
        // Small margins keep both hinges active on random outputs.
        loss: LossConfig {
            delta_v: 0.05,
            delta_d: 0.4,
            ..LossConfig::default()
        },
    }
}

/// Which side of every kink the loss sits on: rectifier signs, the pooled
/// argmax row and the hinge states, all recomputed here from the outputs.
fn net_signature(case: &NetCase, params: &NetworkParams) -> Vec<u64> {
    pointseg_core::network::activation_signature(params, case.x.view(), &case.instance, &case.loss).unwrap()
}

/// Central differences over every parameter (or every `stride`-th).
pub fn check_network_gradient(case: &NetCase, stride: usize, h: f64, rel: f64, abs: f64) -> GradCheck {
    let (_, grad) =
        loss_and_gradient(&case.params, case.x.view(), &case.semantic, &case.instance, &case.loss).unwrap();
    let analytic = grad.to_flat();
    let base = case.params.to_flat();
    let sig = net_signature(case, &case.params);
    let mut probe = case.params.clone();
    let mut eval = |values: &[f64]| -> (f64, Vec<u64>) {
        probe.set_flat(values).unwrap();
        let pred = forward(&probe, case.x.view()).unwrap();
        let loss = total_loss(&pred, &case.semantic, &case.instance, &case.loss).unwrap();
        (loss, net_signature(case, &probe))
    };
    let mut out = GradCheck::default();
    let mut v = base.clone();
    for i in (0..base.len()).step_by(stride.max(1)) {
        v[i] = base[i] + h;
        let (lp, sp) = eval(&v);
        v[i] = base[i] - h;
        let (lm, sm) = eval(&v);
        v[i] = base[i];
        if sp != sig || sm != sig {
            out.skipped += 1;
            continue;
        }
        out.record(analytic[i], (lp - lm) / (2.0 * h), rel, abs);
    }
    out
}

/// Embedding loss written out directly from its definition.
pub fn reference_embedding_loss(emb: &Array2<f64>, ids: &[usize], cfg: &LossConfig) -> f64 {
    let k = ids.iter().max().unwrap() + 1;
    let d = emb.ncols();
    let mut mu = vec![vec![0.0; d]; k];
    let mut size = vec![0usize; k];
    for (j, &c) in ids.iter().enumerate() {
        size[c] += 1;
        for a in 0..d {
            mu[c][a] += emb[[j, a]];
        }
    }
    for c in 0..k {
        for a in 0..d {
            mu[c][a] /= size[c] as f64;
        }
    }
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mut pull = vec![0.0; k];
    for (j, &c) in ids.iter().enumerate() {
        let e: Vec<f64> = emb.row(j).to_vec();
        pull[c] += (dist(&mu[c], &e) - cfg.delta_v).max(0.0).powi(2) / size[c] as f64;
    }
    let pull = pull.iter().sum::<f64>() / k as f64;
    let mut push = 0.0;
    if k > 1 {
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    push += (2.0 * cfg.delta_d - dist(&mu[a], &mu[b])).max(0.0).powi(2);
                }
            }
        }
        push /= (k * (k - 1)) as f64;
    }
    let reg = mu.iter().map(|m| dist(m, &vec![0.0; d])).sum::<f64>() / k as f64;
    cfg.alpha * pull + cfg.beta * push + cfg.gamma * reg
}

fn embedding_signature(emb: &Array2<f64>, ids: &[usize], cfg: &LossConfig) -> Vec<bool> {
    let k = ids.iter().max().unwrap() + 1;
    let d = emb.ncols();
    let mut mu = Array2::<f64>::zeros((k, d));
    let mut size = vec![0.0; k];
    for (j, &c) in ids.iter().enumerate() {
        size[c] += 1.0;
        let mut row = mu.row_mut(c);
        row += &emb.row(j);
    }
    for c in 0..k {
        let mut row = mu.row_mut(c);
        row /= size[c];
    }
    let norm = |v: ndarray::Array1<f64>| v.mapv(|x| x * x).sum().sqrt();
    let mut sig: Vec<bool> = ids
        .iter()
        .enumerate()
        .map(|(j, &c)| norm(&mu.row(c) - &emb.row(j)) > cfg.delta_v)
        .collect();
    for a in 0..k {
        for b in (a + 1)..k {
            sig.push(norm(&mu.row(a) - &mu.row(b)) < 2.0 * cfg.delta_d);
        }
    }
    sig
}

/// Random embeddings with `N <= 16`, `d <= 3`, dense instance ids.
pub fn small_embedding_case(seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let n = r.random_range(2..=16);
    let d = r.random_range(1..=3);
    let k = r.random_range(1..=n.min(4));
    let mut ids: Vec<usize> = (0..n).map(|j| if j < k { j } else { r.random_range(0..k) }).collect();
    ids.rotate_left(r.random_range(0..n));
    let emb = Array2::from_shape_fn((n, d), |_| gaussian(&mut r, 1.0));
    (emb, ids)
}

/// Central differences of the reference loss against `grad`.
pub fn check_embedding_gradient(
    emb: &Array2<f64>,
    ids: &[usize],
    cfg: &LossConfig,
    grad: &Array2<f64>,
    h: f64,
    rel: f64,
    abs: f64,
) -> GradCheck {
    let sig = embedding_signature(emb, ids, cfg);
    let mut out = GradCheck::default();
    let mut e = emb.clone();
    for j in 0..emb.nrows() {
        for a in 0..emb.ncols() {
            let x0 = emb[[j, a]];
            e[[j, a]] = x0 + h;
            let (lp, sp) = (reference_embedding_loss(&e, ids, cfg), embedding_signature(&e, ids, cfg));
            e[[j, a]] = x0 - h;
            let (lm, sm) = (reference_embedding_loss(&e, ids, cfg), embedding_signature(&e, ids, cfg));
            e[[j, a]] = x0;
            if sp != sig || sm != sig {
                out.skipped += 1;
                continue;
            }
            out.record(grad[[j, a]], (lp - lm) / (2.0 * h), rel, abs);
        }
    }
    out
}

// ---------------------------------------------------------------- CRF energy

/// Tiny random CRF problem with two classes and embeddings in `d` dims.
pub struct CrfFixture {
    pub cloud: PointCloud,
    pub pred: PredictionField,
    pub init: Vec<usize>,
}

pub fn crf_fixture(seed: u64, n: usize, d: usize) -> CrfFixture {
    let mut r = rng(seed);
    let points: Vec<Vertex> = (0..n)
        .map(|_| {
            let mut normal = [gaussian(&mut r, 1.0), gaussian(&mut r, 1.0), gaussian(&mut r, 1.0)];
            let len = (normal.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
            normal.iter_mut().for_each(|v| *v /= len);
            Vertex {
                location: [r.random_range(0.0..0.3), r.random_range(0.0..0.3), r.random_range(0.0..0.3)],
                normal: Some(normal),
                color: [r.random(), r.random(), r.random()],
                gt_semantic: None,
                gt_instance: None,
            }
        })
        .collect();
    let cloud = PointCloud::new(points, vec!["a".into(), "b".into()]).unwrap();
    let probs = Array2::from_shape_fn((n, 2), |_| 0.0);
    let mut probs = probs;
    for j in 0..n {
        let p: f64 = r.random_range(0.02..0.98);
        probs[[j, 0]] = p;
        probs[[j, 1]] = 1.0 - p;
    }
    let embeddings = Array2::from_shape_fn((n, d), |_| gaussian(&mut r, 1.0));
    let mut init: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    // Both instances present at the start.
    init[0] = 0;
    init[1] = 1;
    CrfFixture {
        cloud,
        pred: PredictionField { probs, embeddings },
        init,
    }
}

/// Like [`crf_fixture`], but the embeddings come from two latent instances
/// whose centers are `2 * delta_d` apart, and the initial instances come from
/// mean-shift, as in the pipeline.
pub fn clustered_crf_fixture(seed: u64, n: usize, d: usize, spread: f64) -> CrfFixture {
    let mut fx = crf_fixture(seed, n, d);
    let mut r = rng(seed ^ 0xc1u64);
    let mut latent: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    latent[0] = 0;
    latent[1] = 1;
    let mut dir: Vec<f64> = (0..d).map(|_| gaussian(&mut r, 1.0)).collect();
    let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    dir.iter_mut().for_each(|v| *v *= 3.0 / len);
    let base: Vec<f64> = (0..d).map(|_| gaussian(&mut r, 1.0)).collect();
    for j in 0..n {
        for a in 0..d {
            fx.pred.embeddings[[j, a]] = base[a] + latent[j] as f64 * dir[a] + gaussian(&mut r, spread);
        }
    }
    let ms = pointseg_core::MeanShiftConfig::default();
    fx.init = pointseg_core::meanshift::mean_shift(fx.pred.embeddings.view(), &ms).unwrap().assignment;
    fx
}

fn gaussian_density(e: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = e.len() as f64;
    let inv = cov.clone().try_inverse().expect("covariance is invertible");
    let r = e - mean;
    let q = (r.transpose() * inv * &r)[(0, 0)];
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(d) * cov.determinant()).sqrt()
}

/// Energy of a hard labeling summed term by term over points, pairs and
/// instances.
pub fn brute_force_energy(fx: &CrfFixture, lab: &JointLabeling, cfg: &CrfConfig) -> f64 {
    let n = fx.cloud.len();
    let d = fx.pred.embeddings.ncols();
    let ns = fx.pred.probs.ncols();
    let p = |j: usize, s: usize| fx.pred.probs[[j, s]];
    let omega = |same: bool| if same { -1.0 } else { 1.0 };
    let emb = |j: usize| DVector::from_iterator(d, fx.pred.embeddings.row(j).iter().copied());

    let mut total = 0.0;
    for j in 0..n {
        total += -p(j, lab.semantic[j]).max(1e-8).ln();
    }
    let pair_weight = match cfg.semantic_pairwise_norm {
        pointseg_core::crf::PairwiseNorm::Sum => 1.0,
        pointseg_core::crf::PairwiseNorm::Mean => 1.0 / (n as f64 - 1.0).max(1.0),
    };
    for j in 0..n {
        for k in (j + 1)..n {
            let (s, t) = (lab.semantic[j], lab.semantic[k]);
            let diff = p(j, s) - p(k, t);
            total += pair_weight * omega(s == t) * (-diff * diff / (2.0 * cfg.theta * cfg.theta)).exp();
        }
    }
    let mut ids: Vec<usize> = lab.instance.clone();
    ids.sort_unstable();
    ids.dedup();
    for &i in &ids {
        let members: Vec<usize> = (0..n).filter(|&j| lab.instance[j] == i).collect();
        let m = members.len() as f64;
        let mean = members.iter().fold(DVector::zeros(d), |acc, &j| acc + emb(j)) / m;
        let cov = if members.len() == 1 {
            DMatrix::identity(d, d) * cfg.cov_scale
        } else {
            let mut c = DMatrix::zeros(d, d);
            for &j in &members {
                let r = emb(j) - &mean;
                c += &r * r.transpose();
            }
            c / m + DMatrix::identity(d, d) * cfg.cov_epsilon
        };
        for &j in &members {
            total += -gaussian_density(&emb(j), &mean, &cov) - m.ln();
        }
        for s in 0..ns {
            let h = members.iter().filter(|&&j| lab.semantic[j] == s).count() as f64 / m;
            if h > 0.0 {
                total += -h * h.ln();
            }
        }
    }
    for j in 0..n {
        for k in (j + 1)..n {
            let a = &fx.cloud.points[j];
            let b = &fx.cloud.points[k];
            let sq = |x: [f64; 3], y: [f64; 3]| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>();
            let mut arg = -sq(a.location, b.location) / (2.0 * cfg.lambda1 * cfg.lambda1)
                - sq(a.color, b.color) / (2.0 * cfg.lambda3 * cfg.lambda3);
            if cfg.use_normals {
                arg -= sq(a.normal.unwrap_or([0.0; 3]), b.normal.unwrap_or([0.0; 3]))
                    / (2.0 * cfg.lambda2 * cfg.lambda2);
            }
            total += omega(lab.instance[j] == lab.instance[k]) * arg.exp();
        }
    }
    total
}

/// Every joint labeling of `n` points with `classes` classes and instance
/// ids `0..instances`.
pub fn all_labelings(n: usize, classes: usize, instances: usize) -> Vec<JointLabeling> {
    let digits = |mut code: usize, base: usize| -> Vec<usize> {
        (0..n)
            .map(|_| {
                let v = code % base;
                code /= base;
                v
            })
            .collect()
    };
    let mut out = Vec::new();
    for sc in 0..classes.pow(n as u32) {
        for ic in 0..instances.pow(n as u32) {
            out.push(JointLabeling {
                semantic: digits(sc, classes),
                instance: digits(ic, instances),
            });
        }
    }
    out
}

/// Fraction of `energies` that are `>= e` (1.0 means `e` is the minimum).
pub fn fraction_not_better(e: f64, energies: &[f64]) -> f64 {
    energies.iter().filter(|&&x| x >= e - 1e-9 * e.abs().max(1.0)).count() as f64 / energies.len() as f64
}

// ---------------------------------------------------------------- clustering

/// Three isotropic blobs with spread `sigma` whose centers are at least
/// `separation` apart. Returns the points and the generating center of each.
pub fn three_blobs(seed: u64, sigma: f64, separation: f64) -> (Array2<f64>, Vec<usize>, Array2<f64>) {
    let mut r = rng(seed);
    let d = r.random_range(2..=3);
    let offset: Vec<f64> = (0..d).map(|_| r.random_range(-20.0..20.0)).collect();
    let s = separation * r.random_range(1.0..1.5);
    let mut centers = Array2::<f64>::zeros((3, d));
    let raw = [[0.0, 0.0], [s, 0.0], [0.5 * s, 0.87 * s]];
    for c in 0..3 {
        for a in 0..d {
            centers[[c, a]] = offset[a] + if a < 2 { raw[c][a] } else { 0.0 };
        }
    }
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for c in 0..3 {
        for _ in 0..r.random_range(20..60) {
            labels.push(c);
            rows.extend((0..d).map(|a| centers[[c, a]] + gaussian(&mut r, sigma)));
        }
    }
    let pts = Array2::from_shape_vec((labels.len(), d), rows).unwrap();
    (pts, labels, centers)
}

/// Nearest center of every point.
pub fn nearest_center(points: &Array2<f64>, centers: &Array2<f64>) -> Vec<usize> {
    points
        .rows()
        .into_iter()
        .map(|p| {
            (0..centers.nrows())
                .min_by(|&a, &b| {
                    let da = (&centers.row(a) - &p).mapv(|v| v * v).sum();
                    let db = (&centers.row(b) - &p).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap()
        })
        .collect()
}

/// True when two labelings induce the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.len() == b.len()
        && a.iter().zip(b).all(|(&x, &y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}
