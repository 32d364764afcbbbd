//! Multi-task pointwise network.
//!
//! A shared per-point trunk maps each input row to a feature vector. A
//! max-pool over the window gives a global context vector, which is
//! concatenated back to every point before two heads: a classifier ending
//! in a softmax over classes and an embedding head ending in a linear
//! `d`-dimensional output. Every layer is affine; all but the last layer of
//! each head are followed by a rectifier, and so is every trunk layer.

mod io;
mod train;

pub use io::{
    export_predictions, format_predictions, import_predictions, load_params, parse_predictions,
    read_params, save_params, write_params,
};
pub use train::{train, TrainConfig, TrainReport};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{embedding_loss_and_grad, prediction_loss, InstancePartition, LossConfig};
use crate::scene::window::FEATURE_WIDTH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_width: usize,
    /// Output widths of the trunk layers; the last one is the feature width.
    pub trunk_widths: Vec<usize>,
    /// Hidden widths shared by both heads.
    pub head_widths: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_width: FEATURE_WIDTH,
            trunk_widths: vec![32, 64, 128],
            head_widths: vec![64],
            embedding_dim: 8,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("input width and embedding dimension must be positive".into()));
        }
        if self.trunk_widths.is_empty() {
            return Err(Error::Config("trunk needs at least one layer".into()));
        }
        if self.trunk_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// One affine layer, `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn out_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_width(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub trunk: Vec<Layer>,
    /// First layer takes `[feature; context]`, twice the feature width.
    pub classifier: Vec<Layer>,
    pub embedder: Vec<Layer>,
}

impl NetworkParams {
    /// All-zero parameters with the given architecture.
    pub fn zeros(cfg: &NetworkConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("network needs at least one class".into()));
        }
        let chain = |input: usize, widths: &[usize]| {
            let mut layers = Vec::with_capacity(widths.len());
            let mut prev = input;
            for &w in widths {
                layers.push(Layer::zeros(w, prev));
                prev = w;
            }
            layers
        };
        let feat = *cfg.trunk_widths.last().unwrap();
        let head = |out: usize| {
            let mut widths = cfg.head_widths.clone();
            widths.push(out);
            chain(2 * feat, &widths)
        };
        Ok(Self {
            trunk: chain(cfg.input_width, &cfg.trunk_widths),
            classifier: head(num_classes),
            embedder: head(cfg.embedding_dim),
        })
    }

    /// He-normal weights from a seeded generator, zero biases.
    pub fn init(cfg: &NetworkConfig, num_classes: usize, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(cfg, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in params.layers_mut() {
            let std = (2.0 / layer.in_width() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            layer.weight.mapv_inplace(|_| normal.sample(&mut rng));
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ls: &[Layer]| ls.iter().map(|l| Layer::zeros(l.out_width(), l.in_width())).collect();
        Self {
            trunk: z(&self.trunk),
            classifier: z(&self.classifier),
            embedder: z(&self.embedder),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(&self.classifier).chain(&self.embedder)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk
            .iter_mut()
            .chain(self.classifier.iter_mut())
            .chain(self.embedder.iter_mut())
    }

    pub fn input_width(&self) -> usize {
        self.trunk[0].in_width()
    }

    pub fn feature_width(&self) -> usize {
        self.trunk.last().unwrap().out_width()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.last().unwrap().out_width()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedder.last().unwrap().out_width()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Checks shape chaining and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() || self.classifier.is_empty() || self.embedder.is_empty() {
            return Err(Error::Shape("every layer stack needs at least one layer".into()));
        }
        let check_chain = |name: &str, layers: &[Layer], input: usize| -> Result<()> {
            let mut prev = input;
            for (i, l) in layers.iter().enumerate() {
                if l.in_width() != prev || l.bias.len() != l.out_width() || l.out_width() == 0 {
                    return Err(Error::Shape(format!(
                        "{name} layer {i}: weight {:?}, bias {}, expected input {prev}",
                        l.weight.dim(),
                        l.bias.len()
                    )));
                }
                prev = l.out_width();
            }
            Ok(())
        };
        check_chain("trunk", &self.trunk, self.input_width())?;
        let feat = self.feature_width();
        check_chain("classifier", &self.classifier, 2 * feat)?;
        check_chain("embedder", &self.embedder, 2 * feat)?;
        if self.layers().any(|l| l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        Ok(())
    }

    /// Parameters flattened in layer order, each weight row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_parameters()
            )));
        }
        let mut it = values.iter();
        for l in self.layers_mut() {
            for (w, v) in l.weight.iter_mut().zip(&mut it) {
                *w = *v;
            }
            for (b, v) in l.bias.iter_mut().zip(&mut it) {
                *b = *v;
            }
        }
        Ok(())
    }

    /// `self += a * other`; shapes must match.
    pub fn scaled_add(&mut self, a: f64, other: &NetworkParams) {
        for (l, o) in self.layers_mut().zip(other.layers()) {
            l.weight.scaled_add(a, &o.weight);
            l.bias.scaled_add(a, &o.bias);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for l in self.layers_mut() {
            l.weight *= a;
            l.bias *= a;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-point network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionField {
    /// `N x |S|`, rows sum to 1.
    pub probs: Array2<f64>,
    /// `N x d`.
    pub embeddings: Array2<f64>,
}

impl PredictionField {
    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Checks row counts, probability rows (non-negative, summing to 1
    /// within `tol`) and finite embeddings.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.probs.nrows() != self.embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{} probability rows but {} embedding rows",
                self.probs.nrows(),
                self.embeddings.nrows()
            )));
        }
        for (j, row) in self.probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Invalid(format!("row {j}: probabilities must be finite and >= 0")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::Invalid(format!("row {j}: probabilities sum to {sum}")));
            }
        }
        if let Some((j, _)) = self
            .embeddings
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Invalid(format!("row {j}: non-finite embedding")));
        }
        Ok(())
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Post-rectifier output of every trunk layer.
    pub trunk: Vec<Array2<f64>>,
    pub context: Array1<f64>,
    /// Row holding the maximum of each feature column.
    pub argmax: Vec<usize>,
    /// Output of every classifier layer; the last is the logits.
    pub classifier: Vec<Array2<f64>>,
    pub embedder: Vec<Array2<f64>>,
    pub output: PredictionField,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn head_forward(layers: &[Layer], feat: &Array2<f64>, context: &Array1<f64>) -> Vec<Array2<f64>> {
    let d = feat.ncols();
    let first = &layers[0];
    let shift = first.weight.slice(s![.., d..]).dot(context) + &first.bias;
    let mut acts = Vec::with_capacity(layers.len());
    let mut a = feat.dot(&first.weight.slice(s![.., ..d]).t()) + &shift;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            a = layer.apply(acts.last().map(|x: &Array2<f64>| x.view()).unwrap());
        }
        if i + 1 < layers.len() {
            relu_inplace(&mut a);
        }
        acts.push(std::mem::take(&mut a));
    }
    acts
}

pub fn forward_cached(params: &NetworkParams, x: ArrayView2<f64>) -> Result<ForwardCache> {
    if x.ncols() != params.input_width() {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {}",
            x.ncols(),
            params.input_width()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Shape("empty input window".into()));
    }
    let mut trunk: Vec<Array2<f64>> = Vec::with_capacity(params.trunk.len());
    for layer in &params.trunk {
        let mut a = layer.apply(trunk.last().map(|t| t.view()).unwrap_or(x));
        relu_inplace(&mut a);
        trunk.push(a);
    }
    let feat = trunk.last().unwrap();
    let mut argmax = vec![0usize; feat.ncols()];
    let mut context = feat.row(0).to_owned();
    for (r, row) in feat.rows().into_iter().enumerate().skip(1) {
        for (c, &v) in row.iter().enumerate() {
            if v > context[c] {
                context[c] = v;
                argmax[c] = r;
            }
        }
    }
    let classifier = head_forward(&params.classifier, feat, &context);
    let embedder = head_forward(&params.embedder, feat, &context);
    let output = PredictionField {
        probs: softmax_rows(classifier.last().unwrap()),
        embeddings: embedder.last().unwrap().clone(),
    };
    Ok(ForwardCache {
        trunk,
        context,
        argmax,
        classifier,
        embedder,
        output,
    })
}

pub fn forward(params: &NetworkParams, x: ArrayView2<f64>) -> Result<PredictionField> {
    forward_cached(params, x).map(|c| c.output)
}

fn mask_relu(grad: &mut Array2<f64>, act: &Array2<f64>) {
    Zip::from(grad).and(act).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn head_backward(
    layers: &[Layer],
    acts: &[Array2<f64>],
    feat: &Array2<f64>,
    context: &Array1<f64>,
    dout: Array2<f64>,
    grads: &mut [Layer],
    dfeat: &mut Array2<f64>,
    dcontext: &mut Array1<f64>,
) {
    let d = feat.ncols();
    let last = layers.len() - 1;
    let mut dz = dout;
    for l in (0..layers.len()).rev() {
        if l != last {
            mask_relu(&mut dz, &acts[l]);
        }
        let colsum = dz.sum_axis(Axis(0));
        grads[l].bias += &colsum;
        let w = &layers[l].weight;
        if l == 0 {
            let mut gw = grads[0].weight.slice_mut(s![.., ..d]);
            gw += &dz.t().dot(feat);
            let mut gc = grads[0].weight.slice_mut(s![.., d..]);
            for (o, &cs) in colsum.iter().enumerate() {
                gc.row_mut(o).scaled_add(cs, context);
            }
            *dfeat += &dz.dot(&w.slice(s![.., ..d]));
            *dcontext += &colsum.dot(&w.slice(s![.., d..]));
        } else {
            grads[l].weight += &dz.t().dot(&acts[l - 1]);
            dz = dz.dot(w);
        }
    }
}

/// Backpropagates gradients of some loss with respect to the logits and
/// the embeddings through the whole network.
pub fn backward_from_outputs(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    cache: &ForwardCache,
    dlogits: Array2<f64>,
    dembeddings: Array2<f64>,
) -> NetworkParams {
    let mut grads = params.zeros_like();
    let feat = cache.trunk.last().unwrap();
    let mut dfeat = Array2::zeros(feat.dim());
    let mut dcontext = Array1::zeros(feat.ncols());
    head_backward(
        &params.classifier,
        &cache.classifier,
        feat,
        &cache.context,
        dlogits,
        &mut grads.classifier,
        &mut dfeat,
        &mut dcontext,
    );
    head_backward(
        &params.embedder,
        &cache.embedder,
        feat,
        &cache.context,
        dembeddings,
        &mut grads.embedder,
        &mut dfeat,
        &mut dcontext,
    );
    for (c, &r) in cache.argmax.iter().enumerate() {
        dfeat[[r, c]] += dcontext[c];
    }
    let mut da = dfeat;
    for l in (0..params.trunk.len()).rev() {
        mask_relu(&mut da, &cache.trunk[l]);
        grads.trunk[l].bias += &da.sum_axis(Axis(0));
        let input = if l == 0 { x } else { cache.trunk[l - 1].view() };
        grads.trunk[l].weight += &da.t().dot(&input);
        if l > 0 {
            da = da.dot(&params.trunk[l].weight);
        }
    }
    grads
}

fn check_labels(pred: &PredictionField, gt_semantic: &[usize], gt_instance: &[u32]) -> Result<()> {
    if gt_semantic.len() != pred.len() || gt_instance.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} points but {} semantic and {} instance labels",
            pred.len(),
            gt_semantic.len(),
            gt_instance.len()
        )));
    }
    if let Some(&s) = gt_semantic.iter().find(|&&s| s >= pred.num_classes()) {
        return Err(Error::Invalid(format!(
            "class index {s} out of range for {} classes",
            pred.num_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy plus the embedding loss.
pub fn total_loss(
    pred: &PredictionField,
    gt_semantic: &[usize],
    gt_instance: &[u32],
    cfg: &LossConfig,
) -> Result<f64> {
    check_labels(pred, gt_semantic, gt_instance)?;
    let partition = InstancePartition::from_ids(gt_instance);
    let ce = prediction_loss(pred.probs.view(), gt_semantic)?;
    let (emb, _) = embedding_loss_and_grad(pred.embeddings.view(), &partition, cfg)?;
    Ok(ce + emb)
}

/// Total loss on one window and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    gt_semantic: &[usize],
    gt_instance: &[u32],
    cfg: &LossConfig,
) -> Result<(f64, NetworkParams)> {
    let cache = forward_cached(params, x)?;
    let pred = &cache.output;
    check_labels(pred, gt_semantic, gt_instance)?;
    let n = pred.len() as f64;
    let ce = prediction_loss(pred.probs.view(), gt_semantic)?;
    let mut dlogits = pred.probs.clone();
    for (j, &s) in gt_semantic.iter().enumerate() {
        dlogits[[j, s]] -= 1.0;
    }
    dlogits /= n;
    let partition = InstancePartition::from_ids(gt_instance);
    let (emb, demb) = embedding_loss_and_grad(pred.embeddings.view(), &partition, cfg)?;
    let grads = backward_from_outputs(params, x, &cache, dlogits, demb);
    Ok((ce + emb, grads))
}

/// Gradient of the total loss with respect to all parameters.
pub fn backward(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    gt_semantic: &[usize],
    gt_instance: &[u32],
    cfg: &LossConfig,
) -> Result<NetworkParams> {
    loss_and_gradient(params, x, gt_semantic, gt_instance, cfg).map(|(_, g)| g)
}

/// Rectifier on/off pattern, pooled argmax rows and hinge activity for one
/// window. Two parameter vectors with equal signatures lie on the same
/// smooth piece of the loss.
pub fn activation_signature(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    gt_instance: &[u32],
    cfg: &LossConfig,
) -> Result<Vec<u64>> {
    let cache = forward_cached(params, x)?;
    let mut sig = Vec::new();
    let bits = |a: &Array2<f64>, sig: &mut Vec<u64>| sig.extend(a.iter().map(|&v| (v > 0.0) as u64));
    for a in &cache.trunk {
        bits(a, &mut sig);
    }
    for acts in [&cache.classifier, &cache.embedder] {
        for a in &acts[..acts.len() - 1] {
            bits(a, &mut sig);
        }
    }
    sig.extend(cache.argmax.iter().map(|&r| r as u64));
    let partition = InstancePartition::from_ids(gt_instance);
    let e = &cache.output.embeddings;
    let mu = partition.centroids(e.view())?;
    for (row, &k) in e.rows().into_iter().zip(partition.assignment()) {
        let dist = (&mu.row(k) - &row).mapv(|v| v * v).sum().sqrt();
        sig.push((dist > cfg.delta_v) as u64);
    }
    for a in 0..mu.nrows() {
        for b in (a + 1)..mu.nrows() {
            let dist = (&mu.row(a) - &mu.row(b)).mapv(|v| v * v).sum().sqrt();
            sig.push((dist < 2.0 * cfg.delta_d) as u64);
        }
    }
    Ok(sig)
}
