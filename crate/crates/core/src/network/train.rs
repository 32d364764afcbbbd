//! Minibatch SGD with momentum and a step learning-rate schedule.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradient, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::scene::window::{scan_windows, window_features, WindowConfig};
use crate::scene::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// Windows per gradient step.
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Random subset of windows drawn from each scene per epoch; all when unset.
    pub windows_per_scene: Option<usize>,
    /// Window layout used for training; inference may use a different count.
    pub window: WindowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            decay: 0.5,
            decay_every: 50,
            epochs: 100,
            batch_size: 8,
            momentum: 0.9,
            seed: 0,
            windows_per_scene: None,
            window: WindowConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("learning-rate decay must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay interval and batch size must be positive".into()));
        }
        if self.windows_per_scene == Some(0) {
            return Err(Error::Config("windows_per_scene must be positive".into()));
        }
        self.window.validate()
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = epoch.saturating_sub(1) / self.decay_every;
        self.learning_rate * self.decay.powi(steps as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: NetworkParams,
    /// Mean window loss per epoch, measured before each step's update.
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

struct Sample {
    scene: usize,
    features: Array2<f64>,
    semantic: Vec<usize>,
    instance: Vec<u32>,
}

fn collect_samples(scenes: &[PointCloud], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        if scene.is_empty() {
            continue;
        }
        if let Some(j) = scene
            .points
            .iter()
            .position(|v| v.gt_semantic.is_none() || v.gt_instance.is_none())
        {
            return Err(Error::Invalid(format!("training scene {si}: vertex {j} is unlabeled")));
        }
        let windows = scan_windows(scene, &cfg.window, cfg.seed.wrapping_add(si as u64))?;
        for w in &windows {
            samples.push(Sample {
                scene: si,
                features: window_features(scene, w),
                semantic: w.vertex_indices.iter().map(|&j| scene.points[j].gt_semantic.unwrap()).collect(),
                instance: w.vertex_indices.iter().map(|&j| scene.points[j].gt_instance.unwrap()).collect(),
            });
        }
    }
    Ok(samples)
}

pub fn train(
    scenes: &[PointCloud],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let num_classes = scenes
        .iter()
        .find(|s| !s.is_empty())
        .map(|s| s.num_classes())
        .ok_or_else(|| Error::Invalid("no labeled points to train on".into()))?;
    if scenes.iter().any(|s| s.class_names != scenes[0].class_names) {
        return Err(Error::Invalid("training scenes disagree on class names".into()));
    }
    let samples = collect_samples(scenes, cfg)?;
    if samples.is_empty() {
        return Err(Error::Invalid("no labeled points to train on".into()));
    }
    let mut params = NetworkParams::init(net_cfg, num_classes, cfg.seed)?;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut by_scene: Vec<Vec<usize>> = vec![Vec::new(); scenes.len()];
    for (i, s) in samples.iter().enumerate() {
        by_scene[s.scene].push(i);
    }

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut learning_rates = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = Vec::new();
        for ids in &by_scene {
            let mut ids = ids.clone();
            ids.shuffle(&mut rng);
            if let Some(k) = cfg.windows_per_scene {
                ids.truncate(k);
            }
            order.extend(ids);
        }
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = params.zeros_like();
            for &i in batch {
                let s = &samples[i];
                let (loss, g) =
                    loss_and_gradient(&params, s.features.view(), &s.semantic, &s.instance, loss_cfg)?;
                loss_sum += loss;
                grad.scaled_add(1.0 / batch.len() as f64, &g);
            }
            velocity.scale(cfg.momentum);
            velocity.scaled_add(1.0, &grad);
            params.scaled_add(-lr, &velocity);
        }
        let mean = loss_sum / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: lr {lr:.5} loss {mean:.5}");
        epoch_losses.push(mean);
        learning_rates.push(lr);
    }
    Ok(TrainReport {
        params,
        epoch_losses,
        learning_rates,
    })
}
