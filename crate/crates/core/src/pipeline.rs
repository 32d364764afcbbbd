//! End-to-end segmentation of one scene.
//!
//! Windows are scanned and run through the network. Class probabilities
//! are averaged over every window that saw a point; embeddings come from
//! the first window that saw it. Mean-shift clusters each window's
//! embeddings, block merging turns window clusters into scene instances,
//! and mean-field inference refines both label fields over the whole
//! scene before instances are scored and de-duplicated.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::crf::{infer, Ablation, CrfConfig, InferenceTrace};
use crate::error::{Error, Result};
use crate::meanshift::{mean_shift, MeanShiftConfig};
use crate::merge::{block_merge, MergeConfig, SegmentationResult, WindowLabels};
use crate::network::{forward, NetworkParams, PredictionField};
use crate::parallel::map_ranges;
use crate::scene::window::{scan_windows, window_features, Window, WindowConfig};
use crate::scene::PointCloud;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub window: WindowConfig,
    pub meanshift: MeanShiftConfig,
    pub crf: CrfConfig,
    pub merge: MergeConfig,
    pub ablation: Ablation,
    pub seed: u64,
    /// Worker threads for per-window network and clustering work.
    pub jobs: usize,
}

/// Everything a run produces, including the intermediate stages.
#[derive(Debug, Clone)]
pub struct SceneOutput {
    pub result: SegmentationResult,
    pub windows: Vec<Window>,
    /// Scene-level network output fed to the CRF.
    pub prediction: PredictionField,
    /// Merged mean-shift instances before refinement.
    pub initial_instances: Vec<usize>,
    pub trace: InferenceTrace,
}

struct WindowOutput {
    /// Distinct cloud indices with the row of their first occurrence.
    points: Vec<(usize, usize)>,
    pred: PredictionField,
    clusters: Vec<usize>,
}

fn process_window(
    cloud: &PointCloud,
    params: &NetworkParams,
    window: &Window,
    ms: &MeanShiftConfig,
) -> Result<WindowOutput> {
    let pred = forward(params, window_features(cloud, window).view())?;
    let mut seen = std::collections::HashSet::new();
    let points: Vec<(usize, usize)> = window
        .vertex_indices
        .iter()
        .enumerate()
        .filter(|(_, &j)| seen.insert(j))
        .map(|(r, &j)| (j, r))
        .collect();
    let rows: Vec<usize> = points.iter().map(|&(_, r)| r).collect();
    let emb = pred.embeddings.select(ndarray::Axis(0), &rows);
    let clusters = mean_shift(emb.view(), ms)?.assignment;
    Ok(WindowOutput { points, pred, clusters })
}

pub fn segment_scene(cloud: &PointCloud, params: &NetworkParams, cfg: &PipelineConfig) -> Result<SceneOutput> {
    params.validate()?;
    if params.num_classes() != cloud.num_classes() {
        return Err(Error::Shape(format!(
            "model predicts {} classes, scene declares {}",
            params.num_classes(),
            cloud.num_classes()
        )));
    }
    let windows = scan_windows(cloud, &cfg.window, cfg.seed)?;
    let outputs: Vec<Result<WindowOutput>> = map_ranges(windows.len(), cfg.jobs, |range| {
        range
            .map(|w| process_window(cloud, params, &windows[w], &cfg.meanshift))
            .collect()
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let n = cloud.len();
    let (ns, d) = (params.num_classes(), params.embedding_dim());
    let mut probs = Array2::<f64>::zeros((n, ns));
    let mut counts = vec![0usize; n];
    let mut embeddings = Array2::<f64>::zeros((n, d));
    let mut have_embedding = vec![false; n];
    for out in &outputs {
        for &(j, r) in &out.points {
            let mut row = probs.row_mut(j);
            row += &out.pred.probs.row(r);
            counts[j] += 1;
            if !have_embedding[j] {
                embeddings.row_mut(j).assign(&out.pred.embeddings.row(r));
                have_embedding[j] = true;
            }
        }
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!("point {j} was not covered by any window")));
    }
    for (mut row, &c) in probs.rows_mut().into_iter().zip(&counts) {
        row /= c as f64;
    }
    let prediction = PredictionField { probs, embeddings };

    let window_labels: Vec<WindowLabels> = windows
        .iter()
        .zip(&outputs)
        .map(|(w, out)| WindowLabels {
            origin: w.origin,
            points: out.points.iter().map(|&(j, _)| j).collect(),
            labels: out.clusters.clone(),
        })
        .collect();
    let initial_instances = block_merge(cloud, &window_labels, &cfg.merge)?;
    let crf_cfg = CrfConfig {
        jobs: cfg.crf.jobs.max(cfg.jobs),
        ..cfg.crf.clone()
    };
    let inferred = infer(cloud, &prediction, &initial_instances, &crf_cfg, cfg.ablation)?;
    let result = SegmentationResult::from_state(&inferred.state, cfg.merge.nms_iou)?;
    Ok(SceneOutput {
        result,
        windows,
        prediction,
        initial_instances,
        trace: inferred.trace,
    })
}
