//! Semantic accuracy and instance average precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::merge::{point_iou, SegmentationResult};
use crate::scene::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemanticMetrics {
    /// `None` for classes without ground-truth points.
    pub per_class: Vec<Option<f64>>,
    pub micro_mean: f64,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

fn finish_semantic(correct: Vec<usize>, total: Vec<usize>) -> SemanticMetrics {
    let per_class = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let all: usize = total.iter().sum();
    let micro_mean = if all == 0 {
        0.0
    } else {
        correct.iter().sum::<usize>() as f64 / all as f64
    };
    SemanticMetrics {
        per_class,
        micro_mean,
        correct,
        total,
    }
}

pub fn semantic_metrics(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<SemanticMetrics> {
    semantic_metrics_pooled(&[(pred, gt)], num_classes)
}

/// Accuracy over several scenes, counting every point once.
pub fn semantic_metrics_pooled(scenes: &[(&[usize], &[usize])], num_classes: usize) -> Result<SemanticMetrics> {
    let mut correct = vec![0; num_classes];
    let mut total = vec![0; num_classes];
    for (pred, gt) in scenes {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predicted labels for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g >= num_classes {
                return Err(Error::Invalid(format!("ground-truth class {g} out of range")));
            }
            total[g] += 1;
            if p == g {
                correct[g] += 1;
            }
        }
    }
    Ok(finish_semantic(correct, total))
}

/// A predicted instance with its class and score.
#[derive(Debug, Clone, PartialEq)]
pub struct PredInstance {
    pub scene: usize,
    pub class: usize,
    pub confidence: f64,
    /// Sorted point indices within the scene.
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub scene: usize,
    pub class: usize,
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApMetrics {
    /// `None` for classes without ground-truth instances.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; `None` if there are none.
    pub map: Option<f64>,
}

/// Area under the precision-recall curve with the precision envelope taken
/// from the right (all-points interpolation).
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Per-class AP at the given IoU threshold and their mean.
pub fn instance_ap(preds: &[PredInstance], gts: &[GtInstance], num_classes: usize, iou_threshold: f64) -> ApMetrics {
    let mut per_class = vec![None; num_classes];
    for (class, slot) in per_class.iter_mut().enumerate() {
        let class_gts: Vec<&GtInstance> = gts.iter().filter(|g| g.class == class).collect();
        if class_gts.is_empty() {
            continue;
        }
        let mut class_preds: Vec<&PredInstance> = preds.iter().filter(|p| p.class == class).collect();
        class_preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut matched = vec![false; class_gts.len()];
        let tp: Vec<bool> = class_preds
            .iter()
            .map(|p| {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in class_gts.iter().enumerate() {
                    if matched[g] || gt.scene != p.scene {
                        continue;
                    }
                    let iou = point_iou(&p.points, &gt.points);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                match best {
                    Some((g, iou)) if iou > iou_threshold => {
                        matched[g] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        *slot = Some(average_precision(&tp, class_gts.len()));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    ApMetrics { per_class, map }
}

/// Ground-truth instances of a labelled cloud.
pub fn gt_instances(cloud: &PointCloud, scene: usize) -> Result<Vec<GtInstance>> {
    let (sem, inst) = cloud
        .gt_labels()
        .ok_or_else(|| Error::Invalid("cloud has no ground-truth labels".into()))?;
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, &i) in inst.iter().enumerate() {
        groups.entry(i).or_default().push(j);
    }
    Ok(groups
        .into_values()
        .map(|points| GtInstance {
            scene,
            class: sem[points[0]],
            points,
        })
        .collect())
}

pub fn pred_instances(result: &SegmentationResult, scene: usize) -> Vec<PredInstance> {
    let points = result.instance_points();
    result
        .instances
        .iter()
        .map(|inst| PredInstance {
            scene,
            class: inst.class,
            confidence: inst.confidence,
            points: points.get(&inst.id).cloned().unwrap_or_default(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub micro_mean_accuracy: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub map_05: Option<f64>,
    pub num_points: usize,
    pub num_scenes: usize,
}

impl EvalReport {
    /// Scores results against labelled clouds, pooling all scenes.
    pub fn evaluate(scenes: &[(&PointCloud, &SegmentationResult)]) -> Result<Self> {
        let class_names = scenes
            .first()
            .map(|(c, _)| c.class_names.clone())
            .ok_or_else(|| Error::Invalid("nothing to evaluate".into()))?;
        let ns = class_names.len();
        let mut gt_sem = Vec::new();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (i, (cloud, result)) in scenes.iter().enumerate() {
            if cloud.class_names != class_names {
                return Err(Error::Invalid(format!("scene {i} uses different class names")));
            }
            if cloud.len() != result.semantic.len() {
                return Err(Error::Shape(format!(
                    "scene {i}: {} points but {} predicted labels",
                    cloud.len(),
                    result.semantic.len()
                )));
            }
            gt_sem.push(cloud.gt_labels().ok_or_else(|| Error::Invalid(format!("scene {i} is unlabelled")))?.0);
            gts.extend(gt_instances(cloud, i)?);
            preds.extend(pred_instances(result, i));
        }
        let pairs: Vec<(&[usize], &[usize])> = scenes
            .iter()
            .zip(&gt_sem)
            .map(|((_, r), g)| (r.semantic.as_slice(), g.as_slice()))
            .collect();
        let sem = semantic_metrics_pooled(&pairs, ns)?;
        let ap = instance_ap(&preds, &gts, ns, 0.5);
        Ok(Self {
            class_names,
            per_class_accuracy: sem.per_class,
            micro_mean_accuracy: sem.micro_mean,
            per_class_ap: ap.per_class,
            map_05: ap.map,
            num_points: sem.total.iter().sum(),
            num_scenes: scenes.len(),
        })
    }

    /// `metric.class value` lines; classes without ground truth print `nan`.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        for (name, v) in self.class_names.iter().zip(&self.per_class_accuracy) {
            writeln!(s, "accuracy.{name} {}", fmt(*v)).unwrap();
        }
        writeln!(s, "accuracy.micro_mean {:.6}", self.micro_mean_accuracy).unwrap();
        for (name, v) in self.class_names.iter().zip(&self.per_class_ap) {
            writeln!(s, "ap50.{name} {}", fmt(*v)).unwrap();
        }
        writeln!(s, "ap50.mean {}", fmt(self.map_05)).unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
