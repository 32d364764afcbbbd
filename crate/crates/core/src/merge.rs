//! Window-to-scene instance merging, instance confidence and NMS.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crf::{argmax_row, LabelState};
use crate::crf::PROB_FLOOR;
use crate::error::{Error, Result};
use crate::scene::labels::LabelRecord;
use crate::scene::{PointCloud, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub voxel_size: f64,
    pub overlap_ratio: f64,
    pub nms_iou: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            overlap_ratio: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("merge voxel size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("overlap ratio and NMS IoU must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Instance labels produced inside one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLabels {
    pub origin: Vec3,
    /// Distinct cloud indices of the window's points.
    pub points: Vec<usize>,
    /// Window-local instance label per entry of `points`.
    pub labels: Vec<usize>,
}

fn voxel_key(p: Vec3, size: f64) -> [i64; 3] {
    [
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    ]
}

/// Fuses per-window instance labels into scene instance ids.
///
/// Windows are visited in origin order. A voxel grid records which scene
/// instance first claimed each voxel. A window instance joins the scene
/// instance owning most of its voxels (ownership as it stood before this
/// window) if that instance covers at least `overlap_ratio` of its points,
/// or of the window's points lying in that instance's voxels; otherwise it
/// opens a new scene instance. Each point keeps the id from the first
/// window that labelled it. Ids are dense, numbered by first point.
pub fn block_merge(cloud: &PointCloud, windows: &[WindowLabels], cfg: &MergeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let n = cloud.len();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (windows[a].origin, windows[b].origin);
        oa[0].total_cmp(&ob[0]).then(oa[1].total_cmp(&ob[1])).then(oa[2].total_cmp(&ob[2]))
    });
    let key_of: Vec<[i64; 3]> = cloud.points.iter().map(|v| voxel_key(v.location, cfg.voxel_size)).collect();
    let mut owner: HashMap<[i64; 3], usize> = HashMap::new();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next_id = 0usize;

    for &w in &order {
        let win = &windows[w];
        if win.points.len() != win.labels.len() {
            return Err(Error::Shape(format!(
                "window {w}: {} points but {} labels",
                win.points.len(),
                win.labels.len()
            )));
        }
        if let Some(&j) = win.points.iter().find(|&&j| j >= n) {
            return Err(Error::Invalid(format!("window {w}: point index {j} out of range")));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&j, &l) in win.points.iter().zip(&win.labels) {
            groups.entry(l).or_default().push(j);
        }
        // Window points sitting in voxels owned by each scene instance.
        let mut claimed: HashMap<usize, usize> = HashMap::new();
        for &j in &win.points {
            if let Some(&x) = owner.get(&key_of[j]) {
                *claimed.entry(x).or_default() += 1;
            }
        }
        let mut assigned = Vec::with_capacity(groups.len());
        for members in groups.values() {
            let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
            for &j in members {
                if let Some(&x) = owner.get(&key_of[j]) {
                    *hits.entry(x).or_default() += 1;
                }
            }
            let best = hits
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&x, &c)| (x, c));
            let id = match best {
                Some((x, c))
                    if c as f64 >= cfg.overlap_ratio * members.len() as f64
                        || c as f64 >= cfg.overlap_ratio * claimed[&x] as f64 =>
                {
                    x
                }
                _ => {
                    next_id += 1;
                    next_id - 1
                }
            };
            assigned.push(id);
        }
        for (members, &id) in groups.values().zip(&assigned) {
            for &j in members {
                owner.entry(key_of[j]).or_insert(id);
                label[j].get_or_insert(id);
            }
        }
    }

    // Points no window labelled: voxel owner, else nearest labelled point.
    let missing: Vec<usize> = (0..n).filter(|&j| label[j].is_none()).collect();
    if !missing.is_empty() {
        log::warn!("{} points not covered by any window; borrowing labels from neighbours", missing.len());
        let labelled: Vec<usize> = (0..n).filter(|&j| label[j].is_some()).collect();
        if labelled.is_empty() {
            return Err(Error::Invalid("no window labelled any point".into()));
        }
        for j in missing {
            let id = match owner.get(&key_of[j]) {
                Some(&x) => x,
                None => {
                    let p = cloud.points[j].location;
                    let k = *labelled
                        .iter()
                        .min_by(|&&a, &&b| {
                            crate::scene::dist2(p, cloud.points[a].location)
                                .total_cmp(&crate::scene::dist2(p, cloud.points[b].location))
                        })
                        .unwrap();
                    label[k].unwrap()
                }
            };
            label[j] = Some(id);
        }
    }

    let mut dense: HashMap<usize, usize> = HashMap::new();
    Ok(label
        .into_iter()
        .map(|l| {
            let next = dense.len();
            *dense.entry(l.unwrap()).or_insert(next)
        })
        .collect())
}

/// Majority argmax class among `members`; ties go to the lower index.
pub fn majority_class(state: &LabelState, members: &[usize]) -> usize {
    let mut counts = vec![0usize; state.qs.ncols()];
    for &k in members {
        counts[argmax_row(state.qs.row(k))] += 1;
    }
    argmax_count(&counts)
}

fn argmax_count(counts: &[usize]) -> usize {
    let mut best = 0;
    for (s, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = s;
        }
    }
    best
}

/// Mean over members of `ln Q^S(class) + ln Q^I(column)`.
pub fn instance_confidence(state: &LabelState, column: usize, class: usize, members: &[usize]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Invalid(format!("confidence of empty instance column {column}")));
    }
    let total: f64 = members
        .iter()
        .map(|&k| state.qs[[k, class]].max(PROB_FLOOR).ln() + state.qi[[k, column]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / members.len() as f64)
}

/// Confidence of the instance in `column`, using its argmax members and
/// their majority class.
pub fn confidence(state: &LabelState, column: usize) -> Result<f64> {
    let members: Vec<usize> = state
        .instance_columns()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == column)
        .map(|(k, _)| k)
        .collect();
    let class = majority_class(state, &members);
    instance_confidence(state, column, class, &members)
}

/// A scored instance hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Sorted point indices.
    pub points: Vec<usize>,
    pub class: usize,
    pub confidence: f64,
}

/// `|A ∩ B| / |A ∪ B|` for sorted index lists.
pub fn point_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy suppression; returns kept candidate indices by falling confidence.
pub fn nms(candidates: &[Candidate], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].confidence.total_cmp(&candidates[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let suppressed = kept.iter().any(|&k| {
            candidates[k].class == c.class && point_iou(&candidates[k].points, &c.points) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSummary {
    pub id: u32,
    pub class: usize,
    pub size: usize,
    pub confidence: f64,
}

/// Final per-point labels and per-instance summaries of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub semantic: Vec<usize>,
    /// `None` for points whose instance was suppressed.
    pub instance: Vec<Option<u32>>,
    /// Indexed by instance id.
    pub instances: Vec<InstanceSummary>,
}

impl SegmentationResult {
    /// Scores every live instance, suppresses duplicates and numbers the
    /// survivors by falling confidence.
    pub fn from_state(state: &LabelState, nms_iou: f64) -> Result<Self> {
        let semantic = state.semantic_argmax();
        let cols = state.instance_columns();
        let mut members = vec![Vec::new(); state.num_instances()];
        for (k, &c) in cols.iter().enumerate() {
            members[c].push(k);
        }
        let mut candidates = Vec::new();
        let mut columns = Vec::new();
        for (c, m) in members.into_iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let class = majority_class(state, &m);
            let confidence = instance_confidence(state, c, class, &m)?;
            candidates.push(Candidate {
                points: m,
                class,
                confidence,
            });
            columns.push(c);
        }
        let kept = nms(&candidates, nms_iou);
        let mut instance = vec![None; semantic.len()];
        let mut instances = Vec::with_capacity(kept.len());
        for (id, &i) in kept.iter().enumerate() {
            let c = &candidates[i];
            for &k in &c.points {
                instance[k] = Some(id as u32);
            }
            instances.push(InstanceSummary {
                id: id as u32,
                class: c.class,
                size: c.points.len(),
                confidence: c.confidence,
            });
        }
        Ok(Self {
            semantic,
            instance,
            instances,
        })
    }

    pub fn label_records(&self) -> Vec<LabelRecord> {
        self.semantic
            .iter()
            .zip(&self.instance)
            .map(|(&semantic, &instance)| LabelRecord { semantic, instance })
            .collect()
    }

    /// `<id> <class_name> <size> <confidence>` per instance.
    pub fn format_summary(&self, class_names: &[String]) -> String {
        let mut s = String::new();
        for inst in &self.instances {
            let name = class_names.get(inst.class).map(String::as_str).unwrap_or("?");
            writeln!(s, "{} {} {} {:.9e}", inst.id, name, inst.size, inst.confidence).unwrap();
        }
        s
    }

    /// Rebuilds a result from label records and a summary file.
    pub fn from_records(records: &[LabelRecord], summary: &str, class_names: &[String], path: &Path) -> Result<Self> {
        let mut instances = Vec::new();
        for (lineno, line) in summary.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: &str| Error::text(path, lineno + 1, m.to_string());
            if f.len() != 4 {
                return Err(bad("expected `<id> <class_name> <size> <confidence>`"));
            }
            let id: u32 = f[0].parse().map_err(|_| bad("bad instance id"))?;
            let class = class_names
                .iter()
                .position(|c| c == f[1])
                .ok_or_else(|| bad(&format!("unknown class `{}`", f[1])))?;
            let size: usize = f[2].parse().map_err(|_| bad("bad size"))?;
            let confidence: f64 = f[3].parse().map_err(|_| bad("bad confidence"))?;
            instances.push(InstanceSummary {
                id,
                class,
                size,
                confidence,
            });
        }
        Ok(Self {
            semantic: records.iter().map(|r| r.semantic).collect(),
            instance: records.iter().map(|r| r.instance).collect(),
            instances,
        })
    }

    /// Point lists per instance id.
    pub fn instance_points(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (k, i) in self.instance.iter().enumerate() {
            if let Some(i) = i {
                out.entry(*i).or_default().push(k);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Vertex;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};

    fn line_cloud(n: usize, spacing: f64) -> PointCloud {
        PointCloud::new(
            (0..n).map(|i| Vertex::new([i as f64 * spacing, 0.0, 0.0])).collect(),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn single_window_is_identity() {
        let cloud = line_cloud(6, 0.1);
        let w = WindowLabels {
            origin: [0.0; 3],
            points: (0..6).collect(),
            labels: vec![0, 0, 1, 1, 2, 2],
        };
        assert_eq!(block_merge(&cloud, &[w], &MergeConfig::default()).unwrap(), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn overlapping_windows_join_one_object() {
        // One object of 20 points; two windows each see 15 of them with
        // 10 shared, and label their part with unrelated ids.
        let cloud = line_cloud(20, 0.1);
        let a = WindowLabels {
            origin: [0.0; 3],
            points: (0..15).collect(),
            labels: vec![3; 15],
        };
        let b = WindowLabels {
            origin: [0.5, 0.0, 0.0],
            points: (5..20).collect(),
            labels: vec![7; 15],
        };
        let ids = block_merge(&cloud, &[b, a], &MergeConfig::default()).unwrap();
        assert_eq!(ids, vec![0; 20]);
    }

    #[test]
    fn disjoint_windows_give_disjoint_ids() {
        let cloud = line_cloud(10, 0.1);
        let a = WindowLabels {
            origin: [0.0; 3],
            points: (0..5).collect(),
            labels: vec![0, 0, 0, 1, 1],
        };
        let b = WindowLabels {
            origin: [0.5, 0.0, 0.0],
            points: (5..10).collect(),
            labels: vec![0, 0, 1, 1, 1],
        };
        let ids = block_merge(&cloud, &[a, b], &MergeConfig::default()).unwrap();
        assert_eq!(ids, vec![0, 0, 0, 1, 1, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn uncovered_points_take_a_neighbour_label() {
        let cloud = line_cloud(4, 1.0);
        let w = WindowLabels {
            origin: [0.0; 3],
            points: vec![0, 1],
            labels: vec![0, 1],
        };
        assert_eq!(block_merge(&cloud, &[w], &MergeConfig::default()).unwrap(), vec![0, 1, 1, 1]);
    }

    fn state(qs: Array2<f64>, qi: Array2<f64>) -> LabelState {
        let k = qi.ncols();
        LabelState {
            qs,
            qi,
            instance_ids: (0..k).collect(),
            stats: vec![],
        }
    }

    #[test]
    fn confidence_values() {
        let s = state(array![[1.0, 0.0], [1.0, 0.0]], array![[1.0], [1.0]]);
        assert_eq!(confidence(&s, 0).unwrap(), 0.0);
        let e = (-1.0f64).exp();
        let s = state(array![[e, 1.0 - e], [e, 1.0 - e]], array![[e, 1.0 - e], [e, 1.0 - e]]);
        assert_relative_eq!(instance_confidence(&s, 0, 0, &[0, 1]).unwrap(), -2.0, max_relative = 1e-14);
        // Duplicating members leaves the mean unchanged.
        assert_relative_eq!(instance_confidence(&s, 0, 0, &[0, 1, 0, 1]).unwrap(), -2.0, max_relative = 1e-14);
        assert!(instance_confidence(&s, 0, 0, &[]).is_err());
    }

    #[test]
    fn nms_cases() {
        let c = |points: Vec<usize>, class, confidence| Candidate {
            points,
            class,
            confidence,
        };
        let disjoint = [c(vec![0, 1], 0, -1.0), c(vec![2, 3], 0, -2.0)];
        assert_eq!(nms(&disjoint, 0.5), vec![0, 1]);
        let twins = [c(vec![0, 1, 2], 0, 0.1), c(vec![0, 1, 2], 0, 0.9)];
        assert_eq!(nms(&twins, 0.5), vec![1]);
        // A and B share 6 of 10 points (IoU 0.6); C is elsewhere.
        let a = c((0..8).collect(), 1, -0.1);
        let b = c((2..10).collect(), 1, -0.5);
        assert_relative_eq!(point_iou(&a.points, &b.points), 0.6);
        let trio = [b, c(vec![20, 21], 1, -0.9), a];
        assert_eq!(nms(&trio, 0.5), vec![2, 1]);
        // Same overlap across classes is kept.
        let mixed = [c(vec![0, 1, 2], 0, 0.9), c(vec![0, 1, 2], 1, 0.1)];
        assert_eq!(nms(&mixed, 0.5), vec![0, 1]);
    }

    #[test]
    fn result_summary_round_trip() {
        let s = state(
            array![[0.9, 0.1], [0.8, 0.2], [0.3, 0.7]],
            array![[0.9, 0.1], [0.9, 0.1], [0.2, 0.8]],
        );
        let r = SegmentationResult::from_state(&s, 0.5).unwrap();
        assert_eq!(r.semantic, vec![0, 0, 1]);
        assert_eq!(r.instances.len(), 2);
        assert!(r.instances.iter().all(|i| i.confidence <= 0.0));
        let names = vec!["floor".to_string(), "chair".to_string()];
        let text = r.format_summary(&names);
        let back = SegmentationResult::from_records(&r.label_records(), &text, &names, Path::new("s")).unwrap();
        assert_eq!(back.semantic, r.semantic);
        assert_eq!(back.instance, r.instance);
        assert_eq!(back.instances.len(), 2);
        assert_eq!(back.instances[0].class, r.instances[0].class);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nms_leaves_no_same_class_overlap(
                sets in prop::collection::vec((prop::collection::btree_set(0usize..30, 1..15), 0usize..2, -5.0f64..0.0), 1..12)
            ) {
                let cands: Vec<Candidate> = sets
                    .into_iter()
                    .map(|(p, class, confidence)| Candidate { points: p.into_iter().collect(), class, confidence })
                    .collect();
                let kept = nms(&cands, 0.5);
                for (x, &a) in kept.iter().enumerate() {
                    for &b in &kept[x + 1..] {
                        if cands[a].class == cands[b].class {
                            prop_assert!(point_iou(&cands[a].points, &cands[b].points) <= 0.5);
                        }
                    }
                }
            }

            #[test]
            fn merge_partitions_points(
                labels in prop::collection::vec(0usize..4, 40),
                split in 5usize..35,
            ) {
                let cloud = line_cloud(40, 0.03);
                let a = WindowLabels { origin: [0.0; 3], points: (0..split).collect(), labels: labels[..split].to_vec() };
                let b = WindowLabels { origin: [0.5, 0.0, 0.0], points: (split / 2..40).collect(), labels: labels[split / 2..].to_vec() };
                let ids = block_merge(&cloud, &[a, b], &MergeConfig::default()).unwrap();
                prop_assert_eq!(ids.len(), 40);
                let max = *ids.iter().max().unwrap();
                for id in 0..=max {
                    prop_assert!(ids.contains(&id));
                }
            }
        }
    }
}
