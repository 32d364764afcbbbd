//! Parallel mean-field updates in the log domain.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;

use super::energy::check_inputs;
use super::potentials::{counterfactual_m, score_kernel, unary_from_stats, Appearance, InstanceStats, PROB_FLOOR};
use super::{argmax_row, energy, Ablation, CrfConfig, JointLabeling, LabelState, MessagePassing};
use crate::error::{Error, Result};
use crate::network::PredictionField;
use crate::parallel::map_ranges;
use crate::scene::PointCloud;

/// Mass kept on the initial cluster when seeding `Q^I`.
const INIT_CONFIDENCE: f64 = 0.9;

#[derive(Debug, Clone, Default)]
pub struct InferenceTrace {
    /// Energy of the argmax labeling: initial state first, then one entry
    /// per completed iteration.
    pub energies: Vec<f64>,
    /// Largest row-sum deviation from 1 after each iteration.
    pub row_errors: Vec<f64>,
    /// Largest absolute change of any `Q` entry per iteration.
    pub max_changes: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub labeling: JointLabeling,
    pub state: LabelState,
    pub trace: InferenceTrace,
}

/// Renormalizes rows that are already close to distributions.
fn normalize_rows(q: &mut Array2<f64>) -> Result<()> {
    for (j, mut row) in q.rows_mut().into_iter().enumerate() {
        let s = row.sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Numeric(format!("row {j} cannot be normalized (sum {s})")));
        }
        row /= s;
    }
    Ok(())
}

/// Drops instance columns without argmax members and recomputes statistics.
fn refresh(
    qs: Array2<f64>,
    qi: Array2<f64>,
    ids: Vec<usize>,
    pred: &PredictionField,
    cfg: &CrfConfig,
) -> Result<LabelState> {
    let sem: Vec<usize> = qs.rows().into_iter().map(argmax_row).collect();
    let cols: Vec<usize> = qi.rows().into_iter().map(argmax_row).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
    for (j, &c) in cols.iter().enumerate() {
        members[c].push(j);
    }
    let live: Vec<usize> = (0..ids.len()).filter(|&c| !members[c].is_empty()).collect();
    let (qi, ids) = if live.len() == ids.len() {
        (qi, ids)
    } else {
        let mut q = qi.select(ndarray::Axis(1), &live);
        normalize_rows(&mut q)?;
        (q, live.iter().map(|&c| ids[c]).collect())
    };
    let stats = live
        .iter()
        .map(|&c| InstanceStats::from_members(pred.embeddings.view(), &members[c], &sem, pred.num_classes(), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelState {
        qs,
        qi,
        instance_ids: ids,
        stats,
    })
}

impl LabelState {
    /// `Q^S` from the network probabilities and `Q^I` from a hard initial
    /// assignment, smoothed to 0.9 on the assigned instance.
    pub fn initialize(pred: &PredictionField, init: &[usize], cfg: &CrfConfig) -> Result<Self> {
        if init.len() != pred.len() {
            return Err(Error::Shape(format!(
                "initial assignment has {} entries for {} points",
                init.len(),
                pred.len()
            )));
        }
        let ids: Vec<usize> = init.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let col: HashMap<usize, usize> = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        let k = ids.len();
        let mut qi = Array2::zeros((init.len(), k));
        if k == 1 {
            qi.fill(1.0);
        } else {
            qi.fill((1.0 - INIT_CONFIDENCE) / (k - 1) as f64);
            for (j, id) in init.iter().enumerate() {
                qi[[j, col[id]]] = INIT_CONFIDENCE;
            }
        }
        let mut qs = pred.probs.clone();
        normalize_rows(&mut qs)?;
        refresh(qs, qi, ids, pred, cfg)
    }
}

/// Precomputed per-scene data shared by all iterations.
struct Context<'a> {
    pred: &'a PredictionField,
    app: Appearance,
    cfg: &'a CrfConfig,
    ablation: Ablation,
    /// Class-major probabilities, `prob_cols[s][k]`.
    prob_cols: Vec<Vec<f64>>,
    /// Voxel of every point for the downsampled path.
    voxels: Option<VoxelGrid>,
}

struct VoxelGrid {
    cell_of: Vec<usize>,
    coords: Vec<[i64; 3]>,
    index: HashMap<[i64; 3], usize>,
}

impl VoxelGrid {
    fn build(app: &Appearance, side: f64) -> Self {
        let mut index = HashMap::new();
        let mut coords = Vec::new();
        let cell_of = app
            .loc
            .iter()
            .map(|l| {
                let key = [
                    (l[0] / side).floor() as i64,
                    (l[1] / side).floor() as i64,
                    (l[2] / side).floor() as i64,
                ];
                *index.entry(key).or_insert_with(|| {
                    coords.push(key);
                    coords.len() - 1
                })
            })
            .collect();
        Self { cell_of, coords, index }
    }
}

impl<'a> Context<'a> {
    fn new(cloud: &PointCloud, pred: &'a PredictionField, cfg: &'a CrfConfig, ablation: Ablation) -> Self {
        let app = Appearance::of(cloud);
        let prob_cols = (0..pred.num_classes()).map(|s| pred.probs.column(s).to_vec()).collect();
        let voxels = match cfg.message_passing {
            MessagePassing::Dense => None,
            MessagePassing::Downsampled { .. } => Some(VoxelGrid::build(&app, cfg.lambda1)),
        };
        Self {
            pred,
            app,
            cfg,
            ablation,
            prob_cols,
            voxels,
        }
    }

    fn n(&self) -> usize {
        self.pred.len()
    }
}

/// `sum_{k != j} sum_{s'} Q_k(s') w(s, s') G(p_j(s), p_k(s'))` for every `s`.
fn semantic_messages_dense(ctx: &Context, qs_cols: &[Vec<f64>], j: usize, out: &mut [f64]) {
    let ns = out.len();
    let theta = ctx.cfg.theta;
    let c = 1.0 / (2.0 * theta * theta);
    for (s, o) in out.iter_mut().enumerate() {
        let pj = ctx.prob_cols[s][j];
        let mut msg = 0.0;
        for sp in 0..ns {
            let pk = &ctx.prob_cols[sp];
            let qk = &qs_cols[sp];
            let mut acc = 0.0;
            for k in 0..pk.len() {
                let d = pj - pk[k];
                acc += qk[k] * (-d * d * c).exp();
            }
            acc -= qk[j] * score_kernel(pj, pk[j], theta);
            msg += if s == sp { -acc } else { acc };
        }
        *o = msg;
    }
}

/// Class scores binned on `[0, 1]`: per class, bin mass and mass-weighted
/// mean score.
struct ScoreBins {
    mass: Vec<Vec<f64>>,
    mean: Vec<Vec<f64>>,
}

fn score_bins(ctx: &Context, qs_cols: &[Vec<f64>]) -> ScoreBins {
    let nb = (4.0 / ctx.cfg.theta).ceil() as usize + 1;
    let ns = qs_cols.len();
    let mut mass = vec![vec![0.0; nb]; ns];
    let mut mean = vec![vec![0.0; nb]; ns];
    for s in 0..ns {
        for (k, &p) in ctx.prob_cols[s].iter().enumerate() {
            let b = ((p.clamp(0.0, 1.0) * (nb - 1) as f64).round()) as usize;
            mass[s][b] += qs_cols[s][k];
            mean[s][b] += qs_cols[s][k] * p;
        }
        for b in 0..nb {
            if mass[s][b] > 0.0 {
                mean[s][b] /= mass[s][b];
            }
        }
    }
    ScoreBins { mass, mean }
}

fn semantic_messages_binned(ctx: &Context, qs_cols: &[Vec<f64>], bins: &ScoreBins, j: usize, out: &mut [f64]) {
    let theta = ctx.cfg.theta;
    let ns = out.len();
    for (s, o) in out.iter_mut().enumerate() {
        let pj = ctx.prob_cols[s][j];
        let mut msg = 0.0;
        for sp in 0..ns {
            let mut acc = 0.0;
            for (m, mu) in bins.mass[sp].iter().zip(&bins.mean[sp]) {
                if *m > 0.0 {
                    acc += m * score_kernel(pj, *mu, theta);
                }
            }
            acc -= qs_cols[sp][j] * score_kernel(pj, ctx.prob_cols[sp][j], theta);
            msg += if s == sp { -acc } else { acc };
        }
        *o = msg;
    }
}

/// `sum_{k != j} K_jk (1 - 2 Q_k(i))` for every instance column `i`.
fn instance_messages_dense(ctx: &Context, qi: &Array2<f64>, j: usize, out: &mut [f64]) {
    let kk = out.len();
    let mut acc = vec![0.0; kk];
    let mut total = 0.0;
    let q = qi.as_slice().expect("standard layout");
    for k in 0..ctx.n() {
        if k == j {
            continue;
        }
        let w = ctx.app.kernel(j, k, ctx.cfg);
        if w == 0.0 {
            continue;
        }
        total += w;
        let row = &q[k * kk..(k + 1) * kk];
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += w * v;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = total - 2.0 * a;
    }
}

/// Per-voxel aggregates: point count, mean appearance and summed `Q^I`.
struct VoxelAgg {
    count: Vec<f64>,
    loc: Vec<[f64; 3]>,
    normal: Vec<[f64; 3]>,
    color: Vec<[f64; 3]>,
    q: Array2<f64>,
}

fn voxel_aggregate(ctx: &Context, grid: &VoxelGrid, qi: &Array2<f64>) -> VoxelAgg {
    let nv = grid.coords.len();
    let mut agg = VoxelAgg {
        count: vec![0.0; nv],
        loc: vec![[0.0; 3]; nv],
        normal: vec![[0.0; 3]; nv],
        color: vec![[0.0; 3]; nv],
        q: Array2::zeros((nv, qi.ncols())),
    };
    for (k, &v) in grid.cell_of.iter().enumerate() {
        agg.count[v] += 1.0;
        for a in 0..3 {
            agg.loc[v][a] += ctx.app.loc[k][a];
            agg.normal[v][a] += ctx.app.normal[k][a];
            agg.color[v][a] += ctx.app.color[k][a];
        }
        let mut row = agg.q.row_mut(v);
        row += &qi.row(k);
    }
    for v in 0..nv {
        let c = agg.count[v];
        for a in 0..3 {
            agg.loc[v][a] /= c;
            agg.normal[v][a] /= c;
            agg.color[v][a] /= c;
        }
    }
    agg
}

fn instance_messages_voxel(ctx: &Context, grid: &VoxelGrid, agg: &VoxelAgg, qi: &Array2<f64>, j: usize, out: &mut [f64]) {
    let truncate = match ctx.cfg.message_passing {
        MessagePassing::Downsampled { truncate } => truncate,
        MessagePassing::Dense => unreachable!(),
    };
    let r = truncate.ceil() as i64;
    let own = grid.coords[grid.cell_of[j]];
    let me = (&ctx.app.loc[j], &ctx.app.normal[j], &ctx.app.color[j]);
    let kernel_to = |v: usize| {
        super::potentials::appearance_kernel(me, (&agg.loc[v], &agg.normal[v], &agg.color[v]), ctx.cfg)
    };
    let mut total = 0.0;
    let mut acc = vec![0.0; out.len()];
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                let key = [own[0] + dx, own[1] + dy, own[2] + dz];
                let Some(&v) = grid.index.get(&key) else { continue };
                let w = kernel_to(v);
                total += w * agg.count[v];
                for (a, q) in acc.iter_mut().zip(agg.q.row(v)) {
                    *a += w * q;
                }
            }
        }
    }
    // Remove this point's own contribution, at the same kernel value it was
    // counted with.
    let w = kernel_to(grid.cell_of[j]);
    total -= w;
    for (a, q) in acc.iter_mut().zip(qi.row(j)) {
        *a -= w * q;
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = total - 2.0 * a;
    }
}

/// In-place softmax of `logits`; errors if nothing survives.
fn normalize_logits(logits: &mut [f64], j: usize) -> Result<()> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numeric(format!("point {j}: non-finite mean-field logits")));
    }
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::Numeric(format!("point {j}: mean-field row has zero mass")));
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

fn step(ctx: &Context, state: &LabelState) -> Result<LabelState> {
    let n = ctx.n();
    let ns = ctx.pred.num_classes();
    let kk = state.num_instances();
    let sem = state.semantic_argmax();
    let cols = state.instance_columns();
    let pair = ctx.ablation.uses_pairwise();
    let consistency = ctx.ablation.uses_consistency();
    let weight = ctx.cfg.semantic_pair_weight(n);

    let qs_cols: Vec<Vec<f64>> = (0..ns).map(|s| state.qs.column(s).to_vec()).collect();
    let qi = state.qi.as_standard_layout().into_owned();
    let bins = match (pair, &ctx.voxels) {
        (true, Some(_)) => Some(score_bins(ctx, &qs_cols)),
        _ => None,
    };
    let agg = match (pair, &ctx.voxels) {
        (true, Some(grid)) => Some(voxel_aggregate(ctx, grid, &qi)),
        _ => None,
    };

    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = map_ranges(n, ctx.cfg.jobs, |range| {
        let mut msg_s = vec![0.0; ns];
        let mut msg_i = vec![0.0; kk];
        range
            .map(|j| {
                let mut ls: Vec<f64> = (0..ns).map(|s| ctx.pred.probs[[j, s]].max(PROB_FLOOR).ln()).collect();
                let mut li: Vec<f64> = state
                    .stats
                    .iter()
                    .map(|st| -unary_from_stats(st, ctx.pred.embeddings.row(j)))
                    .collect();
                if pair {
                    match (&bins, &agg, &ctx.voxels) {
                        (Some(b), Some(a), Some(grid)) => {
                            semantic_messages_binned(ctx, &qs_cols, b, j, &mut msg_s);
                            instance_messages_voxel(ctx, grid, a, &qi, j, &mut msg_i);
                        }
                        _ => {
                            semantic_messages_dense(ctx, &qs_cols, j, &mut msg_s);
                            instance_messages_dense(ctx, &qi, j, &mut msg_i);
                        }
                    }
                    for (l, m) in ls.iter_mut().zip(&msg_s) {
                        *l -= weight * m;
                    }
                    for (l, m) in li.iter_mut().zip(&msg_i) {
                        *l -= m;
                    }
                }
                if consistency {
                    // Energy share of the consistency term is minus m_j, so
                    // the update adds m_j.
                    let st = &state.stats[cols[j]];
                    for (s, l) in ls.iter_mut().enumerate() {
                        *l += counterfactual_m(&st.counts, st.size, Some(sem[j]), s);
                    }
                    for (i, l) in li.iter_mut().enumerate() {
                        let st = &state.stats[i];
                        *l += if i == cols[j] {
                            counterfactual_m(&st.counts, st.size, None, usize::MAX)
                        } else {
                            counterfactual_m(&st.counts, st.size + 1, None, sem[j])
                        };
                    }
                }
                normalize_logits(&mut ls, j)?;
                normalize_logits(&mut li, j)?;
                Ok((ls, li))
            })
            .collect()
    });
    let mut qs_new = Array2::zeros((n, ns));
    let mut qi_new = Array2::zeros((n, kk));
    for (j, r) in rows.into_iter().enumerate() {
        let (ls, li) = r?;
        qs_new.row_mut(j).assign(&ndarray::ArrayView1::from(&ls));
        qi_new.row_mut(j).assign(&ndarray::ArrayView1::from(&li));
    }
    refresh(qs_new, qi_new, state.instance_ids.clone(), ctx.pred, ctx.cfg)
}

/// One parallel update of both distributions from `state`, followed by
/// recomputing instance statistics and dropping empty instances.
pub fn mean_field_step(
    state: &LabelState,
    cloud: &PointCloud,
    pred: &PredictionField,
    cfg: &CrfConfig,
    ablation: Ablation,
) -> Result<LabelState> {
    cfg.validate()?;
    check_inputs(cloud, pred)?;
    if state.qs.nrows() != pred.len() || state.qi.nrows() != pred.len() {
        return Err(Error::Shape("label state does not match the cloud".into()));
    }
    step(&Context::new(cloud, pred, cfg, ablation), state)
}

fn max_change(old: &LabelState, new: &LabelState) -> f64 {
    let mut m = (&old.qs - &new.qs).iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let new_col: HashMap<usize, usize> = new.instance_ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
    for (c, id) in old.instance_ids.iter().enumerate() {
        let old_col = old.qi.column(c);
        match new_col.get(id) {
            Some(&nc) => {
                for (a, b) in old_col.iter().zip(new.qi.column(nc)) {
                    m = m.max((a - b).abs());
                }
            }
            None => m = m.max(old_col.fold(0.0, |a, &b| a.max(b))),
        }
    }
    m
}

/// Mean-field inference from a hard initial instance assignment.
pub fn infer(
    cloud: &PointCloud,
    pred: &PredictionField,
    init: &[usize],
    cfg: &CrfConfig,
    ablation: Ablation,
) -> Result<InferenceOutput> {
    cfg.validate()?;
    check_inputs(cloud, pred)?;
    if pred.is_empty() {
        return Err(Error::Invalid("inference on an empty cloud".into()));
    }
    let mut state = LabelState::initialize(pred, init, cfg)?;
    let mut trace = InferenceTrace::default();
    trace.energies.push(energy(cloud, pred, &state.labeling(), cfg)?);
    if ablation != Ablation::None {
        let ctx = Context::new(cloud, pred, cfg, ablation);
        for it in 0..cfg.mf_iters {
            let next = step(&ctx, &state)?;
            let change = max_change(&state, &next);
            state = next;
            trace.row_errors.push(state.max_row_error());
            trace.max_changes.push(change);
            trace.energies.push(energy(cloud, pred, &state.labeling(), cfg)?);
            log::debug!(
                "mean-field iteration {}: change {change:.2e}, {} instances",
                it + 1,
                state.num_instances()
            );
            if change < cfg.mf_tol {
                trace.converged = true;
                break;
            }
        }
    }
    Ok(InferenceOutput {
        labeling: state.labeling(),
        state,
        trace,
    })
}
