//! The four subcommands. Each reads what it needs from a [`RunConfig`] and
//! writes plain files under the configured directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use pointseg_core::network::{export_predictions, load_params, save_params, train};
use pointseg_core::parallel::map_ranges;
use pointseg_core::scene::labels::{read_labels, write_labels};
use pointseg_core::scene::ply::{read_ply, write_ply, PlyFormat};
use pointseg_core::scene::synth::generate_synthetic_scene;
use pointseg_core::{segment_scene, EvalReport, LabelRecord, PointCloud, SceneOutput, SegmentationResult};

use crate::config::RunConfig;

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Scene names (file stems) of every PLY file in `dir`, sorted.
pub fn list_scenes(dir: &Path) -> Result<Vec<String>> {
    ensure!(dir.is_dir(), "scene directory {} does not exist", dir.display());
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ply") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    ensure!(!names.is_empty(), "no .ply scenes in {}", dir.display());
    Ok(names)
}

/// Reads `<dir>/<name>.ply`, attaching `<dir>/<name>.labels` when present.
pub fn load_scene(dir: &Path, name: &str, require_labels: bool) -> Result<PointCloud> {
    let ply = dir.join(format!("{name}.ply"));
    let mut cloud = read_ply(&ply).with_context(|| format!("scene {name}"))?;
    let labels = dir.join(format!("{name}.labels"));
    if labels.exists() {
        let records = read_labels(&labels).with_context(|| format!("scene {name}"))?;
        cloud.attach_labels(&records).with_context(|| format!("scene {name}"))?;
    } else if require_labels && !cloud.is_labeled() {
        bail!("scene {name} has no labels ({} missing)", labels.display());
    }
    Ok(cloud)
}

fn scene_name(index: usize) -> String {
    format!("scene_{index:03}")
}

/// Seed of the `index`-th synthetic scene.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Writes `num_scenes` synthetic rooms: geometry to PLY, ground truth to a
/// sidecar label file. Returns the written PLY paths.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let root = &cfg.paths.data_dir;
    let mut written = Vec::new();
    for split in [TRAIN_SPLIT, TEST_SPLIT] {
        create_dir(&root.join(split))?;
    }
    for i in 0..cfg.synth.num_scenes {
        let split = if i < cfg.synth.num_train { TRAIN_SPLIT } else { TEST_SPLIT };
        let seed = scene_seed(cfg.seed, i);
        let recipe = cfg.synth.room.sample(seed).context("invalid `synth.room`")?;
        let mut cloud = generate_synthetic_scene(seed, &recipe).context("invalid `synth.room`")?;
        let records: Vec<LabelRecord> = cloud
            .points
            .iter()
            .map(|v| LabelRecord {
                semantic: v.gt_semantic.unwrap_or(0),
                instance: v.gt_instance,
            })
            .collect();
        for v in &mut cloud.points {
            v.gt_semantic = None;
            v.gt_instance = None;
        }
        let dir = root.join(split);
        let name = scene_name(i);
        let ply = dir.join(format!("{name}.ply"));
        write_ply(&ply, &cloud, PlyFormat::BinaryLittleEndian)?;
        write_labels(dir.join(format!("{name}.labels")), &records)?;
        log::info!("{}: {} points", ply.display(), cloud.len());
        written.push(ply);
    }
    Ok(written)
}

/// Trains on every scene in `train/`, saving the model and a loss log.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.paths.data_dir.join(TRAIN_SPLIT);
    let names = list_scenes(&dir)?;
    let scenes = names
        .iter()
        .map(|n| load_scene(&dir, n, true))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.paths.output_dir)?;
    if let Some(parent) = cfg.paths.model.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let report = train(&scenes, &cfg.network, &cfg.train, &cfg.loss)?;
    save_params(&cfg.paths.model, &report.params)?;
    let mut log = String::from("# epoch learning_rate mean_loss\n");
    for (e, (loss, lr)) in report.epoch_losses.iter().zip(&report.learning_rates).enumerate() {
        writeln!(log, "{} {lr:.9e} {loss:.9e}", e + 1).unwrap();
    }
    write_file(&cfg.paths.output_dir.join("train_loss.txt"), log)?;
    log::info!(
        "trained {} epochs on {} scenes; final loss {:.6}",
        cfg.train.epochs,
        scenes.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn dump_intermediate(dir: &Path, out: &SceneOutput) -> Result<()> {
    create_dir(dir)?;
    let mut windows = String::from("# origin_x origin_y origin_z unique_points indices...\n");
    for w in &out.windows {
        let idx = w.unique_indices();
        write!(windows, "{:.9e} {:.9e} {:.9e} {}", w.origin[0], w.origin[1], w.origin[2], idx.len()).unwrap();
        for j in idx {
            write!(windows, " {j}").unwrap();
        }
        windows.push('\n');
    }
    write_file(&dir.join("windows.txt"), windows)?;
    export_predictions(dir.join("network.txt"), &out.prediction)?;
    let init: String = out.initial_instances.iter().map(|i| format!("{i}\n")).collect();
    write_file(&dir.join("initial_instances.txt"), init)?;
    let mut trace = String::from("# iteration energy max_row_error max_change\n");
    for (t, e) in out.trace.energies.iter().enumerate() {
        let (r, c) = match t {
            0 => (f64::NAN, f64::NAN),
            _ => (out.trace.row_errors[t - 1], out.trace.max_changes[t - 1]),
        };
        writeln!(trace, "{t} {e:.9e} {r:.3e} {c:.3e}").unwrap();
    }
    write_file(&dir.join("crf_trace.txt"), trace)?;
    let energies: String = out.trace.energies.iter().map(|e| format!("{e:.17e}\n")).collect();
    write_file(&dir.join("energies.txt"), energies)
}

/// Segments every scene in `test/`, writing `<scene>.labels` and
/// `<scene>.summary` to the output directory.
pub fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.paths.data_dir.join(TEST_SPLIT);
    let names = list_scenes(&dir)?;
    ensure!(cfg.paths.model.is_file(), "model {} does not exist", cfg.paths.model.display());
    let params = load_params(&cfg.paths.model)?;
    if params.embedding_dim() != cfg.network.embedding_dim {
        bail!(
            "`network.embedding_dim` is {} but the model produces {}-d embeddings",
            cfg.network.embedding_dim,
            params.embedding_dim()
        );
    }
    create_dir(&cfg.paths.output_dir)?;
    let pipeline = cfg.pipeline();
    let results: Vec<Result<()>> = map_ranges(names.len(), cfg.jobs, |range| {
        range
            .map(|s| -> Result<()> {
                let name = &names[s];
                let cloud = load_scene(&dir, name, false)?;
                if params.num_classes() != cloud.num_classes() {
                    bail!(
                        "scene {name}: model predicts {} classes but the scene declares {}",
                        params.num_classes(),
                        cloud.num_classes()
                    );
                }
                let out = segment_scene(&cloud, &params, &pipeline).with_context(|| format!("scene {name}"))?;
                let base = &cfg.paths.output_dir;
                write_labels(base.join(format!("{name}.labels")), &out.result.label_records())?;
                write_file(
                    &base.join(format!("{name}.summary")),
                    out.result.format_summary(&cloud.class_names),
                )?;
                if cfg.dump_intermediate {
                    dump_intermediate(&base.join("intermediate").join(name), &out)?;
                }
                log::info!("{name}: {} instances", out.result.instances.len());
                Ok(())
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Scores the predictions in the output directory against the ground truth
/// of `test/`, writing `eval.txt` and `eval.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let dir = cfg.paths.data_dir.join(TEST_SPLIT);
    let names = list_scenes(&dir)?;
    let out = &cfg.paths.output_dir;
    let mut clouds = Vec::new();
    let mut results = Vec::new();
    for name in &names {
        let cloud = load_scene(&dir, name, true)?;
        let labels = out.join(format!("{name}.labels"));
        let summary_path = out.join(format!("{name}.summary"));
        ensure!(labels.is_file(), "missing prediction {}", labels.display());
        let records = read_labels(&labels)?;
        let summary = fs::read_to_string(&summary_path)
            .with_context(|| format!("cannot read {}", summary_path.display()))?;
        let result = SegmentationResult::from_records(&records, &summary, &cloud.class_names, &summary_path)?;
        ensure!(
            result.semantic.len() == cloud.len(),
            "scene {name}: {} predicted labels for {} points",
            result.semantic.len(),
            cloud.len()
        );
        clouds.push(cloud);
        results.push(result);
    }
    let pairs: Vec<_> = clouds.iter().zip(&results).collect();
    let report = EvalReport::evaluate(&pairs)?;
    write_file(&out.join("eval.txt"), report.to_text())?;
    write_file(&out.join("eval.json"), report.to_json())?;
    Ok(report)
}
