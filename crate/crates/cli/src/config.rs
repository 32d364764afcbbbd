//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pointseg_core::scene::synth::RoomRecipe;
use pointseg_core::{
    Ablation, CrfConfig, LossConfig, MeanShiftConfig, MergeConfig, NetworkConfig, PipelineConfig, TrainConfig,
    WindowConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of the scene files; holds `train/` and `test/`.
    pub data_dir: PathBuf,
    pub model: PathBuf,
    /// Predictions, logs and reports.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            model: "model.bin".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_scenes: usize,
    /// The first `num_train` scenes go to `train/`, the rest to `test/`.
    pub num_train: usize,
    pub room: RoomRecipe,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_scenes: 10,
            num_train: 8,
            room: RoomRecipe::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Source of all randomness; overrides `train.seed`.
    pub seed: u64,
    /// Scenes processed concurrently.
    pub jobs: usize,
    pub ablation: Ablation,
    pub dump_intermediate: bool,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Window layout used at inference.
    pub windows: WindowConfig,
    pub meanshift: MeanShiftConfig,
    pub crf: CrfConfig,
    pub merge: MergeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            jobs: 1,
            ablation: Ablation::Full,
            dump_intermediate: false,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig {
                windows_per_scene: Some(8),
                window: WindowConfig {
                    point_count: 256,
                    ..WindowConfig::default()
                },
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            windows: WindowConfig::default(),
            meanshift: MeanShiftConfig::default(),
            crf: CrfConfig::default(),
            merge: MergeConfig::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub ablation: Option<Ablation>,
    pub bandwidth: Option<f64>,
    pub dump_intermediate: bool,
    pub data_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.to_string().replace('\n', " ").trim().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Loads `path` when given, applies overrides and validates.
    pub fn resolve(path: Option<&Path>, over: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(over);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, over: &Overrides) {
        if let Some(s) = over.seed {
            self.seed = s;
        }
        if let Some(j) = over.jobs {
            self.jobs = j;
        }
        if let Some(a) = over.ablation {
            self.ablation = a;
        }
        if let Some(b) = over.bandwidth {
            self.meanshift.bandwidth = b;
        }
        if over.dump_intermediate {
            self.dump_intermediate = true;
        }
        if let Some(p) = &over.data_dir {
            self.paths.data_dir = p.clone();
        }
        if let Some(p) = &over.model {
            self.paths.model = p.clone();
        }
        if let Some(p) = &over.output_dir {
            self.paths.output_dir = p.clone();
        }
        if let Some(e) = over.epochs {
            self.train.epochs = e;
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, r: pointseg_core::Result<()>| r.with_context(|| format!("invalid `{k}`"));
        if self.jobs == 0 {
            bail!("invalid `jobs`: must be at least 1");
        }
        if self.synth.num_train > self.synth.num_scenes {
            bail!("invalid `synth.num_train`: exceeds `synth.num_scenes`");
        }
        key("network", self.network.validate())?;
        key("train", self.train.validate())?;
        key("loss", self.loss.validate())?;
        key("windows", self.windows.validate())?;
        if !(self.meanshift.bandwidth > 0.0 && self.meanshift.bandwidth.is_finite()) {
            bail!("invalid `meanshift.bandwidth`: must be positive");
        }
        key("crf", self.crf.validate())?;
        key("merge", self.merge.validate())?;
        Ok(())
    }

    /// Per-scene pipeline settings. Scenes run sequentially inside, so the
    /// pipeline itself is single-threaded.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            window: self.windows.clone(),
            meanshift: self.meanshift.clone(),
            crf: CrfConfig { jobs: 1, ..self.crf.clone() },
            merge: self.merge.clone(),
            ablation: self.ablation,
            seed: self.seed,
            jobs: 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn flags_win_over_file() {
        let mut cfg = RunConfig::from_toml("seed = 4\nablation = \"pairwise\"\n[meanshift]\nbandwidth = 2.0\n").unwrap();
        assert_eq!(cfg.ablation, Ablation::Pairwise);
        cfg.apply(&Overrides {
            seed: Some(9),
            bandwidth: Some(0.7),
            ..Default::default()
        });
        assert_eq!((cfg.seed, cfg.train.seed, cfg.meanshift.bandwidth), (9, 9, 0.7));
        assert_eq!(cfg.ablation, Ablation::Pairwise);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("sed = 3\n").unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");
        let err = RunConfig::from_toml("[paths]\nmodle = \"x\"\n").unwrap_err().to_string();
        assert!(err.contains("modle"), "{err}");
        for section in ["crf", "network", "train", "train.window", "loss", "windows", "meanshift", "merge", "synth.room"] {
            let err = RunConfig::from_toml(&format!("[{section}]\nbogus_key = 1\n")).unwrap_err().to_string();
            assert!(err.contains("bogus_key"), "{section}: {err}");
        }
    }

    #[test]
    fn bad_values_name_their_section() {
        let cfg = RunConfig::from_toml("[crf]\ntheta = -1.0\n").unwrap();
        let err = format!("{:#}", cfg.validate().unwrap_err());
        assert!(err.contains("crf"), "{err}");
        let cfg = RunConfig::from_toml("[synth]\nnum_scenes = 2\nnum_train = 3\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
