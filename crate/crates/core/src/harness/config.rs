use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ArchSpec, ModelKind, TrainConfig, VariantConfig};
use crate::synth::GeneratorConfig;

pub const DEFAULT_SWEEP: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];
pub const DESK_EPOCHS: usize = 50;
pub const FULL_EPOCHS: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            test_normal: 500,
            test_abnormal: 500,
        }
    }
}

impl SplitSizes {
    pub fn full() -> Self {
        SplitSizes {
            train: 3851,
            test_normal: 1000,
            test_abnormal: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Config {
    pub dims: Vec<usize>,
    /// Rows run up to `d = D + extra`.
    pub extra: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Prop1Config {
            dims: vec![4, 8, 16],
            extra: 2,
        }
    }
}

/// Settings shared by every command. Each field has a default, so a config
/// file only lists what it changes; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset directory holding `manifest.json`.
    pub dataset: PathBuf,
    pub workers: usize,
    pub generator: GeneratorConfig,
    pub splits: SplitSizes,
    pub model: ModelKind,
    pub latent_dim: usize,
    pub bottleneck_width: usize,
    pub variant: VariantConfig,
    pub train: TrainConfig,
    pub sweep: Vec<usize>,
    pub repeats: usize,
    /// Latent size of the fixed-d rows of the comparison table.
    pub compare_latent_dim: usize,
    /// Directory of a finished sweep, for `d_optimal`. Defaults to `<out>/sweep`.
    pub sweep_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub prop1: Prop1Config,
    pub mi_chains: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            dataset: PathBuf::from("runs/data"),
            workers: 1,
            generator: GeneratorConfig::default(),
            splits: SplitSizes::default(),
            model: ModelKind::Ae,
            latent_dim: 16,
            bottleneck_width: 1024,
            variant: VariantConfig::default(),
            train: TrainConfig {
                epochs: FULL_EPOCHS,
                epoch_override: Some(DESK_EPOCHS),
                ..TrainConfig::default()
            },
            sweep: DEFAULT_SWEEP.to_vec(),
            repeats: 3,
            compare_latent_dim: 16,
            sweep_dir: None,
            checkpoint: None,
            prop1: Prop1Config::default(),
            mi_chains: 100,
            eval_batch: 64,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            field: "config",
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Full-length training and the larger splits.
    pub fn full_scale(&mut self) {
        self.train.epoch_override = None;
        self.train.epochs = FULL_EPOCHS;
        self.splits = SplitSizes::full();
    }

    pub fn arch(&self, latent_dim: usize) -> ArchSpec {
        ArchSpec::new(latent_dim).with_bottleneck(self.bottleneck_width)
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.sweep_dir.clone().unwrap_or_else(|| self.out.join("sweep"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(Error::Config("sweep list is empty".into()));
        }
        if self.sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("sweep list {:?} is not strictly increasing", self.sweep)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be at least 1".into()));
        }
        self.generator.validate()?;
        self.train.validate()?;
        for &d in self.sweep.iter().chain([&self.latent_dim, &self.compare_latent_dim]) {
            self.arch(d).validate()?;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent per-cell seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
