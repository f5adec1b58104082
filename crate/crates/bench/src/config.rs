//! Run configuration: a TOML file, overridden by flags (or their
//! `SPARSIFINER_*` environment variables).

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Deserialize;
use sparsifiner_core::{FlopAccounting, Model, ModelConfig};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_KEEP_RATES: [f64; 11] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Dense,
    Sparsifiner,
    Linformer,
    All,
}

impl ModeArg {
    pub fn name(self) -> &'static str {
        match self {
            ModeArg::Dense => "dense",
            ModeArg::Sparsifiner => "sparsifiner",
            ModeArg::Linformer => "linformer",
            ModeArg::All => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccountingArg {
    Uniform,
    DenseClsRow,
}

impl From<AccountingArg> for FlopAccounting {
    fn from(a: AccountingArg) -> Self {
        match a {
            AccountingArg::Uniform => FlopAccounting::Uniform,
            AccountingArg::DenseClsRow => FlopAccounting::DenseClsRow,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    DeitSmall,
}

/// `[model]` table. Unset fields fall back to the preset.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: Option<Preset>,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub n_classes: Option<usize>,
    pub budget: Option<usize>,
    pub linformer_rank: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub images: Option<usize>,
    pub accounting: Option<AccountingArg>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub images: Option<usize>,
    pub prune_threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceSection {
    pub models: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub keep_rates: Option<Vec<f64>>,
    pub n_down: Option<usize>,
    pub tau: Option<f64>,
    pub mode: Option<ModeArg>,
    pub out_dir: Option<PathBuf>,
    /// Weight file; when absent a synthetic model is generated from `[model]`.
    pub model_path: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub equivalence: EquivalenceSection,
}

impl FileConfig {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Values given on the command line; each beats the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub keep_rates: Option<Vec<f64>>,
    pub n_down: Option<usize>,
    pub tau: Option<f64>,
    pub mode: Option<ModeArg>,
    pub out_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    Synthetic(ModelConfig),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub images: usize,
    pub prune_threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub keep_rates: Vec<f64>,
    pub n_down: Option<usize>,
    pub tau: Option<f64>,
    pub mode: Option<ModeArg>,
    pub out_dir: PathBuf,
    pub model: ModelSource,
    pub sweep_images: usize,
    pub accounting: FlopAccounting,
    pub train: TrainSettings,
    pub equivalence_models: usize,
}

fn synthetic_config(spec: &ModelSpec) -> ModelConfig {
    let mut c = match spec.preset.unwrap_or(Preset::Tiny) {
        Preset::Tiny => ModelConfig::tiny(),
        Preset::DeitSmall => ModelConfig::deit_small(),
    };
    macro_rules! take {
        ($($f:ident),*) => { $( if let Some(v) = spec.$f { c.$f = v; } )* };
    }
    take!(image_size, patch_size, d_model, n_heads, n_layers, mlp_ratio, n_classes);
    if spec.linformer_rank.is_some() {
        c.linformer_rank = spec.linformer_rank;
    }
    // the default budget keeps every token
    c.predictor.budget = spec.budget.unwrap_or_else(|| c.n_tokens());
    c
}

impl RunConfig {
    pub fn resolve(file: FileConfig, over: Overrides) -> CliResult<Self> {
        let keep_rates = over
            .keep_rates
            .or(file.keep_rates)
            .unwrap_or_else(|| DEFAULT_KEEP_RATES.to_vec());
        if keep_rates.is_empty() {
            return Err(CliError::Usage("keep_rates must not be empty".into()));
        }
        if let Some(k) = keep_rates.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
            return Err(CliError::Usage(format!("keep rate {k} is outside (0, 1]")));
        }
        let tau = over.tau.or(file.tau);
        if let Some(t) = tau {
            if !(t.is_finite() && t >= 0.0) {
                return Err(CliError::Usage(format!("tau must be finite and >= 0, got {t}")));
            }
        }
        let n_down = over.n_down.or(file.n_down);
        if n_down == Some(0) {
            return Err(CliError::Usage("n_down must be at least 1".into()));
        }

        let model = match over.model_path.or(file.model_path) {
            Some(p) => ModelSource::File(p),
            None => {
                let mut c = synthetic_config(&file.model);
                if let Some(nd) = n_down {
                    c.predictor.n_down = nd;
                }
                if let Some(t) = tau {
                    c.predictor.tau = t;
                }
                c.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
                ModelSource::Synthetic(c)
            }
        };

        let t = file.train;
        let train = TrainSettings {
            steps: t.steps.unwrap_or(50),
            lr: t.lr.unwrap_or(1e-2),
            weight_decay: t.weight_decay.unwrap_or(0.05),
            images: t.images.unwrap_or(2),
            prune_threshold: t.prune_threshold.unwrap_or(sparsifiner_core::distill::WUP_PRUNE_THRESHOLD),
        };
        if !(train.lr.is_finite() && train.lr >= 0.0) || !(train.weight_decay.is_finite() && train.weight_decay >= 0.0) {
            return Err(CliError::Usage("train.lr and train.weight_decay must be finite and >= 0".into()));
        }
        if train.images == 0 {
            return Err(CliError::Usage("train.images must be at least 1".into()));
        }
        let equivalence_models = file.equivalence.models.unwrap_or(20);
        if equivalence_models == 0 {
            return Err(CliError::Usage("equivalence.models must be at least 1".into()));
        }

        Ok(Self {
            seed: over.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            keep_rates,
            n_down,
            tau,
            mode: over.mode.or(file.mode),
            out_dir: over
                .out_dir
                .or(file.out_dir)
                .unwrap_or_else(|| PathBuf::from("sparsifiner-out")),
            model,
            sweep_images: file.sweep.images.unwrap_or(2),
            accounting: file.sweep.accounting.map(Into::into).unwrap_or_default(),
            train,
            equivalence_models,
        })
    }

    /// The mode to run, checked against what the command supports.
    pub fn mode_for(&self, command: &str, allowed: &[ModeArg], default: ModeArg) -> CliResult<ModeArg> {
        let m = self.mode.unwrap_or(default);
        if allowed.contains(&m) {
            return Ok(m);
        }
        let names: Vec<_> = allowed.iter().map(|a| a.name()).collect();
        Err(CliError::Usage(format!(
            "`{command}` does not accept --mode {}; expected one of {}",
            m.name(),
            names.join(", ")
        )))
    }

    /// Builds or loads the model with `n_down` and `tau` applied.
    pub fn model_with_seed(&self, seed: u64) -> CliResult<Model> {
        match &self.model {
            ModelSource::Synthetic(c) => Ok(Model::random(c.clone(), seed)?),
            ModelSource::File(p) => {
                let mut m = Model::load(p)?;
                if let Some(nd) = self.n_down {
                    if nd != m.config.predictor.n_down {
                        return Err(CliError::Usage(format!(
                            "--n-down {nd} conflicts with the loaded model's n_down {}",
                            m.config.predictor.n_down
                        )));
                    }
                }
                if let Some(t) = self.tau {
                    m = m.with_tau(t)?;
                }
                Ok(m)
            }
        }
    }

    pub fn model(&self) -> CliResult<Model> {
        self.model_with_seed(self.seed)
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        match &self.model {
            ModelSource::Synthetic(c) => Ok(c.clone()),
            ModelSource::File(_) => Ok(self.model()?.config),
        }
    }
}
