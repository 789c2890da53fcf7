//! Experiment configuration: one TOML document drives the whole pipeline.
//! Unknown keys are rejected; every field has a default so a resolved echo
//! of the full configuration can be written next to each output.

use crate::data::PatternFamily;
use crate::error::{Error, Result};
use crate::hypernet::HypernetConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub family: PatternFamily,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_classes: 10,
            per_class: 64,
            channels: 1,
            height: 16,
            width: 16,
            family: PatternFamily::Gratings,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasksSection {
    pub n_way: usize,
    pub support: usize,
    pub query: usize,
    pub count: usize,
}

impl Default for TasksSection {
    fn default() -> Self {
        TasksSection { n_way: 4, support: 10, query: 30, count: 500 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// ConvNet-3 channel width; the embedding dimension equals it.
    pub width: usize,
    /// Sketch dimension m.
    pub m: usize,
    /// Flattened-kernel count in the weight generators.
    pub p: usize,
    pub p_mid: usize,
    pub eta: f64,
    pub tau: f64,
    pub tau_learnable: bool,
    /// Support samples per class used for each centroid.
    pub shots: usize,
    pub extractor_channels: [usize; 2],
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            width: 32,
            m: 64,
            p: 16,
            p_mid: 16,
            eta: 0.1,
            tau: 10.0,
            tau_learnable: false,
            shots: 10,
            extractor_channels: [16, 32],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub checkpoint_every: Option<usize>,
    pub no_context: bool,
    pub metric_only: bool,
    pub no_kl: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-3,
            batch_size: 120,
            epochs: 4,
            max_steps: None,
            clip_norm: 10.0,
            checkpoint_every: None,
            no_context: false,
            metric_only: false,
            no_kl: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub count: usize,
    pub baseline_epochs: Vec<usize>,
    pub baseline_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { count: 100, baseline_epochs: vec![1, 30], baseline_lr: 3e-3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcaSection {
    pub reps: usize,
    pub subset_size: usize,
    pub subset_classes: usize,
    pub train_epochs: usize,
    pub lr: f64,
}

impl Default for CcaSection {
    fn default() -> Self {
        CcaSection { reps: 100, subset_size: 200, subset_classes: 4, train_epochs: 10, lr: 3e-3 }
    }
}

/// The whole experiment: corpus generation through evaluation. All
/// randomness is derived from `seed`, split per module by fixed labels.
/// Random streams are ChaCha8 keyed by SplitMix64(seed ^ fnv1a(label)).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub tasks: TasksSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub cca: CcaSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.model.eta) {
            return Err(Error::Config(format!("model.eta {} outside [0, 1]", self.model.eta)));
        }
        if self.model.tau <= 0.0 {
            return Err(Error::Config(format!("model.tau {} must be positive", self.model.tau)));
        }
        if self.train.lr <= 0.0 {
            return Err(Error::Config(format!("train.lr {} must be positive", self.train.lr)));
        }
        if self.train.metric_only && self.train.no_kl {
            return Err(Error::Config(
                "train.metric_only already drops the consistency term; unset train.no_kl".into(),
            ));
        }
        if self.corpus.n_classes < 2 {
            return Err(Error::Config("corpus.n_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Fully resolved config text (all defaults filled in).
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved echo next to an output file or into an output dir.
    pub fn write_echo(&self, out: &Path) -> Result<()> {
        let echo_path = if out.is_dir() {
            out.join("config-echo.toml")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".config.toml");
            out.with_file_name(name)
        };
        std::fs::write(echo_path, self.echo())?;
        Ok(())
    }

    pub fn hypernet_config(&self) -> HypernetConfig {
        HypernetConfig {
            m: self.model.m,
            p: self.model.p,
            p_mid: self.model.p_mid,
            eta: self.model.eta,
            tau: self.model.tau,
            tau_learnable: self.model.tau_learnable,
            no_context: self.train.no_context,
            extractor_channels: self.model.extractor_channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            max_steps: self.train.max_steps,
            seed: self.seed,
            shots: self.model.shots,
            clip_norm: self.train.clip_norm,
            checkpoint_every: self.train.checkpoint_every,
            metric_only: self.train.metric_only,
            no_kl: self.train.no_kl,
        }
    }

    pub fn target_spec(&self) -> Result<crate::targetnet::TargetSpec> {
        crate::targetnet::convnet3_spec(self.corpus.channels, self.model.width, self.model.width)
    }

    pub fn cca_config(&self) -> crate::analysis::CcaConfig {
        crate::analysis::CcaConfig {
            reps: self.cca.reps,
            subset_size: self.cca.subset_size,
            subset_classes: self.cca.subset_classes,
            train_epochs: self.cca.train_epochs,
            lr: self.cca.lr,
            seed: self.seed,
        }
    }
}
