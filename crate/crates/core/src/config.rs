//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataFormat;
use crate::dist::DistKind;
use crate::error::{Error, Result};
use crate::models::Arch;
use crate::nn::BnMode;
use crate::noise::ActMethod;
use crate::qmodel::WeightQuantizer;
use crate::sched::TrainSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Train a float model first, then quantize it gradually.
    #[default]
    Finetune,
    /// Run the gradual schedule directly from random initialization.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub bits_w: u32,
    pub bits_a: u32,
    /// Number of stages; 0 means one per conv/dense layer.
    pub stages: usize,
    pub epochs_per_stage: usize,
    pub restarts: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub noisy_lr_mult: f64,
    pub quantizer: String,
    pub dist: String,
    pub act_quantizer: String,
    pub arch: String,
    /// Dataset directory; relative paths resolve against `UNIQ_DATA_DIR`.
    pub dataset: PathBuf,
    pub format: String,
    pub regime: Regime,
    pub batch_size: usize,
    pub max_batches: Option<usize>,
    /// Full-precision epochs before quantization (fine-tune regime only).
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    /// Start the fine-tune regime from this container instead of training a baseline.
    pub pretrained: Option<PathBuf>,
    pub freeze_future: bool,
    /// Keep batch-norm layers in batch-statistics mode while training.
    pub bn_batch_stats: bool,
    pub calib_samples: usize,
    pub eval_samples: Option<usize>,
    pub train_samples: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            bits_w: 4,
            bits_a: 8,
            stages: 0,
            epochs_per_stage: 1,
            restarts: 2,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            noisy_lr_mult: 1.0,
            quantizer: "kquantile".into(),
            dist: "gaussian".into(),
            act_quantizer: "kquantile".into(),
            arch: "lenet-ish".into(),
            dataset: PathBuf::from("mnist"),
            format: "mnist_idx".into(),
            regime: Regime::Finetune,
            batch_size: 64,
            max_batches: None,
            baseline_epochs: 3,
            baseline_lr: 0.02,
            pretrained: None,
            freeze_future: false,
            bn_batch_stats: false,
            calib_samples: 2000,
            eval_samples: None,
            train_samples: None,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            field,
            format!("must be a positive finite number, got {v}"),
        ))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be >= {min}, got {v}")))
    }
}

fn bits(field: &str, v: u32) -> Result<()> {
    if (1..=8).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must lie in 1..=8, got {v}")))
    }
}

fn renamed<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Invalid { reason, .. } => Error::invalid(field, reason),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::invalid("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field; the error names the first offending one.
    pub fn validate(&self) -> Result<()> {
        bits("bits_w", self.bits_w)?;
        bits("bits_a", self.bits_a)?;
        at_least("epochs_per_stage", self.epochs_per_stage, 1)?;
        at_least("restarts", self.restarts, 1)?;
        positive("lr", self.lr)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            ));
        }
        positive("noisy_lr_mult", self.noisy_lr_mult)?;
        self.weight_quantizer()?;
        self.dist_kind()?;
        self.act_method()?;
        let arch = self.architecture()?;
        self.data_format()?;
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::invalid("dataset", "must not be empty"));
        }
        at_least("batch_size", self.batch_size, 1)?;
        if let Some(m) = self.max_batches {
            at_least("max_batches", m, 1)?;
        }
        positive("baseline_lr", self.baseline_lr)?;
        at_least("calib_samples", self.calib_samples, 1)?;
        if let Some(n) = self.eval_samples {
            at_least("eval_samples", n, 1)?;
        }
        if let Some(n) = self.train_samples {
            at_least("train_samples", n, 1)?;
        }
        let layers = arch.mac_layers();
        if self.stages > layers {
            return Err(Error::invalid(
                "stages",
                format!(
                    "{} has {layers} conv/dense layers, got {} stages",
                    arch.name(),
                    self.stages
                ),
            ));
        }
        Ok(())
    }

    pub fn weight_quantizer(&self) -> Result<WeightQuantizer> {
        renamed("quantizer", WeightQuantizer::from_name(&self.quantizer))
    }

    pub fn dist_kind(&self) -> Result<DistKind> {
        match self.dist.as_str() {
            "gaussian" => Ok(DistKind::Gaussian),
            "empirical" => Ok(DistKind::Empirical),
            d => Err(Error::invalid(
                "dist",
                format!("expected gaussian or empirical, got '{d}'"),
            )),
        }
    }

    pub fn act_method(&self) -> Result<ActMethod> {
        match self.act_quantizer.as_str() {
            "kquantile" => Ok(ActMethod::KQuantile),
            "uniform" => Ok(ActMethod::Uniform),
            a => Err(Error::invalid(
                "act_quantizer",
                format!("expected kquantile or uniform, got '{a}'"),
            )),
        }
    }

    pub fn architecture(&self) -> Result<Arch> {
        renamed("arch", Arch::from_name(&self.arch))
    }

    pub fn data_format(&self) -> Result<DataFormat> {
        renamed("format", DataFormat::from_name(&self.format))
    }

    /// Settings for the quantization schedule.
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            noisy_lr_mult: self.noisy_lr_mult,
            batch_size: self.batch_size,
            max_batches: self.max_batches,
            freeze_future: self.freeze_future,
            bn: if self.bn_batch_stats {
                BnMode::Train
            } else {
                BnMode::Inference
            },
            calib_samples: self.calib_samples,
            eval_samples: self.eval_samples,
            seed: self.seed,
        }
    }

    /// Settings for full-precision baseline training.
    pub fn baseline_settings(&self) -> TrainSettings {
        TrainSettings {
            lr: self.baseline_lr,
            bn: BnMode::Train,
            ..self.train_settings()
        }
    }
}
