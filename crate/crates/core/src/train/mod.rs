//! Deterministic training: inverse-square-root warmup, Adam, label smoothing,
//! synthetic and file-backed seq2seq data, validation NLL and greedy decoding.

mod adam;
mod data;
mod run;
mod schedule;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::config::{ConfigError, Section};
use crate::model::ModelError;

pub use adam::{adam_step, adam_update, AdamState};
pub use data::{
    make_batches, read_sequences, Batch, BatchStream, Corpus, Dataset, Example, Prefetcher,
    SynthTask, TaskKind, VocabMeta,
};
pub use run::{
    evaluate_nll, greedy_decode, init_model, sequence_accuracy, train_run, train_run_with, ReportRow,
    StepOutcome, Trainer,
    RunReport, CSV_HEADER,
};
pub use schedule::lr_schedule;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("learning-rate schedule is defined from step 1")]
    StepZero,
    #[error("non-finite gradient in `{name}`")]
    NonFiniteGradient { name: String },
    #[error("parameter `{name}`: gradient has {grad} entries, parameter has {param}")]
    ShapeMismatch { name: String, param: usize, grad: usize },
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Arithmetic used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision `{s}` (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_scale: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Padded target-side token budget per batch.
    pub batch_tokens: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub precision: Precision,
    pub clip_norm: Option<f64>,
    /// Held-out examples used for validation NLL.
    pub valid_samples: usize,
    /// Depth of the background batch queue; 0 generates batches inline.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_scale: 1.0,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            batch_tokens: 4096,
            max_steps: 100_000,
            eval_interval: 1000,
            seed: 0,
            precision: Precision::F32,
            clip_norm: None,
            valid_samples: 200,
            prefetch: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "lr_scale",
    "warmup_steps",
    "beta1",
    "beta2",
    "adam_eps",
    "label_smoothing",
    "batch_tokens",
    "max_steps",
    "eval_interval",
    "seed",
    "precision",
    "clip_norm",
    "valid_samples",
    "prefetch",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.warmup_steps == 0 {
            return Err("warmup_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(format!("label_smoothing {} is outside [0, 1)", self.label_smoothing));
        }
        if self.batch_tokens == 0 || self.eval_interval == 0 {
            return Err("batch_tokens and eval_interval must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("Adam betas must lie in [0, 1)".into());
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn from_section(section: &Section) -> Result<Self, ConfigError> {
        section.check_keys(KEYS)?;
        let d = TrainConfig::default();
        let tc = TrainConfig {
            lr_scale: section.get_or("lr_scale", d.lr_scale)?,
            warmup_steps: section.get_or("warmup_steps", d.warmup_steps)?,
            beta1: section.get_or("beta1", d.beta1)?,
            beta2: section.get_or("beta2", d.beta2)?,
            adam_eps: section.get_or("adam_eps", d.adam_eps)?,
            label_smoothing: section.get_or("label_smoothing", d.label_smoothing)?,
            batch_tokens: section.get_or("batch_tokens", d.batch_tokens)?,
            max_steps: section.get_or("max_steps", d.max_steps)?,
            eval_interval: section.get_or("eval_interval", d.eval_interval)?,
            seed: section.get_or("seed", d.seed)?,
            precision: section.get_or("precision", d.precision)?,
            clip_norm: section.get("clip_norm")?,
            valid_samples: section.get_or("valid_samples", d.valid_samples)?,
            prefetch: section.get_or("prefetch", d.prefetch)?,
        };
        tc.validate().map_err(|reason| ConfigError::Rejected {
            section: section.name.clone(),
            reason,
        })?;
        Ok(tc)
    }

    pub fn write_section(&self, section: &mut Section) {
        section
            .set("lr_scale", self.lr_scale)
            .set("warmup_steps", self.warmup_steps)
            .set("beta1", self.beta1)
            .set("beta2", self.beta2)
            .set("adam_eps", self.adam_eps)
            .set("label_smoothing", self.label_smoothing)
            .set("batch_tokens", self.batch_tokens)
            .set("max_steps", self.max_steps)
            .set("eval_interval", self.eval_interval)
            .set("seed", self.seed)
            .set("precision", self.precision)
            .set("valid_samples", self.valid_samples)
            .set("prefetch", self.prefetch);
        if let Some(c) = self.clip_norm {
            section.set("clip_norm", c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigDoc;

    #[test]
    fn section_round_trip_and_validation() {
        let tc = TrainConfig {
            warmup_steps: 200,
            clip_norm: Some(1.0),
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let mut doc = ConfigDoc::default();
        tc.write_section(doc.push_section("train"));
        let doc = ConfigDoc::parse(&doc.render()).unwrap();
        assert_eq!(TrainConfig::from_section(doc.section("train").unwrap()).unwrap(), tc);

        for bad in ["warmup_steps = 0", "label_smoothing = 1.0", "batch_tokens = 0", "bogus = 1"] {
            let doc = ConfigDoc::parse(&format!("[train]\n{bad}\n")).unwrap();
            assert!(TrainConfig::from_section(doc.section("train").unwrap()).is_err(), "{bad}");
        }
    }
}
