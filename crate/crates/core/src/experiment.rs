//! Resolves a configuration document into everything a run needs.
//!
//! Sections: `[model]`, `[train]`, `[task]`, `[bench]` and any number of
//! `[bench.NAME]` sections, each a set of `[model]` overrides. A `[run]`
//! section (written into run manifests) is ignored.

use std::path::Path;

use thiserror::Error;

use crate::bench::BenchSettings;
use crate::config::{ConfigDoc, ConfigError, Section};
use crate::model::{ModelConfig, ModelError};
use crate::seed::derive_seed;
use crate::train::{Corpus, Dataset, SynthTask, TaskKind, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Shipped preset files, by file stem.
pub const PRESETS: &[(&str, &str)] = &[
    ("tiny", include_str!("../../../presets/tiny.conf")),
    ("base", include_str!("../../../presets/base.conf")),
    ("base-cycle-rev", include_str!("../../../presets/base-cycle-rev.conf")),
    ("universal", include_str!("../../../presets/universal.conf")),
    ("micro-copy", include_str!("../../../presets/micro-copy.conf")),
    ("micro-bench", include_str!("../../../presets/micro-bench.conf")),
    ("micro-race", include_str!("../../../presets/micro-race.conf")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub baseline: String,
    pub settings: BenchSettings,
    /// Also train every configuration and chart NLL against wallclock.
    pub curves: bool,
    pub configs: Vec<(String, ModelConfig)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Dataset,
    /// `[task]` as resolved: explicit seed, absolute data paths.
    pub task: Section,
    pub bench: Option<BenchPlan>,
}

const TASK_KEYS: &[&str] = &[
    "kind", "vocab_size", "min_len", "max_len", "seed", "train_src", "train_tgt", "valid_src", "valid_tgt", "vocab",
];
const BENCH_KEYS: &[&str] = &["baseline", "trials", "trial_batches", "warmup_batches", "curves"];

fn empty(name: &str) -> Section {
    Section { name: name.to_string(), entries: Vec::new() }
}

impl Experiment {
    /// `base_dir` anchors relative data paths; `seed` replaces `[train] seed`.
    pub fn from_doc(doc: &ConfigDoc, base_dir: &Path, seed: Option<u64>) -> Result<Self, ExperimentError> {
        for s in doc.sections() {
            let known = matches!(s.name.as_str(), "model" | "train" | "task" | "bench" | "run") || s.name.starts_with("bench.");
            if !known {
                return Err(ConfigError::Rejected {
                    section: s.name.clone(),
                    reason: "unknown section".into(),
                }
                .into());
            }
        }
        let model_section = doc.section("model").cloned().unwrap_or_else(|| empty("model"));
        let model = ModelConfig::from_section(&model_section)?;
        let mut train = TrainConfig::from_section(doc.section("train").unwrap_or(&empty("train")))?;
        if let Some(s) = seed {
            train.seed = s;
        }
        let (data, task) = dataset(doc.section("task").unwrap_or(&empty("task")), &model, &train, base_dir)?;

        let bench = match doc.section("bench") {
            None => None,
            Some(b) => {
                b.check_keys(BENCH_KEYS)?;
                let d = BenchSettings::default();
                let configs = doc
                    .subsections("bench")
                    .map(|(name, s)| {
                        let merged = model_section.overlaid(s);
                        let cfg = ModelConfig::from_section(&merged)?;
                        Ok((name.to_string(), cfg))
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                let baseline = match b.get::<String>("baseline")? {
                    Some(name) => name,
                    None => configs.first().map(|c| c.0.clone()).unwrap_or_default(),
                };
                Some(BenchPlan {
                    baseline,
                    settings: BenchSettings {
                        trials: b.get_or("trials", d.trials)?,
                        trial_batches: b.get_or("trial_batches", d.trial_batches)?,
                        warmup_batches: b.get_or("warmup_batches", d.warmup_batches)?,
                    },
                    curves: b.get_or("curves", false)?,
                    configs,
                })
            }
        };
        for cfg in std::iter::once(&model).chain(bench.iter().flat_map(|b| b.configs.iter().map(|c| &c.1))) {
            cfg.validate()?;
        }
        Ok(Experiment { model, train, data, task, bench })
    }

    /// Fully resolved configuration; loading it reproduces `self`.
    pub fn to_doc(&self) -> ConfigDoc {
        let mut doc = ConfigDoc::default();
        self.model.write_section(doc.push_section("model"));
        self.train.write_section(doc.push_section("train"));
        let task = doc.push_section("task");
        for e in &self.task.entries {
            task.set(&e.key, &e.value);
        }
        if let Some(b) = &self.bench {
            doc.push_section("bench")
                .set("baseline", &b.baseline)
                .set("trials", b.settings.trials)
                .set("trial_batches", b.settings.trial_batches)
                .set("warmup_batches", b.settings.warmup_batches)
                .set("curves", b.curves);
            for (name, cfg) in &b.configs {
                cfg.write_section(doc.push_section(&format!("bench.{name}")));
            }
        }
        doc
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, ExperimentError> {
        let doc = ConfigDoc::load(path)?;
        Self::from_doc(&doc, path.parent().unwrap_or(Path::new(".")), seed)
    }

    pub fn from_preset(name: &str, seed: Option<u64>) -> Result<Self, ExperimentError> {
        let text = preset(name).ok_or_else(|| ConfigError::Io {
            path: name.to_string(),
            reason: "no such preset".into(),
        })?;
        Self::from_doc(&ConfigDoc::parse(text)?, Path::new("."), seed)
    }
}

fn dataset(
    task: &Section,
    model: &ModelConfig,
    train: &TrainConfig,
    base: &Path,
) -> Result<(Dataset, Section), ExperimentError> {
    task.check_keys(TASK_KEYS)?;
    let mut resolved = empty("task");
    let kind: String = task.get_or("kind", "copy".to_string())?;
    resolved.set("kind", &kind);
    if kind == "files" {
        let mut paths = Vec::new();
        for key in ["train_src", "train_tgt", "valid_src", "valid_tgt", "vocab"] {
            let p: String = task.require(key)?;
            let full = base.join(p);
            let full = full.canonicalize().unwrap_or(full);
            resolved.set(key, full.display());
            paths.push(full);
        }
        let corpus = Corpus::load(&paths[0], &paths[1], &paths[2], &paths[3], &paths[4])?;
        return Ok((Dataset::Corpus(corpus), resolved));
    }
    let parsed: TaskKind = kind.parse().map_err(|reason| ConfigError::Invalid {
        line: task.entry("kind").map_or(0, |e| e.line),
        section: "task".into(),
        key: "kind".into(),
        value: kind.clone(),
        reason,
    })?;
    let synth = SynthTask::new(
        parsed,
        task.get_or("vocab_size", model.vocab_size)?,
        task.get_or("min_len", 3)?,
        task.get_or("max_len", 8)?,
        task.get("seed")?.unwrap_or_else(|| derive_seed(train.seed, "task")),
    )?;
    resolved
        .set("vocab_size", synth.vocab_size)
        .set("min_len", synth.min_len)
        .set("max_len", synth.max_len)
        .set("seed", synth.seed);
    Ok((Dataset::Synth(synth), resolved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_count;

    #[test]
    fn every_preset_resolves() {
        for (name, _) in PRESETS {
            Experiment::from_preset(name, None).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn bench_sections_override_model() {
        let e = Experiment::from_preset("micro-bench", Some(3)).unwrap();
        let b = e.bench.unwrap();
        assert_eq!(b.baseline, "vanilla");
        let names: Vec<_> = b.configs.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(names, ["vanilla", "sequence", "cycle", "cycle_rev", "cycle_rev_18", "universal"]);
        let uni = &b.configs[5].1;
        assert_eq!((uni.d_model, uni.d_ff, uni.enc_blocks, uni.vocab_size), (80, 152, 1, 16));
        assert_eq!(e.train.seed, 3);
        let budget = param_count(uni) as f64;
        for (name, cfg) in &b.configs {
            let ratio = param_count(cfg) as f64 / budget;
            assert!((0.98..=1.02).contains(&ratio), "{name}: {ratio}");
        }
    }

    #[test]
    fn resolved_document_reproduces_the_experiment() {
        for (name, _) in PRESETS {
            let e = Experiment::from_preset(name, Some(12)).unwrap();
            let doc = ConfigDoc::parse(&e.to_doc().render()).unwrap();
            let back = Experiment::from_doc(&doc, Path::new("/nonexistent"), None).unwrap();
            assert_eq!(back, e, "{name}");
        }
    }

    #[test]
    fn unknown_sections_and_keys_are_rejected() {
        for text in ["[modle]\nd_model = 4\n", "[task]\nkind = copy\nspeed = 3\n", "[task]\nkind = juggle\n"] {
            let doc = ConfigDoc::parse(text).unwrap();
            assert!(Experiment::from_doc(&doc, Path::new("."), None).is_err(), "{text}");
        }
    }
}
