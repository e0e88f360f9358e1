//! Training throughput and NLL-vs-wallclock comparisons between configurations.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::seed::derive_seed;
use crate::share_plan::ShareStrategy;
use crate::tensor::Scalar;
use crate::train::{init_model, BatchStream, Dataset, RunReport, TrainConfig, TrainError, Trainer};

pub const CSV_HEADER: &str = "name,strategy,M,N,params,tokens_per_s,relative_speed";

/// Fewest timed batches per trial.
pub const MIN_TRIAL_BATCHES: usize = 10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("baseline `{0}` is not among the benchmarked configurations")]
    UnknownBaseline(String),
    #[error("need at least {MIN_TRIAL_BATCHES} timed batches per trial, got {0}")]
    TooFewBatches(usize),
    #[error("need at least one trial")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSettings {
    /// Timed train steps per trial.
    pub trial_batches: usize,
    /// Untimed steps that open every trial.
    pub warmup_batches: usize,
    pub trials: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { trial_batches: 20, warmup_batches: 3, trials: 5 }
    }
}

impl BenchSettings {
    fn validate(&self) -> Result<(), BenchError> {
        if self.trial_batches < MIN_TRIAL_BATCHES {
            return Err(BenchError::TooFewBatches(self.trial_batches));
        }
        if self.trials == 0 {
            return Err(BenchError::NoTrials);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub name: String,
    pub strategy: ShareStrategy,
    /// Encoder blocks and layers.
    pub m: usize,
    pub n: usize,
    pub params: usize,
    /// Median over trials of non-pad target tokens per second.
    pub tokens_per_s: f64,
    pub relative_speed: f64,
    /// Throughput of each completed trial.
    pub trial_tokens_per_s: Vec<f64>,
    /// Trial (0-based) in which training diverged; later trials are skipped.
    pub diverged_in_trial: Option<usize>,
    pub warmup_batches: usize,
    pub machine: String,
}

/// OS, architecture, core count and CPU model where available.
pub fn machine_descriptor() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{}-{} {cores} cores, {cpu}", std::env::consts::OS, std::env::consts::ARCH)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A model under measurement plus its private batch stream, so interleaved
/// trials of different configurations do not share state.
struct Subject<T: Scalar> {
    name: String,
    model: Model<T>,
    stream: BatchStream,
    trials: Vec<f64>,
    diverged: Option<usize>,
}

impl<T: Scalar> Subject<T> {
    fn new(name: &str, config: ModelConfig, dataset: &Dataset, tc: &TrainConfig) -> Result<Self, BenchError> {
        let model = init_model::<T>(config, dataset, tc)?;
        let stream = BatchStream::new(
            Arc::new(dataset.clone()),
            model.config().specials,
            tc.batch_tokens,
            derive_seed(tc.seed, "bench-data"),
        );
        Ok(Subject { name: name.to_string(), model, stream, trials: Vec::new(), diverged: None })
    }

    /// One trial: warmup steps, then timed steps including batch generation.
    /// A diverging step abandons the trial and every later one.
    fn trial(&mut self, index: usize, tc: &TrainConfig, settings: &BenchSettings) -> Result<(), BenchError> {
        if self.diverged.is_some() {
            return Ok(());
        }
        let mut trainer = Trainer::new(&mut self.model, tc);
        for _ in 0..settings.warmup_batches {
            let b = self.stream.next_batch()?;
            if trainer.step(&b)?.diverged {
                self.diverged = Some(index);
                return Ok(());
            }
        }
        let mut tokens = 0usize;
        let started = Instant::now();
        for _ in 0..settings.trial_batches {
            let b = self.stream.next_batch()?;
            if trainer.step(&b)?.diverged {
                self.diverged = Some(index);
                return Ok(());
            }
            tokens += b.target_tokens;
        }
        self.trials.push(tokens as f64 / started.elapsed().as_secs_f64());
        Ok(())
    }

    fn result(self, settings: &BenchSettings, machine: &str) -> BenchResult {
        let cfg = self.model.config();
        BenchResult {
            strategy: cfg.strategy,
            m: cfg.enc_blocks,
            n: cfg.enc_layers,
            params: self.model.param_count(),
            tokens_per_s: median(&self.trials),
            relative_speed: f64::NAN,
            trial_tokens_per_s: self.trials,
            diverged_in_trial: self.diverged,
            warmup_batches: settings.warmup_batches,
            machine: machine.to_string(),
            name: self.name,
        }
    }
}

/// Median training throughput of one configuration; `relative_speed` is 1.
/// The median covers completed trials only and is NaN if none completed.
pub fn measure_throughput<T: Scalar>(
    name: &str,
    config: ModelConfig,
    dataset: &Dataset,
    tc: &TrainConfig,
    settings: &BenchSettings,
) -> Result<BenchResult, BenchError> {
    let mut results = compare_configs::<T>(&[(name.to_string(), config)], name, dataset, tc, settings)?;
    Ok(results.remove(0))
}

/// Benchmarks every configuration, interleaving trials round-robin so slow
/// drifts of the machine affect all of them alike. Rows keep input order;
/// `relative_speed` is against the row named `baseline`.
pub fn compare_configs<T: Scalar>(
    configs: &[(String, ModelConfig)],
    baseline: &str,
    dataset: &Dataset,
    tc: &TrainConfig,
    settings: &BenchSettings,
) -> Result<Vec<BenchResult>, BenchError> {
    settings.validate()?;
    let base = configs
        .iter()
        .position(|(n, _)| n == baseline)
        .ok_or_else(|| BenchError::UnknownBaseline(baseline.to_string()))?;
    let mut subjects = configs
        .iter()
        .map(|(name, cfg)| Subject::<T>::new(name, cfg.clone(), dataset, tc))
        .collect::<Result<Vec<_>, _>>()?;
    for trial in 0..settings.trials {
        for s in subjects.iter_mut() {
            s.trial(trial, tc, settings)?;
        }
    }
    let machine = machine_descriptor();
    let mut results: Vec<BenchResult> = subjects.into_iter().map(|s| s.result(settings, &machine)).collect();
    let reference = results[base].tokens_per_s;
    for r in results.iter_mut() {
        r.relative_speed = r.tokens_per_s / reference;
    }
    results[base].relative_speed = 1.0;
    Ok(results)
}

pub fn results_csv(results: &[BenchResult]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.1},{:.4}",
            r.name, r.strategy, r.m, r.n, r.params, r.tokens_per_s, r.relative_speed
        );
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained SVG line chart of validation NLL against training
/// wallclock, one line per named report.
pub fn nll_chart_svg(series: &[(String, RunReport)]) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 70.0, 170.0, 20.0, 50.0);
    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, r)| r.rows.iter().filter(|row| row.valid_nll.is_finite()).map(|row| (row.wallclock_s, row.valid_nll)))
        .collect();
    let x_max = points.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-9);
    let y_max = points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9);
    let px = |x: f64| left + x / x_max * (w - left - right);
    let py = |y: f64| h - bottom - y / y_max * (h - top - bottom);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let (x0, y0, x1, y1) = (px(0.0), py(0.0), px(x_max), py(y_max));
    let _ = writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (tx, ty) = (px(f * x_max), py(f * y_max));
        let _ = writeln!(svg, "<text x=\"{tx}\" y=\"{}\" text-anchor=\"middle\">{:.1}</text>", y0 + 16.0, f * x_max);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.2}</text>", x0 - 6.0, ty + 4.0, f * y_max);
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">training wallclock (s)</text>",
        (x0 + x1) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        "<text transform=\"translate(18 {}) rotate(-90)\" text-anchor=\"middle\">validation NLL</text>",
        (y0 + y1) / 2.0
    );
    for (i, (name, report)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.valid_nll.is_finite())
            .map(|r| format!("{:.2},{:.2}", px(r.wallclock_s), py(r.valid_nll)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = top + 16.0 * i as f64 + 10.0;
        let lx = w - right + 12.0;
        let _ = writeln!(svg, "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{colour}\" stroke-width=\"2\"/>", lx + 18.0);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{}</text>", lx + 24.0, ly + 4.0, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{ReportRow, SynthTask, TaskKind};

    fn tiny(layers: usize, blocks: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            dropout: 0.0,
            max_len: 16,
            ..ModelConfig::default().with_depth(layers, blocks, ShareStrategy::Cycle)
        }
    }

    fn setup() -> (Dataset, TrainConfig, BenchSettings) {
        let data = Dataset::Synth(SynthTask::new(TaskKind::Copy, 10, 2, 5, 0).unwrap());
        let tc = TrainConfig { warmup_steps: 10, batch_tokens: 40, ..TrainConfig::default() };
        (data, tc, BenchSettings { trial_batches: 10, warmup_batches: 1, trials: 3 })
    }

    #[test]
    fn baseline_is_exactly_one_and_rows_keep_order() {
        let (data, tc, settings) = setup();
        let configs = vec![("vanilla".to_string(), tiny(2, 2)), ("cycle".to_string(), tiny(4, 2))];
        let rows = compare_configs::<f32>(&configs, "vanilla", &data, &tc, &settings).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].name, "vanilla");
        assert_eq!(rows[0].relative_speed, 1.0);
        assert_eq!(rows[1].params, crate::model::param_count(&configs[1].1));
        assert_eq!(rows[1].trial_tokens_per_s.len(), 3);
        let csv = results_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn rejects_bad_requests() {
        let (data, tc, settings) = setup();
        let configs = vec![("a".to_string(), tiny(2, 2))];
        assert!(matches!(
            compare_configs::<f32>(&configs, "b", &data, &tc, &settings),
            Err(BenchError::UnknownBaseline(_))
        ));
        let few = BenchSettings { trial_batches: 9, ..settings };
        assert!(matches!(
            measure_throughput::<f32>("a", tiny(2, 2), &data, &tc, &few),
            Err(BenchError::TooFewBatches(9))
        ));
    }

    #[test]
    fn median_and_chart() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let report = RunReport {
            rows: vec![
                ReportRow { step: 1, wallclock_s: 0.5, train_loss: 2.0, valid_nll: 1.5, tokens_per_s: 10.0 },
                ReportRow { step: 2, wallclock_s: 1.0, train_loss: 1.0, valid_nll: 0.5, tokens_per_s: 10.0 },
            ],
            diverged_at: None,
        };
        let svg = nll_chart_svg(&[("a<b".into(), report)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b") && svg.contains("<polyline"));
    }
}
