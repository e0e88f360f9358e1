use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::model::{Model, ModelConfig, Specials, TokenBatch};
use crate::seed::derive_seed;
use crate::tensor::{DropoutMode, Graph, Scalar};

use super::adam::{adam_step, clip_grad_norm, AdamState};
use super::data::{Batch, BatchStream, Dataset, Example, Prefetcher, FIRST_CONTENT_ID};
use super::{lr_schedule, TrainConfig, TrainError};

pub const CSV_HEADER: &str = "step,wallclock_s,train_loss,valid_nll,tokens_per_s";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    /// Training time so far, evaluation excluded.
    pub wallclock_s: f64,
    /// Mean smoothed training loss over the steps since the previous row.
    pub train_loss: f64,
    /// Unsmoothed per-token NLL on the held-out set; NaN on a divergence row.
    pub valid_nll: f64,
    /// Non-pad target tokens per training second since the previous row.
    pub tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    /// Step whose loss or gradient was non-finite; that step is the last row.
    pub diverged_at: Option<usize>,
}

/// Six significant digits, fixed notation for moderate magnitudes.
fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                sig6(r.wallclock_s),
                sig6(r.train_loss),
                sig6(r.valid_nll),
                sig6(r.tokens_per_s)
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(TrainError::Data(format!("report must start with `{CSV_HEADER}`")));
        }
        let mut report = RunReport::default();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || TrainError::Data(format!("report line {}: `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            let row = ReportRow {
                step: f[0].trim().parse().map_err(|_| bad())?,
                wallclock_s: num(f[1])?,
                train_loss: num(f[2])?,
                valid_nll: num(f[3])?,
                tokens_per_s: num(f[4])?,
            };
            if !row.train_loss.is_finite() {
                report.diverged_at = Some(row.step);
            }
            report.rows.push(row);
        }
        Ok(report)
    }

    /// Validation NLL of the last evaluated row.
    pub fn final_nll(&self) -> Option<f64> {
        self.rows.iter().rev().map(|r| r.valid_nll).find(|v| v.is_finite())
    }

    /// Earliest training wallclock at which validation NLL was at or below `nll`.
    pub fn time_to_reach(&self, nll: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.valid_nll <= nll).map(|r| r.wallclock_s)
    }

    /// Training loss and validation NLL per row: the columns that must be
    /// reproducible.
    pub fn loss_columns(&self) -> Vec<(usize, u64, u64)> {
        self.rows
            .iter()
            .map(|r| (r.step, r.train_loss.to_bits(), r.valid_nll.to_bits()))
            .collect()
    }
}

/// Packs examples into batches by the same token budget as training.
fn eval_batches(examples: &[Example], budget: usize, sp: Specials) -> Result<Vec<Batch>, TrainError> {
    let mut out = Vec::new();
    let mut group: Vec<Example> = Vec::new();
    let mut longest = 0;
    for e in examples {
        let l = longest.max(e.src.len().max(e.tgt.len()) + 1);
        if !group.is_empty() && l * (group.len() + 1) > budget {
            out.push(Batch::from_examples(&group, sp)?);
            group.clear();
            longest = e.src.len().max(e.tgt.len()) + 1;
        } else {
            longest = l;
        }
        group.push(e.clone());
    }
    if !group.is_empty() {
        out.push(Batch::from_examples(&group, sp)?);
    }
    Ok(out)
}

fn nll_over<T: Scalar>(model: &Model<T>, batches: &[Batch]) -> Result<f64, TrainError> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for b in batches {
        let mut g = Graph::new(DropoutMode::Off);
        let (_, loss) = model.loss(&mut g, &b.src, &b.tgt_in, &b.tgt_out, 0.0)?;
        total += g.value(loss)[0].as_f64() * b.target_tokens as f64;
        tokens += b.target_tokens;
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}

/// Mean unsmoothed per-token NLL of `examples` with dropout off.
pub fn evaluate_nll<T: Scalar>(model: &Model<T>, examples: &[Example], batch_tokens: usize) -> Result<f64, TrainError> {
    let batches = eval_batches(examples, batch_tokens, model.config().specials)?;
    nll_over(model, &batches)
}

/// Argmax decoding of a framed source batch. Each row stops at EOS or after
/// `max_len` tokens; the returned ids exclude BOS and EOS.
pub fn greedy_decode<T: Scalar>(model: &Model<T>, src: &TokenBatch, max_len: usize) -> Result<Vec<Vec<usize>>, TrainError> {
    let cfg = model.config();
    let sp = cfg.specials;
    let max_len = max_len.min(cfg.max_len.saturating_sub(1));
    let rows = src.rows();
    let mut g = Graph::new(DropoutMode::Off);
    let (memory, mut bindings) = model.encode(&mut g, src)?;
    let mut prefix: Vec<Vec<usize>> = vec![vec![sp.bos]; rows];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let tgt = TokenBatch::from_sequences(&prefix, sp.pad)?;
        let logits = model.decode(&mut g, &mut bindings, &memory, src, &tgt)?;
        let (t, v) = (tgt.len(), cfg.vocab_size);
        let values = g.value(logits);
        for r in 0..rows {
            if done[r] {
                prefix[r].push(sp.pad);
                continue;
            }
            let row = &values[(r * t + t - 1) * v..(r * t + t) * v];
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            if best == sp.eos {
                done[r] = true;
            } else {
                out[r].push(best);
            }
            prefix[r].push(best);
        }
    }
    Ok(out)
}

/// Fraction of `examples` whose greedy decoding equals the target exactly.
pub fn sequence_accuracy<T: Scalar>(model: &Model<T>, examples: &[Example], rows_per_batch: usize) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let sp = model.config().specials;
    let mut correct = 0;
    for chunk in examples.chunks(rows_per_batch.max(1)) {
        let b = Batch::from_examples(chunk, sp)?;
        let longest = chunk.iter().map(|e| e.tgt.len()).max().unwrap_or(0);
        let decoded = greedy_decode(model, &b.src, longest + 2)?;
        correct += decoded.iter().zip(chunk).filter(|(d, e)| **d == e.tgt).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Builds the model a run starts from: parameters seeded from the run seed,
/// then admin scales profiled on one training-distribution batch if enabled.
pub fn init_model<T: Scalar>(config: ModelConfig, dataset: &Dataset, tc: &TrainConfig) -> Result<Model<T>, TrainError> {
    let mut model = Model::build(config, derive_seed(tc.seed, "model"))?;
    if model.config().admin {
        let mut profile = BatchStream::new(
            Arc::new(dataset.clone()),
            model.config().specials,
            tc.batch_tokens,
            derive_seed(tc.seed, "admin-profile"),
        );
        let b = profile.next_batch()?;
        model.admin_profile_init(&b.src, &b.tgt_in)?;
    }
    Ok(model)
}

fn check_compatible<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<(), TrainError> {
    let cfg = model.config();
    if cfg.vocab_size != dataset.vocab_size() {
        return Err(TrainError::Data(format!(
            "model vocabulary {} differs from the data's {}",
            cfg.vocab_size,
            dataset.vocab_size()
        )));
    }
    let sp = cfg.specials;
    match dataset {
        Dataset::Synth(_) if [sp.pad, sp.bos, sp.eos].iter().any(|&id| id >= FIRST_CONTENT_ID) => Err(
            TrainError::Data(format!("synthetic tasks reserve ids below {FIRST_CONTENT_ID} for specials")),
        ),
        Dataset::Corpus(c) if c.vocab.specials != sp => Err(TrainError::Data(
            "model special ids differ from the corpus vocabulary file".into(),
        )),
        _ => Ok(()),
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Smoothed training loss of the batch.
    pub loss: f64,
    /// The loss or a gradient was non-finite; parameters were left untouched.
    pub diverged: bool,
}

/// Optimizer state bound to a model: one call to [`Trainer::step`] is a full
/// forward, backward and Adam update.
pub struct Trainer<'m, T: Scalar> {
    pub model: &'m mut Model<T>,
    adam: AdamState<T>,
    tc: TrainConfig,
    dropout_seed: u64,
    step: usize,
}

impl<'m, T: Scalar> Trainer<'m, T> {
    pub fn new(model: &'m mut Model<T>, tc: &TrainConfig) -> Self {
        Trainer {
            adam: AdamState::new(&model.store),
            model,
            tc: tc.clone(),
            dropout_seed: derive_seed(tc.seed, "dropout"),
            step: 0,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, batch: &Batch) -> Result<StepOutcome, TrainError> {
        self.step += 1;
        let step = self.step;
        let cfg = self.model.config();
        let (d_model, dropout) = (cfg.d_model, cfg.dropout);
        let mode = if dropout > 0.0 {
            DropoutMode::Keyed { seed: self.dropout_seed, step: step as u64 }
        } else {
            DropoutMode::Off
        };
        let mut g = Graph::new(mode);
        let (pass, loss_var) =
            self.model.loss(&mut g, &batch.src, &batch.tgt_in, &batch.tgt_out, self.tc.label_smoothing)?;
        let loss = g.value(loss_var)[0].as_f64();
        if !loss.is_finite() {
            return Ok(StepOutcome { loss, diverged: true });
        }
        let grads = g.backward(loss_var).map_err(crate::model::ModelError::from)?;
        let store = &mut self.model.store;
        store.zero_grads();
        store.accumulate_grads(&pass.bindings, &grads);
        drop((grads, g));
        if let Some(max) = self.tc.clip_norm {
            if !clip_grad_norm(store, max).is_finite() {
                return Ok(StepOutcome { loss, diverged: true });
            }
        }
        let lr = self.tc.lr_scale * lr_schedule(step, d_model, self.tc.warmup_steps)?;
        let tc = &self.tc;
        match adam_step(store, &mut self.adam, lr, tc.beta1, tc.beta2, tc.adam_eps) {
            Ok(()) => Ok(StepOutcome { loss, diverged: false }),
            Err(TrainError::NonFiniteGradient { .. }) => Ok(StepOutcome { loss, diverged: true }),
            Err(e) => Err(e),
        }
    }
}

/// Trains for `tc.max_steps`, evaluating every `tc.eval_interval` steps and
/// after the last one. See [`train_run_with`].
pub fn train_run<T: Scalar>(model: &mut Model<T>, dataset: &Dataset, tc: &TrainConfig) -> Result<RunReport, TrainError> {
    train_run_with(model, dataset, tc, |_| {})
}

/// [`train_run`] with a callback per emitted row.
///
/// A non-finite loss or gradient ends the run with a final row at that step
/// and `diverged_at` set; it is not an error.
pub fn train_run_with<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    tc: &TrainConfig,
    mut on_row: impl FnMut(&ReportRow),
) -> Result<RunReport, TrainError> {
    tc.validate().map_err(TrainError::Data)?;
    check_compatible(model, dataset)?;
    let sp = model.config().specials;

    let data = Arc::new(dataset.clone());
    let stream = BatchStream::new(data.clone(), sp, tc.batch_tokens, derive_seed(tc.seed, "train-data"));
    let mut source: Box<dyn FnMut() -> Result<Batch, TrainError>> = if tc.prefetch > 0 {
        let mut p = Prefetcher::spawn(stream, tc.prefetch);
        Box::new(move || p.next_batch())
    } else {
        let mut s = stream;
        Box::new(move || s.next_batch())
    };
    let valid = eval_batches(&data.valid_examples(tc.valid_samples), tc.batch_tokens, sp)?;

    let mut trainer = Trainer::new(model, tc);
    let mut report = RunReport::default();
    let mut train_time = Duration::ZERO;
    let (mut span_time, mut span_tokens, mut span_loss, mut span_steps) = (Duration::ZERO, 0usize, 0.0f64, 0usize);

    for step in 1..=tc.max_steps {
        let started = Instant::now();
        let batch = source()?;
        let outcome = trainer.step(&batch)?;
        let (loss_value, diverged) = (outcome.loss, outcome.diverged);
        let elapsed = started.elapsed();
        train_time += elapsed;
        span_time += elapsed;
        span_tokens += batch.target_tokens;
        span_loss += loss_value;
        span_steps += 1;

        if diverged || step % tc.eval_interval == 0 || step == tc.max_steps {
            let valid_nll = if diverged { f64::NAN } else { nll_over(trainer.model, &valid)? };
            let secs = span_time.as_secs_f64();
            let row = ReportRow {
                step,
                wallclock_s: train_time.as_secs_f64(),
                train_loss: if diverged { loss_value } else { span_loss / span_steps as f64 },
                valid_nll,
                tokens_per_s: if secs > 0.0 { span_tokens as f64 / secs } else { 0.0 },
            };
            on_row(&row);
            report.rows.push(row);
            (span_time, span_tokens, span_loss, span_steps) = (Duration::ZERO, 0, 0.0, 0);
            if diverged {
                report.diverged_at = Some(step);
                break;
            }
        }
    }
    Ok(report)
}
