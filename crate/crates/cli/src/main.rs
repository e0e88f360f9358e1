use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use layershare::bench::{compare_configs, nll_chart_svg, results_csv, BenchResult};
use layershare::config::ConfigDoc;
use layershare::experiment::{preset, Experiment, ExperimentError};
use layershare::model::{load_checkpoint, param_breakdown, save_checkpoint, Model, ModelConfig};
use layershare::share_plan::{build_assignment, render_plan, ShareStrategy};
use layershare::tensor::Scalar;
use layershare::train::{
    evaluate_nll, init_model, sequence_accuracy, train_run_with, Precision, RunReport,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "layershare", version, about = "Transformers whose layers share parameter blocks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Configuration file (`[model]`, `[train]`, `[task]`, `[bench]` sections).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset to use instead of a file (e.g. micro-copy, base, tiny).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Seed for every random stream; overrides `[train] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Generate batches on the training thread only.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Exit with status 3 when training diverges.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the layer-to-block assignment.
    Plan {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        blocks: usize,
        #[arg(long)]
        strategy: ShareStrategy,
    },
    /// Print the parameter breakdown of the configured model.
    Params,
    /// Train the configured model; writes report.csv and a checkpoint.
    Train,
    /// Greedy-decoding accuracy and validation NLL of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out examples to score (default: `[train] valid_samples`).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Throughput comparison of the `[bench.NAME]` configurations.
    Bench,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Diverged(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::Model(_) => Failure::Usage(e.to_string()),
            ExperimentError::Train(_) => Failure::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Diverged(m)) => {
            eprintln!("diverged: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match &cli.command {
        Command::Plan { layers, blocks, strategy } => {
            let plan = build_assignment(*layers, *blocks, *strategy).map_err(|e| Failure::Usage(e.to_string()))?;
            let json = plan.to_json();
            let text = render_plan(&plan);
            println!("{}", text.trim_end());
            println!("{json}");
            if let Some(out) = &g.out {
                let mut doc = ConfigDoc::default();
                doc.push_section("plan").set("layers", layers).set("blocks", blocks).set("strategy", strategy);
                write_outputs(out, &[("plan.json", format!("{json}\n"))])?;
                write_manifest(out, "plan", g, doc)?;
            }
            Ok(())
        }
        Command::Params => {
            let exp = experiment(g)?;
            let breakdown = param_breakdown(&exp.model);
            println!("{breakdown}");
            if let Some(out) = &g.out {
                write_outputs(out, &[("params.txt", format!("{breakdown}\n"))])?;
                write_manifest(out, "params", g, exp.to_doc())?;
            }
            Ok(())
        }
        Command::Train => {
            let exp = experiment(g)?;
            let out = out_dir(g, "train")?;
            write_manifest(&out, "train", g, exp.to_doc())?;
            match exp.train.precision {
                Precision::F32 => train::<f32>(&exp, &out, g),
                Precision::F64 => train::<f64>(&exp, &out, g),
            }
        }
        Command::Eval { checkpoint, samples } => {
            let exp = eval_experiment(g, checkpoint)?;
            let out = out_dir(g, "eval")?;
            let precision = fs::read_to_string(checkpoint.join("manifest.txt"))
                .ok()
                .and_then(|t| ConfigDoc::parse(&t).ok())
                .and_then(|d| d.section("meta").and_then(|m| m.get::<Precision>("precision").ok().flatten()))
                .unwrap_or_default();
            let mut doc = exp.to_doc();
            doc.push_section("run").set("checkpoint", checkpoint.display());
            write_manifest(&out, "eval", g, doc)?;
            let samples = samples.unwrap_or(exp.train.valid_samples);
            match precision {
                Precision::F32 => eval::<f32>(&exp, checkpoint, samples, &out),
                Precision::F64 => eval::<f64>(&exp, checkpoint, samples, &out),
            }
        }
        Command::Bench => {
            let exp = experiment(g)?;
            let out = out_dir(g, "bench")?;
            write_manifest(&out, "bench", g, exp.to_doc())?;
            bench(&exp, &out, g)
        }
    }
}

fn experiment(g: &Global) -> Result<Experiment, Failure> {
    let mut exp = match (&g.config, &g.preset) {
        (Some(path), _) => Experiment::load(path, g.seed)?,
        (None, Some(name)) => {
            if preset(name).is_none() {
                return Err(Failure::Usage(format!("unknown preset `{name}`")));
            }
            Experiment::from_preset(name, g.seed)?
        }
        (None, None) => return Err(Failure::Usage("pass --config <file> or --preset <name>".into())),
    };
    if g.deterministic {
        exp.train.prefetch = 0;
    }
    Ok(exp)
}

/// The experiment for `eval`: explicit config, else the run manifest beside
/// the checkpoint.
fn eval_experiment(g: &Global, checkpoint: &Path) -> Result<Experiment, Failure> {
    if g.config.is_some() || g.preset.is_some() {
        return experiment(g);
    }
    let beside = checkpoint.parent().map(|p| p.join("manifest.txt"));
    match beside.filter(|p| p.exists()) {
        Some(path) => Ok(Experiment::load(&path, g.seed)?),
        None => Err(Failure::Usage(
            "no manifest.txt next to the checkpoint; pass --config or --preset".into(),
        )),
    }
}

fn out_dir(g: &Global, command: &str) -> Result<PathBuf, Failure> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_outputs(dir: &Path, files: &[(&str, String)]) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// `manifest.txt`: the resolved configuration plus a `[run]` section. It is a
/// valid `--config` file, so `--config DIR/manifest.txt` repeats the run.
fn write_manifest(dir: &Path, command: &str, g: &Global, mut doc: ConfigDoc) -> Result<(), Failure> {
    let mut run_entries: Vec<(String, String)> = vec![
        ("command".into(), command.into()),
        ("version".into(), VERSION.into()),
        ("deterministic".into(), g.deterministic.to_string()),
    ];
    if let Some(s) = g.seed {
        run_entries.push(("seed".into(), s.to_string()));
    }
    let existing: Vec<(String, String)> = doc
        .section("run")
        .map(|s| s.entries.iter().map(|e| (e.key.clone(), e.value.clone())).collect())
        .unwrap_or_default();
    let mut rendered = ConfigDoc::default();
    let run = rendered.push_section("run");
    for (k, v) in run_entries.iter().chain(&existing) {
        run.set(k, v);
    }
    for s in doc.sections().iter().filter(|s| s.name != "run") {
        let target = rendered.push_section(&s.name);
        for e in &s.entries {
            target.set(&e.key, &e.value);
        }
    }
    doc = rendered;
    write_outputs(dir, &[("manifest.txt", doc.render())])
}

fn train<T: Scalar>(exp: &Experiment, out: &Path, g: &Global) -> Result<(), Failure> {
    let mut model = init_model::<T>(exp.model.clone(), &exp.data, &exp.train).map_err(runtime)?;
    eprintln!("{:>7} {:>10} {:>10} {:>10} {:>10}", "step", "seconds", "train", "valid_nll", "tok/s");
    let report = train_run_with(&mut model, &exp.data, &exp.train, |r| {
        eprintln!(
            "{:>7} {:>10.2} {:>10.4} {:>10.4} {:>10.0}",
            r.step, r.wallclock_s, r.train_loss, r.valid_nll, r.tokens_per_s
        )
    })
    .map_err(runtime)?;
    write_outputs(out, &[("report.csv", report.to_csv())])?;
    let last = report.rows.last().map(|r| r.step).unwrap_or(0);
    let meta = vec![("step".to_string(), last.to_string())];
    save_checkpoint(&model, &out.join("checkpoint"), &meta).map_err(runtime)?;
    match report.diverged_at {
        Some(step) if g.strict => Err(Failure::Diverged(format!("non-finite loss at step {step}"))),
        Some(step) => {
            eprintln!("warning: training diverged at step {step} (recorded in report.csv)");
            Ok(())
        }
        None => Ok(()),
    }
}

fn eval<T: Scalar>(exp: &Experiment, checkpoint: &Path, samples: usize, out: &Path) -> Result<(), Failure> {
    let ckpt = load_checkpoint::<T>(checkpoint).map_err(|e| Failure::Usage(e.to_string()))?;
    let model: Model<T> = ckpt.model;
    if model.config().vocab_size != exp.data.vocab_size() {
        return Err(Failure::Usage(format!(
            "checkpoint vocabulary {} differs from the task's {}",
            model.config().vocab_size,
            exp.data.vocab_size()
        )));
    }
    let examples = exp.data.valid_examples(samples);
    let nll = evaluate_nll(&model, &examples, exp.train.batch_tokens).map_err(runtime)?;
    let accuracy = sequence_accuracy(&model, &examples, 50).map_err(runtime)?;
    let line = format!("accuracy={accuracy:.4} valid_nll={nll:.6} samples={}", examples.len());
    println!("{line}");
    write_outputs(out, &[("eval.txt", format!("{line}\n"))])
}

fn bench(exp: &Experiment, out: &Path, g: &Global) -> Result<(), Failure> {
    let plan = exp
        .bench
        .as_ref()
        .ok_or_else(|| Failure::Usage("the configuration has no [bench] section".into()))?;
    if plan.configs.is_empty() {
        return Err(Failure::Usage("no [bench.NAME] configurations to compare".into()));
    }
    let results: Vec<BenchResult> = match exp.train.precision {
        Precision::F32 => compare_configs::<f32>(&plan.configs, &plan.baseline, &exp.data, &exp.train, &plan.settings),
        Precision::F64 => compare_configs::<f64>(&plan.configs, &plan.baseline, &exp.data, &exp.train, &plan.settings),
    }
    .map_err(|e| match e {
        layershare::bench::BenchError::Train(t) => runtime(t),
        other => Failure::Usage(other.to_string()),
    })?;
    let csv = results_csv(&results);
    print!("{csv}");
    eprintln!("machine: {}", results.first().map(|r| r.machine.as_str()).unwrap_or(""));
    let mut files = vec![("bench.csv", csv)];
    let mut diverged: Vec<String> = results
        .iter()
        .filter_map(|r| r.diverged_in_trial.map(|t| format!("{} (trial {t})", r.name)))
        .collect();

    if plan.curves {
        let mut series = Vec::new();
        for (name, cfg) in &plan.configs {
            eprintln!("training {name}");
            let report = match exp.train.precision {
                Precision::F32 => curve::<f32>(cfg, exp)?,
                Precision::F64 => curve::<f64>(cfg, exp)?,
            };
            if let Some(step) = report.diverged_at {
                diverged.push(format!("{name} (step {step})"));
            }
            write_outputs(&out.join("curves"), &[(&format!("{name}.csv"), report.to_csv())])?;
            series.push((name.clone(), report));
        }
        files.push(("nll.svg", nll_chart_svg(&series)));
    }
    write_outputs(out, &files)?;
    if !diverged.is_empty() {
        let msg = diverged.join(", ");
        if g.strict {
            return Err(Failure::Diverged(msg));
        }
        eprintln!("warning: diverged: {msg}");
    }
    Ok(())
}

fn curve<T: Scalar>(cfg: &ModelConfig, exp: &Experiment) -> Result<RunReport, Failure> {
    let mut model = init_model::<T>(cfg.clone(), &exp.data, &exp.train).map_err(runtime)?;
    train_run_with(&mut model, &exp.data, &exp.train, |_| {}).map_err(runtime)
}
