//! End-to-end acceptance suite. One test runs every criterion in order and
//! prints a PASS/FAIL line for each; the test fails if any criterion does.
//!
//! Curves for the wallclock race are written under
//! `target/acceptance/curves/` so they can be inspected after a run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use layershare::bench::{compare_configs, median, nll_chart_svg};
use layershare::experiment::Experiment;
use layershare::model::{
    gradient_check, param_count, tied_gradient_error, LnPlacement, Model, ModelConfig, TokenBatch,
};
use layershare::share_plan::{build_assignment, ShareStrategy};
use layershare::train::{init_model, sequence_accuracy, train_run, RunReport, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if let false = $cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. Assignment golden suite

/// Literal transcription of the encoder construction loop: a new layer gets
/// the next block id, a reused layer copies the id of the layer it points at.
fn traced_assignment(n: usize, m: usize, strategy: ShareStrategy) -> Vec<usize> {
    let mut enc = vec![0usize; n + 1];
    let mut created = 0;
    let mut create = || {
        created += 1;
        created
    };
    for i in 1..=n {
        enc[i] = if i == 1 {
            create()
        } else {
            match strategy {
                ShareStrategy::Sequence => {
                    if (i - 1) % (n / m) == 0 {
                        create()
                    } else {
                        enc[i - 1]
                    }
                }
                ShareStrategy::Cycle => {
                    if i <= m {
                        create()
                    } else {
                        enc[((i - 1) % m) + 1]
                    }
                }
                ShareStrategy::CycleRev => {
                    if i <= m {
                        create()
                    } else if i <= m * (n.div_ceil(m) - 1) {
                        enc[((i - 1) % m) + 1]
                    } else {
                        enc[m - ((i - 1) % m)]
                    }
                }
            }
        };
    }
    enc[1..].to_vec()
}

fn criterion_1() -> Outcome {
    let golden = [
        (ShareStrategy::Sequence, [1, 1, 2, 2, 3, 3]),
        (ShareStrategy::Cycle, [1, 2, 3, 1, 2, 3]),
        (ShareStrategy::CycleRev, [1, 2, 3, 3, 2, 1]),
    ];
    for (s, want) in golden {
        let got = build_assignment(6, 3, s).map_err(fail)?;
        ensure!(got.blocks() == want, "{s} M=3 N=6: {:?}", got.blocks());
    }
    let mut checked = 0;
    for n in 1..=24 {
        for m in 1..=n {
            for s in ShareStrategy::ALL {
                if s == ShareStrategy::Sequence && n % m != 0 {
                    continue;
                }
                let got = build_assignment(n, m, s).map_err(fail)?;
                let want = traced_assignment(n, m, s);
                ensure!(got.blocks() == want.as_slice(), "{s} M={m} N={n}: {:?} vs {want:?}", got.blocks());
                checked += 1;
            }
        }
    }
    Ok(format!("figure layout for M=3,N=6 and {checked} traced plans"))
}

// ---------------------------------------------------------------------------
// 2. Parameter-budget parity

fn criterion_2() -> Outcome {
    let base = Experiment::from_preset("base", None).map_err(fail)?.model;
    let universal = Experiment::from_preset("universal", None).map_err(fail)?.model;
    let (pb, pu) = (param_count(&base) as f64, param_count(&universal) as f64);
    ensure!((pb / 61e6 - 1.0).abs() <= 0.02, "base {pb}");
    ensure!((pu / 63e6 - 1.0).abs() <= 0.02, "universal {pu}");

    let plain = ModelConfig { admin: false, ..base.clone() };
    for strategy in ShareStrategy::ALL {
        let reference = param_count(&plain.clone().with_depth(6, 6, strategy));
        for n in [12, 18] {
            let deep = param_count(&plain.clone().with_depth(n, 6, strategy));
            ensure!(deep == reference, "{strategy} N={n}: {deep} != {reference}");
        }
    }
    Ok(format!("base {pb:.0}, universal {pu:.0}, N-invariant at M=6"))
}

// ---------------------------------------------------------------------------
// Micro configurations shared by criteria 3 to 5.

fn micro(layers: usize, blocks: usize, strategy: ShareStrategy, ln: LnPlacement) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 11,
        dropout: 0.0,
        max_len: 16,
        ln_placement: ln,
        ..ModelConfig::default().with_depth(layers, blocks, strategy)
    }
}

fn tokens(rows: &[&[usize]]) -> TokenBatch {
    let seqs: Vec<Vec<usize>> = rows.iter().map(|r| r.to_vec()).collect();
    TokenBatch::from_sequences(&seqs, 0).unwrap()
}

fn sample() -> (TokenBatch, TokenBatch, TokenBatch) {
    (
        tokens(&[&[3, 4, 5, 9, 2], &[6, 7, 2]]),
        tokens(&[&[1, 3, 4, 5, 9], &[1, 6, 7]]),
        tokens(&[&[3, 4, 5, 9, 2], &[6, 7, 2]]),
    )
}

const LNS: [LnPlacement; 2] = [LnPlacement::Post, LnPlacement::Pre];

// ---------------------------------------------------------------------------
// 3. Tied-gradient oracle

fn criterion_3() -> Outcome {
    let (src, tgt, out) = sample();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for m in [1, 2, 4] {
        for s in ShareStrategy::ALL {
            for ln in LNS {
                let model = Model::<f64>::build(micro(4, m, s, ln), 31 + m as u64).map_err(fail)?;
                let err = tied_gradient_error(&model, &src, &tgt, &out, 0.1).map_err(fail)?;
                ensure!(err < 1e-10, "M={m} {s} {ln:?}: {err:e}");
                worst = worst.max(err);
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} configs, worst rel err {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. Finite differences

fn criterion_4() -> Outcome {
    let (src, tgt, out) = sample();
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for s in ShareStrategy::ALL {
        for ln in LNS {
            let cfg = ModelConfig { admin: true, ..micro(4, 2, s, ln) };
            let model = Model::<f64>::build(cfg, 77).map_err(fail)?;
            for c in gradient_check(&model, &src, &tgt, &out, 0.1, 1e-5, 1e-6).map_err(fail)? {
                ensure!(c.max_rel_err < 1e-4, "{s} {ln:?} {}: {:e}", c.name, c.max_rel_err);
                worst = worst.max(c.max_rel_err);
                tensors += 1;
            }
        }
    }
    Ok(format!("{tensors} tensors, worst rel err {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Degeneracy

fn copy_experiment(seed: u64) -> Result<Experiment, String> {
    let mut e = Experiment::from_preset("micro-copy", Some(seed)).map_err(fail)?;
    e.train.prefetch = 0;
    Ok(e)
}

fn criterion_5() -> Outcome {
    let (src, tgt, _) = sample();
    for ln in LNS {
        for (layers, blocks) in [(4, 4), (4, 1)] {
            let reference = Model::<f64>::build(micro(layers, blocks, ShareStrategy::Sequence, ln), 5).map_err(fail)?;
            let want = reference.logits(&src, &tgt).map_err(fail)?;
            for s in [ShareStrategy::Cycle, ShareStrategy::CycleRev] {
                let m = Model::<f64>::build(micro(layers, blocks, s, ln), 5).map_err(fail)?;
                ensure!(m.logits(&src, &tgt).map_err(fail)?.data() == want.data(), "{s} M={blocks} {ln:?} logits");
            }
        }
    }

    // Training trajectories, not just initial forwards.
    let mut exp = copy_experiment(8)?;
    exp.train.max_steps = 40;
    exp.train.eval_interval = 20;
    exp.train.valid_samples = 20;
    for blocks in [4, 1] {
        let mut reports = Vec::new();
        for s in ShareStrategy::ALL {
            let cfg = exp.model.clone().with_depth(4, blocks, s);
            let mut model = init_model::<f32>(cfg, &exp.data, &exp.train).map_err(fail)?;
            reports.push(train_run(&mut model, &exp.data, &exp.train).map_err(fail)?.loss_columns());
        }
        ensure!(reports.windows(2).all(|w| w[0] == w[1]), "M={blocks}: training curves differ");
    }
    Ok("logits and 40-step training bitwise equal".into())
}

// ---------------------------------------------------------------------------
// 6. Trainability matrix

fn criterion_6() -> Outcome {
    let exp = copy_experiment(0)?;
    let threshold = 0.2 * (exp.model.vocab_size as f64).ln();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (layers, blocks, admin) in [(4, 4, false), (4, 2, false), (8, 2, true)] {
        for s in ShareStrategy::ALL {
            let cfg = ModelConfig { admin, ..exp.model.clone().with_depth(layers, blocks, s) };
            let mut model = init_model::<f32>(cfg, &exp.data, &exp.train).map_err(fail)?;
            let report = train_run(&mut model, &exp.data, &exp.train).map_err(fail)?;
            let nll = report.final_nll().unwrap_or(f64::NAN);
            let mut line = format!("M={blocks} N={layers} {s}: nll {nll:.4}");
            if nll.is_nan() || nll >= threshold {
                failures.push(line.clone());
            }
            if layers == blocks {
                let held_out = exp.data.valid_examples(200);
                let acc = sequence_accuracy(&model, &held_out, 50).map_err(fail)?;
                line += &format!(" acc {acc:.3}");
                if acc <= 0.95 {
                    failures.push(format!("M=N {s}: accuracy {acc}"));
                }
            }
            println!("    {line}");
            lines.push(line);
        }
    }
    ensure!(failures.is_empty(), "threshold {threshold:.4}; {}", failures.join("; "));
    Ok(format!("9 runs under nll {threshold:.4}"))
}

// ---------------------------------------------------------------------------
// 7. Speed ordering

fn criterion_7() -> Outcome {
    let exp = Experiment::from_preset("micro-bench", Some(0)).map_err(fail)?;
    let plan = exp.bench.as_ref().ok_or("micro-bench has no [bench] section")?;
    let universal = &plan.configs.iter().find(|c| c.0 == "universal").ok_or("no universal config")?.1;
    let budget = param_count(universal) as f64;
    for (name, cfg) in &plan.configs {
        let r = param_count(cfg) as f64 / budget;
        ensure!((0.98..=1.02).contains(&r), "{name} params off budget by {r}");
    }
    let results = compare_configs::<f32>(&plan.configs, &plan.baseline, &exp.data, &exp.train, &plan.settings).map_err(fail)?;
    let mut uni = f64::NAN;
    let mut slowest_small = f64::INFINITY;
    for r in &results {
        println!("    {:<14} M={} N={:<2} {:>9.0} tok/s  x{:.2}", r.name, r.m, r.n, r.tokens_per_s, r.relative_speed);
        if r.name == "universal" {
            uni = r.tokens_per_s;
        } else {
            slowest_small = slowest_small.min(r.tokens_per_s);
        }
    }
    ensure!(uni < 0.9 * slowest_small, "universal {uni:.0} tok/s vs slowest M-of-N {slowest_small:.0}");
    Ok(format!("universal {:.2} of slowest M-of-N", uni / slowest_small))
}

// ---------------------------------------------------------------------------
// 8. NLL against wallclock

fn curve_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("..").join("acceptance").join("curves")
}

fn criterion_8() -> Outcome {
    let mut t_share = Vec::new();
    let mut t_univ = Vec::new();
    for seed in [1, 2, 3] {
        let mut exp = Experiment::from_preset("micro-race", Some(seed)).map_err(fail)?;
        exp.train.prefetch = 0;
        let plan = exp.bench.clone().ok_or("micro-race has no [bench] section")?;
        let dir = curve_dir().join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir).map_err(fail)?;
        let mut series = Vec::new();
        for (name, cfg) in &plan.configs {
            let mut model = init_model::<f32>(cfg.clone(), &exp.data, &exp.train).map_err(fail)?;
            let report = train_run(&mut model, &exp.data, &exp.train).map_err(fail)?;
            std::fs::write(dir.join(format!("{name}.csv")), report.to_csv()).map_err(fail)?;
            series.push((name.clone(), report));
        }
        std::fs::write(dir.join("nll.svg"), nll_chart_svg(&series)).map_err(fail)?;

        // Read back what was emitted.
        let load = |name: &str| -> Result<RunReport, String> {
            let text = std::fs::read_to_string(dir.join(format!("{name}.csv"))).map_err(fail)?;
            RunReport::from_csv(&text).map_err(fail)
        };
        let share = load(&plan.baseline)?;
        let univ = load("universal")?;
        let target = univ.final_nll().ok_or("universal never evaluated")?;
        let ts = share.time_to_reach(target).unwrap_or(f64::INFINITY);
        let tu = univ.time_to_reach(target).unwrap_or(f64::INFINITY);
        println!("    seed {seed}: target nll {target:.4}; sharing {ts:.1}s, universal {tu:.1}s");
        t_share.push(ts);
        t_univ.push(tu);
    }
    let (ms, mu) = (median(&t_share), median(&t_univ));
    ensure!(ms < mu, "median sharing {ms:.1}s, universal {mu:.1}s");
    Ok(format!("median {ms:.1}s vs {mu:.1}s"))
}

// ---------------------------------------------------------------------------
// 9. Determinism

fn criterion_9() -> Outcome {
    let mut exp = copy_experiment(13)?;
    exp.train.max_steps = 300;
    exp.train.eval_interval = 50;
    let cfg = ModelConfig { admin: true, ..exp.model.clone().with_depth(4, 2, ShareStrategy::CycleRev) };
    let run = |tc: &TrainConfig| -> Result<Vec<(usize, u64, u64)>, String> {
        let mut model = init_model::<f32>(cfg.clone(), &exp.data, tc).map_err(fail)?;
        Ok(train_run(&mut model, &exp.data, tc).map_err(fail)?.loss_columns())
    };
    let a = run(&exp.train)?;
    let b = run(&exp.train)?;
    ensure!(a == b, "two deterministic runs differ");
    ensure!(a.len() == 6, "expected 6 report rows, got {}", a.len());
    Ok(format!("{} rows bitwise equal", a.len()))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("assignment golden suite", criterion_1),
        ("parameter-budget parity", criterion_2),
        ("tied-gradient oracle", criterion_3),
        ("finite-difference gradient check", criterion_4),
        ("degeneracy equivalences", criterion_5),
        ("trainability matrix", criterion_6),
        ("speed ordering", criterion_7),
        ("NLL against wallclock", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                println!("FAIL {} {name} ({secs:.1}s): {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
