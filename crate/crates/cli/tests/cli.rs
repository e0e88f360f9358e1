use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn layershare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layershare"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/micro-copy")
}

const SMALL: &str = "\
[model]
d_model = 16
n_heads = 2
d_ff = 32
vocab_size = 12
enc_layers = 2
dec_layers = 2
enc_blocks = 1
dec_blocks = 1
[train]
max_steps = 30
eval_interval = 10
batch_tokens = 120
warmup_steps = 10
valid_samples = 20
[bench]
baseline = shallow
trials = 2
trial_batches = 10
warmup_batches = 1
[bench.shallow]
enc_layers = 2
dec_layers = 2
[bench.deep]
enc_layers = 4
dec_layers = 4
strategy = cycle_rev
";

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.conf");
    fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn plan_prints_assignment_and_json() {
    let o = layershare(&["plan", "--layers", "6", "--blocks", "3", "--strategy", "cycle_rev"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layer 1 → block 1");
    assert_eq!(lines[3], "layer 4 → block 3");
    assert_eq!(lines[5], "layer 6 → block 1");
    assert_eq!(lines[6], r#"{"N":6,"M":3,"strategy":"cycle_rev","blocks":[1,2,3,3,2,1]}"#);

    let o = layershare(&["plan", "--layers", "4", "--blocks", "2", "--strategy", "cycle"]);
    assert!(stdout(&o).contains(r#""blocks":[1,2,1,2]"#));
}

#[test]
fn invalid_plan_exits_with_usage_status() {
    let o = layershare(&["plan", "--layers", "7", "--blocks", "3", "--strategy", "sequence"]);
    assert_eq!(o.status.code(), Some(2));
    let o = layershare(&["plan", "--layers", "3", "--blocks", "4", "--strategy", "cycle"]);
    assert_eq!(o.status.code(), Some(2));
    let o = layershare(&["plan", "--layers", "3", "--blocks", "1", "--strategy", "zigzag"]);
    assert_eq!(o.status.code(), Some(2));
}

fn total(o: &Output) -> usize {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("total")).expect("total line");
    line.split_whitespace().last().unwrap().parse().unwrap()
}

#[test]
fn params_reports_totals() {
    let tiny = layershare(&["--preset", "tiny", "params"]);
    assert!(tiny.status.success());
    assert_eq!(total(&tiny), 472);
    let base = total(&layershare(&["--preset", "base", "params"]));
    assert!((60_000_000..62_000_000).contains(&base), "{base}");
}

#[test]
fn missing_or_bad_config_is_a_usage_error() {
    assert_eq!(layershare(&["params"]).status.code(), Some(2));
    assert_eq!(layershare(&["--preset", "nope", "params"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "[model]\nn_heads = 3\nd_model = 16\n").unwrap();
    let o = layershare(&["--config", bad.to_str().unwrap(), "params"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_report_checkpoint_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = layershare(&["--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap(), "--deterministic", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let steps: Vec<u64> = report.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, [10, 20, 30]);
    assert!(out.join("checkpoint/manifest.txt").exists());
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = train"));
    assert!(manifest.contains("seed = 5"));

    // The manifest is itself a config: rerunning from it reproduces the report.
    let again = dir.path().join("again");
    let o = layershare(&[
        "--config",
        out.join("manifest.txt").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "train",
    ]);
    assert!(o.status.success());
    let strip = |t: &str| -> Vec<String> {
        t.lines().map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            format!("{},{},{}", f[0], f[2], f[3])
        }).collect()
    };
    assert_eq!(strip(&fs::read_to_string(again.join("report.csv")).unwrap()), strip(&report));
}

#[test]
fn strict_divergence_exits_with_status_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.conf");
    fs::write(&cfg, SMALL.replace("warmup_steps = 10", "warmup_steps = 1\nlr_scale = 1e30")).unwrap();
    let out = dir.path().join("run");
    let args = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let o = layershare(&[&args[..], &["--strict", "train"]].concat());
    assert_eq!(o.status.code(), Some(3));
    let o = layershare(&[&args[..], &["train"]].concat());
    assert_eq!(o.status.code(), Some(0));
    assert!(fs::read_to_string(out.join("report.csv")).unwrap().contains(",nan,nan,"));
}

#[test]
fn eval_on_shipped_checkpoint_meets_frozen_threshold() {
    let expected = fs::read_to_string(fixture().join("expected.txt")).unwrap();
    let threshold: f64 = expected
        .lines()
        .find_map(|l| l.strip_prefix("min_accuracy = "))
        .unwrap()
        .parse()
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fixture().join("checkpoint");
    let o = layershare(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let accuracy: f64 = line
        .split_whitespace()
        .find_map(|f| f.strip_prefix("accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(line.contains("samples=200"), "{line}");
    assert!(accuracy >= threshold, "{line}");
    assert_eq!(fs::read_to_string(dir.path().join("eval.txt")).unwrap().trim(), line.trim());
}

#[test]
fn bench_writes_comparison_with_unit_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("bench");
    let o = layershare(&["--config", &cfg, "--out", out.to_str().unwrap(), "bench"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("name,strategy,M,N,params,tokens_per_s,relative_speed"));
    let shallow: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(shallow[0], "shallow");
    assert_eq!(shallow[6].parse::<f64>().unwrap(), 1.0);
    let deep: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!((deep[0], deep[1], deep[2], deep[3]), ("deep", "cycle_rev", "1", "4"));
    assert!(!out.join("nll.svg").exists());
}
