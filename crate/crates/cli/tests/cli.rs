use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn insertion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_insertion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[model]
d_model = 16
num_layers = 1
num_heads = 2
d_ff = 32
max_positions = 16

[train]
steps = 20
batch_size = 8
checkpoint_interval = 10

[task]
kind = "copy"
vocab_size = 6
max_length = 5
train_size = 40
dev_size = 8
"#;

fn train_tiny(dir: &Path) -> std::path::PathBuf {
    let config = dir.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let run = dir.join("run");
    let out = insertion(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    run
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(insertion(&["--help"]).status.code(), Some(0));
    assert_eq!(insertion(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(insertion(&["decode", "--checkpoint", "x.insr"]).status.code(), Some(1));
}

#[test]
fn unknown_override_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = insertion(&["train", "--set", "train.stpes=3", "--run-dir", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("stpes"), "{}", stderr(&out));
    assert!(!run.exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let out = insertion(&["decode", "--checkpoint", "/nonexistent/ckpt.insr", "--tokens", "w0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_decode_trace_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    for name in ["config.effective", "metrics.log", "ckpt-10.insr", "ckpt-20.insr"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.log")).unwrap().lines().count(), 20);
    let ckpt = run.join("ckpt-20.insr");
    let ckpt = ckpt.to_str().unwrap();

    let trace = dir.path().join("out.trace");
    let out = insertion(&[
        "decode",
        "--checkpoint",
        ckpt,
        "--tokens",
        "w1 w2 w3",
        "--mode",
        "parallel",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 1);

    let rendered = insertion(&["trace-render", trace.to_str().unwrap()]);
    assert!(rendered.status.success(), "{}", stderr(&rendered));
    let text = stdout(&rendered);
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("# parallel | source: w1 w2 w3 | output: "), "{header}");
    let steps = fs::read_to_string(&trace).unwrap().lines().count() - 1;
    assert_eq!(text.lines().count(), steps + 1);

    let eval_dir = dir.path().join("eval");
    let out = insertion(&[
        "eval",
        "--config",
        run.join("config.effective").to_str().unwrap(),
        "--checkpoint",
        ckpt,
        "--out-dir",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("accuracy"));
    assert!(eval_dir.join("report.txt").exists());
    assert!(eval_dir.join("iterations.tsv").exists());
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let resumed = dir.path().join("resumed");
    let out = insertion(&[
        "train",
        "--config",
        dir.path().join("tiny.toml").to_str().unwrap(),
        "--set",
        "train.steps=30",
        "--run-dir",
        resumed.to_str().unwrap(),
        "--resume",
        run.join("ckpt-20.insr").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(resumed.join("ckpt-30.insr").exists());
    assert_eq!(fs::read_to_string(resumed.join("metrics.log")).unwrap().lines().count(), 10);
}

#[test]
fn beta_sweep_reports_every_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = insertion(&[
        "eval",
        "--config",
        run.join("config.effective").to_str().unwrap(),
        "--checkpoint",
        run.join("ckpt-20.insr").to_str().unwrap(),
        "--sweep-beta",
        "0:7:0.5",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(out_dir.join("sweep.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 15);
    assert_eq!(rows.iter().filter(|r| r.ends_with('*')).count(), 1);
    assert!(rows[0].starts_with("0.00\t"));
    assert!(rows[14].starts_with("7.00\t"));

    let bad = insertion(&[
        "eval",
        "--config",
        run.join("config.effective").to_str().unwrap(),
        "--checkpoint",
        run.join("ckpt-20.insr").to_str().unwrap(),
        "--sweep-beta",
        "0:7",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn unknown_input_token_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path());
    let input = dir.path().join("in.txt");
    fs::write(&input, "w1 w2\nw1 nope\n").unwrap();
    let out = insertion(&[
        "decode",
        "--checkpoint",
        run.join("ckpt-20.insr").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("line 2") && err.contains("nope"), "{err}");
}

#[test]
fn empty_trace_renders_its_header() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("empty.trace");
    fs::write(
        &trace,
        "{\"kind\":\"header\",\"mode\":\"greedy\",\"source\":[\"a\"],\"output\":[],\"truncated\":true,\"steps\":0}\n",
    )
    .unwrap();
    let out = insertion(&["trace-render", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "# greedy | source: a | output:  | truncated\n");

    fs::write(&trace, "{\"kind\":\"step\"\n").unwrap();
    assert_eq!(insertion(&["trace-render", trace.to_str().unwrap()]).status.code(), Some(2));
}
