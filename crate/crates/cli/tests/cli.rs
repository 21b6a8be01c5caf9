use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperconformer")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn params_prints_count_and_pass() {
    let o = cli(&["params", "--preset", "small", "--model", "hyperconformer", "--scope", "full"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS"), "{text}");
    assert!(text.contains("7.66M"), "{text}");
}

#[test]
fn params_json_is_one_object() {
    let o = cli(&["--json", "params", "--preset", "medium", "--model", "transformer"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["model"], "transformer");
    assert_eq!(v["passed"], true);
    let m = v["millions"].as_f64().unwrap();
    assert!((m - 16.2).abs() <= 0.1 * 16.2, "{m}");
}

#[test]
fn encoder_scope_has_no_target() {
    let o = cli(&["params", "--model", "conformer", "--scope", "encoder"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("target"));
}

#[test]
fn unknown_model_lists_valid_ones() {
    let o = cli(&["bench-scaling", "--models", "conformer,lstm"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for m in ["transformer", "hypermixer", "conformer", "hyperconformer", "conv-only"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn unknown_command_and_flag_are_usage_errors() {
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&["params", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&["gradcheck", "--module", "lstm"]).status.code(), Some(2));
}

#[test]
fn gradcheck_hypermixer_passes() {
    let o = cli(&["gradcheck", "--module", "hypermixer", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = cli(&["--json", "gradcheck", "--module", "hypermixer", "--seed", "7"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["modules"][0]["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn verify_twice_is_bit_identical() {
    let a = cli(&["--json", "verify", "--seed", "11"]);
    let b = cli(&["--json", "verify", "--seed", "11"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn bench_scaling_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, "# tiny model\nd_model = 16\nn_layers = 1\nk = 2\nd_ffn = 32\nd_prime = 16\nkernel = 3\n").unwrap();
    let o = cli(&[
        "--config",
        cfg.to_str().unwrap(),
        "bench-scaling",
        "--models",
        "conformer,hyperconformer",
        "--lengths",
        "0.5,1",
        "--repeats",
        "2",
        "--warmups",
        "0",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("scaling-small.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    assert!(csv.starts_with("model,gi_kind,heads,d_model,seq_seconds,n_frames,repeat,duration_seconds,peak_bytes,flops\n"));
    assert!(csv.lines().skip(1).all(|l| l.contains(",16,")));
    assert!(dir.path().join("scaling-small.svg").exists());
}

#[test]
fn bad_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "depth = 3\n").unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "params"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
}

#[test]
fn train_toy_is_deterministic() {
    let args = [
        "--json", "train-toy", "--task", "global-majority", "--model", "hyperconformer", "--epochs", "2", "--steps", "3",
        "--d-model", "8", "--layers", "1", "--kernel", "3", "--seed", "5",
    ];
    let a = cli(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let v: serde_json::Value = serde_json::from_str(stdout(&a).trim()).unwrap();
    assert_eq!(v["report"]["accuracy"].as_array().unwrap().len(), 2);
    let b = cli(&args);
    // the report has no timing fields, so the whole object must repeat
    assert_eq!(a.stdout, b.stdout);
}
