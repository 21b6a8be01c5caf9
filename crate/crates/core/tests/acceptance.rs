//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! to the real stdout (not the captured one) before asserting.
//!
//! The tests share a lock so the wall-time comparison never overlaps with
//! the training or gradient-check workloads.

use std::io::Write as _;
use std::sync::Mutex;

use hyperconformer::configs::{
    count_params, head_reduction, reference_head_reduction, reference_params_m, EncoderConfig, GiKind, ModelKind,
    Preset, Scope, HEAD_REDUCTION_TOLERANCE, PARAM_TOLERANCE,
};
use hyperconformer::conformer::gi_flops;
use hyperconformer::harness::bench::find;
use hyperconformer::harness::{
    gi_probe, log_log_slope, run_scaling_bench, summarize, train_toy, BenchModel, BenchOptions, ToyTask, ToyTaskKind,
    TrainOptions,
};
use hyperconformer::hypermixer::mhhm_flops;
use hyperconformer::verify::{gradcheck_module, run_all, GRAD_MODULES, GRAD_TOLERANCE};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(label: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{status} {label}: {detail}");
    let _ = out.flush();
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn parameter_counts() {
    let _g = serial();
    let mut ok = true;
    let mut detail = Vec::new();
    for preset in [Preset::Small, Preset::Medium] {
        let total = |m| count_params(&EncoderConfig::preset(preset, m), Scope::Full).unwrap().total as f64 / 1e6;
        let [t, hm, c, hc] = [ModelKind::Transformer, ModelKind::HyperMixer, ModelKind::Conformer, ModelKind::HyperConformer]
            .map(|m| {
                let got = total(m);
                let want = reference_params_m(preset, m).unwrap();
                let within = (got - want).abs() <= PARAM_TOLERANCE * want;
                ok &= within;
                detail.push(format!("{}-{} {got:.2}M/{want}M", m.name(), preset.name()));
                got
            });
        ok &= hc < c && hm < t;
    }
    report("parameter counts", ok, &detail.join(", "));
    assert!(ok);
}

#[test]
fn head_count_reduction() {
    let _g = serial();
    let mut ok = true;
    let mut detail = Vec::new();
    for preset in [Preset::Small, Preset::Medium] {
        let want = reference_head_reduction(preset);
        let mut any = false;
        for tied in [false, true] {
            let cfg = EncoderConfig {
                tied_hypernets: tied,
                ..EncoderConfig::preset(preset, ModelKind::HyperConformer)
            };
            let got = head_reduction(&cfg).unwrap();
            any |= (got - want).abs() <= HEAD_REDUCTION_TOLERANCE;
            detail.push(format!("{} tied={tied} {got:.1}% (want {want}±{HEAD_REDUCTION_TOLERANCE})", preset.name()));
        }
        ok &= any;
    }
    report("head-count parameter reduction", ok, &detail.join(", "));
    assert!(ok, "{}", detail.join(", "));
}

#[test]
fn flop_asymptotics() {
    let _g = serial();
    let ns = [600usize, 1200, 1800, 2400, 3000];
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let slope = |model| {
        let cfg = EncoderConfig::small(model);
        let ys: Vec<f64> = ns.iter().map(|&n| gi_flops(&cfg, n) as f64).collect();
        log_log_slope(&xs, &ys)
    };
    let (mixer, mhsa) = (slope(ModelKind::HyperConformer), slope(ModelKind::Conformer));
    let cfg = EncoderConfig::small(ModelKind::HyperConformer);
    let split = ns.iter().all(|&n| {
        let one = mhhm_flops(n, cfg.d_model, cfg.d_prime, 1).token_mixing;
        let eight = mhhm_flops(n, cfg.d_model, cfg.d_prime, 8).token_mixing;
        8 * eight == one
    });
    let ok = mixer <= 1.05 && mhsa >= 1.5 && split;
    report(
        "flop asymptotics",
        ok,
        &format!("mixer slope {mixer:.4}, mhsa slope {mhsa:.4}, k=8 token mixing = k=1/8: {split}"),
    );
    assert!(ok);
}

/// One shared run covering both the wall-time and memory comparisons.
fn small_preset_bench() -> Vec<hyperconformer::harness::BenchSummary> {
    let models = [
        BenchModel::preset(Preset::Small, ModelKind::Conformer),
        BenchModel::preset(Preset::Small, ModelKind::HyperConformer),
    ];
    let records = run_scaling_bench(&models, &[12.0, 18.0, 24.0, 30.0], &BenchOptions::default()).unwrap();
    summarize(&records)
}

#[test]
fn wall_time_and_memory_direction() {
    let _g = serial();
    let s = small_preset_bench();
    let get = |m: &str, sec: f64| find(&s, m, sec).unwrap();

    let gap = |sec| {
        let (c, h) = (get("conformer", sec).median_seconds, get("hyperconformer", sec).median_seconds);
        (c, h, (c - h) / c)
    };
    let (c18, h18, g18) = gap(18.0);
    let (c30, h30, g30) = gap(30.0);
    let time_ok = h18 < c18 && h30 < c30 && g30 > g18;
    report(
        "wall-time direction",
        time_ok,
        &format!(
            "18s conformer {c18:.3}s hyperconformer {h18:.3}s ({:.1}%), 30s {c30:.3}s vs {h30:.3}s ({:.1}%)",
            100.0 * g18,
            100.0 * g30
        ),
    );

    let mut peak_ok = true;
    let mut detail = Vec::new();
    for sec in [12.0, 18.0, 24.0, 30.0] {
        let (c, h) = (get("conformer", sec).peak_bytes, get("hyperconformer", sec).peak_bytes);
        peak_ok &= h < c;
        detail.push(format!("{sec}s {c}/{h}"));
    }
    let (d, dp, k) = (144, 576, 8);
    let ratio = |kind| {
        let (a, _) = gi_probe(kind, d, dp, k, 1200, 0).unwrap();
        let (b, _) = gi_probe(kind, d, dp, k, 2400, 0).unwrap();
        b as f64 / a as f64
    };
    let (mixer, mhsa) = (ratio(GiKind::HyperMixer), ratio(GiKind::Mhsa));
    let mem_ok = peak_ok && (1.8..=2.2).contains(&mixer) && mhsa >= 2.8;
    report(
        "memory direction",
        mem_ok,
        &format!(
            "peak bytes conformer/hyperconformer {}; GI peak ratio 2400/1200 mixer {mixer:.3}, mhsa {mhsa:.3}",
            detail.join(", ")
        ),
    );
    assert!(time_ok && mem_ok);
}

#[test]
fn gradient_suite() {
    let _g = serial();
    let mut worst = (0.0, String::new());
    let mut failures = Vec::new();
    for seed in [0, 1, 2] {
        for module in GRAD_MODULES {
            let r = gradcheck_module(module, seed).unwrap();
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, format!("{module} seed {seed}"));
            }
            if !r.passes(GRAD_TOLERANCE) {
                failures.push(format!("{module}@{seed}={:.2e}", r.max_rel_error));
            }
        }
    }
    let ok = failures.is_empty();
    report(
        "gradient checks",
        ok,
        &format!("{} modules x 3 seeds, worst {:.2e} ({}) {}", GRAD_MODULES.len(), worst.0, worst.1, failures.join(" ")),
    );
    assert!(ok);
}

fn suites(names: &[&str]) -> (bool, String) {
    let r = run_all(0).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for name in names {
        let s = r.suites.iter().find(|s| s.name == *name).expect("suite exists");
        ok &= s.passed;
        detail.push(format!("{} {} cases max {:.1e} tol {:.0e}", s.name, s.cases, s.max_error, s.tolerance));
    }
    (ok, detail.join("; "))
}

#[test]
fn oracle_equivalence() {
    let _g = serial();
    let (ok, detail) = suites(&["ctc-path-enumeration", "mhsa-per-head-dense", "mhhm-slice-concat", "tm-mlp-per-feature"]);
    report("oracle equivalence", ok, &detail);
    assert!(ok);
}

#[test]
fn equivariance_and_locality() {
    let _g = serial();
    let (ok, detail) = suites(&["permutation-equivariance", "conv-locality"]);
    report("equivariance and locality", ok, &detail);
    assert!(ok);
}

#[test]
fn toy_learning() {
    let _g = serial();
    let task = ToyTask::standard(ToyTaskKind::FirstTokenMatch, 0);
    let opts = TrainOptions::default();
    let acc = |model| {
        let cfg = EncoderConfig::toy(model, 32, 2, 2, 7);
        train_toy(&task, &cfg, &opts).unwrap().final_accuracy()
    };
    let (hc, c, conv) = (acc(ModelKind::HyperConformer), acc(ModelKind::Conformer), acc(ModelKind::ConvOnly));
    let ok = hc >= 0.95 && c >= 0.95 && conv <= 0.70;
    report(
        "toy learning",
        ok,
        &format!(
            "first-token-match N {}..{}, {} epochs: hyperconformer {:.1}%, conformer {:.1}%, conv-only {:.1}%",
            task.n_min,
            task.n_max,
            opts.epochs,
            100.0 * hc,
            100.0 * c,
            100.0 * conv
        ),
    );
    assert!(ok);
}

#[test]
fn verify_is_reproducible() {
    let _g = serial();
    let a = serde_json::to_string(&run_all(42).unwrap()).unwrap();
    let b = serde_json::to_string(&run_all(42).unwrap()).unwrap();
    let ok = a == b && run_all(42).unwrap().passed;
    report("verify reproducibility", ok, &format!("{} bytes of JSON, identical: {}", a.len(), a == b));
    assert!(ok);
}
