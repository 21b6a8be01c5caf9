//! Command-line entry point: benchmarks, parameter accounting, gradient
//! checks, toy training and the oracle suites.
//!
//! Exit status is 0 on success, 1 when a check fails and 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperconformer::configs::{
    count_params, head_reduction, reference_params_m, EncoderConfig, GiKind, ModelKind, Preset, Scope, PARAM_TOLERANCE,
};
use hyperconformer::harness::{
    emit_report, run_head_bench, run_scaling_bench, summarize, train_toy, BenchModel, BenchOptions, BenchRecord,
    ToyTask, ToyTaskKind, TrainOptions, BENCH_SECONDS,
};
use hyperconformer::verify::{gradcheck_module, run_all, GRAD_MODULES, GRAD_TOLERANCE};
use hyperconformer::Error;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "hyperconformer", version, about = "HyperConformer efficiency and verification harness")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// `key = value` file overriding the preset (or toy) configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print a single JSON object instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encoder forward time and peak memory against input length.
    BenchScaling(BenchScaling),
    /// HyperConformer at several head counts.
    BenchHeads(BenchHeads),
    /// Parameter count of a preset model.
    Params(ParamsCmd),
    /// Central finite-difference gradient check of one module.
    Gradcheck(GradcheckCmd),
    /// Train a toy model on a synthetic task.
    TrainToy(TrainToyCmd),
    /// Run every oracle-equivalence suite.
    Verify,
}

#[derive(Args, Debug)]
struct BenchCommon {
    #[arg(long, default_value = "small")]
    preset: Preset,
    /// Input lengths in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = BENCH_SECONDS.to_vec())]
    lengths: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    /// Output directory for the CSV and SVG files.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchScaling {
    #[command(flatten)]
    common: BenchCommon,
    #[arg(long, value_delimiter = ',', default_value = "conformer,hyperconformer")]
    models: Vec<ModelKind>,
}

#[derive(Args, Debug)]
struct BenchHeads {
    #[command(flatten)]
    common: BenchCommon,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    heads: Vec<usize>,
}

#[derive(Args, Debug)]
struct ParamsCmd {
    #[arg(long, default_value = "small")]
    preset: Preset,
    #[arg(long, default_value = "hyperconformer")]
    model: ModelKind,
    #[arg(long, default_value = "full")]
    scope: Scope,
}

#[derive(Args, Debug)]
struct GradcheckCmd {
    /// Module name, or `all`.
    #[arg(long, default_value = "all")]
    module: String,
}

#[derive(Args, Debug)]
struct TrainToyCmd {
    #[arg(long, default_value = "first-token-match")]
    task: ToyTaskKind,
    #[arg(long, default_value = "hyperconformer")]
    model: ModelKind,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 7)]
    kernel: usize,
}

/// Result of a command: what to print, and whether its checks passed.
struct Outcome {
    text: String,
    json: Value,
    passed: bool,
}

fn configured(base: EncoderConfig, path: Option<&Path>) -> hyperconformer::Result<EncoderConfig> {
    match path {
        Some(p) => EncoderConfig::load(&base, p),
        None => Ok(base),
    }
}

fn bench_outcome(records: &[BenchRecord], common: &BenchCommon, basename: &str) -> hyperconformer::Result<Outcome> {
    let (csv, svg) = emit_report(records, &common.out, basename)?;
    let summaries = summarize(records);
    let mut text = format!("{:<24} {:>8} {:>8} {:>12} {:>14} {:>16}\n", "model", "seconds", "frames", "median [s]", "peak bytes", "flops");
    for s in &summaries {
        text += &format!(
            "{:<24} {:>8} {:>8} {:>12.4} {:>14} {:>16}\n",
            s.model, s.seq_seconds, s.n_frames, s.median_seconds, s.peak_bytes, s.flops
        );
    }
    text += &format!("wrote {} and {}", csv.display(), svg.display());
    Ok(Outcome {
        text,
        json: json!({ "csv": csv, "svg": svg, "summaries": summaries }),
        passed: true,
    })
}

fn bench_options(common: &BenchCommon, seed: u64) -> BenchOptions {
    BenchOptions {
        repeats: common.repeats,
        warmups: common.warmups,
        seed,
    }
}

fn run(cli: &Cli) -> hyperconformer::Result<Outcome> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::BenchScaling(b) => {
            let models = b
                .models
                .iter()
                .map(|&m| {
                    Ok(BenchModel {
                        name: m.name().to_string(),
                        cfg: configured(EncoderConfig::preset(b.common.preset, m), config)?,
                    })
                })
                .collect::<hyperconformer::Result<Vec<_>>>()?;
            let records = run_scaling_bench(&models, &b.common.lengths, &bench_options(&b.common, cli.seed))?;
            bench_outcome(&records, &b.common, &format!("scaling-{}", b.common.preset.name()))
        }
        Command::BenchHeads(b) => {
            let records = match config {
                None => run_head_bench(b.common.preset, &b.heads, &b.common.lengths, &bench_options(&b.common, cli.seed))?,
                Some(_) => {
                    let base = configured(EncoderConfig::preset(b.common.preset, ModelKind::HyperConformer), config)?;
                    let models: Vec<BenchModel> = b
                        .heads
                        .iter()
                        .map(|&k| BenchModel {
                            name: format!("hyperconformer-k{k}"),
                            cfg: base.with_heads(k),
                        })
                        .collect();
                    for m in &models {
                        m.cfg.validate()?;
                    }
                    run_scaling_bench(&models, &b.common.lengths, &bench_options(&b.common, cli.seed))?
                }
            };
            bench_outcome(&records, &b.common, &format!("heads-{}", b.common.preset.name()))
        }
        Command::Params(p) => {
            let cfg = configured(EncoderConfig::preset(p.preset, p.model), config)?;
            let count = count_params(&cfg, p.scope)?;
            let millions = count.total as f64 / 1e6;
            // targets only apply to the unmodified presets at full scope
            let target = match (p.scope, config) {
                (Scope::Full, None) => reference_params_m(p.preset, p.model),
                _ => None,
            };
            let passed = target.is_none_or(|t| (millions - t).abs() <= PARAM_TOLERANCE * t);
            let mut text = format!(
                "{}-{} {:?} parameters: {} ({millions:.2}M)\n  encoder {} decoder {} embedding {} ctc head {}",
                p.model.name(),
                p.preset.name(),
                p.scope,
                count.total,
                count.encoder,
                count.decoder,
                count.embedding,
                count.ctc_head
            );
            if let Some(t) = target {
                let status = if passed { "PASS" } else { "FAIL" };
                text += &format!("\n  target {t}M ±{:.0}%: {status}", 100.0 * PARAM_TOLERANCE);
            }
            let reduction = if cfg.gi_kind == GiKind::HyperMixer && cfg.heads != 1 {
                let r = head_reduction(&cfg)?;
                text += &format!("\n  k=1→k={} full-model reduction {r:.1}%", cfg.heads);
                Some(r)
            } else {
                None
            };
            Ok(Outcome {
                text,
                json: json!({
                    "model": p.model.name(),
                    "preset": p.preset.name(),
                    "scope": format!("{:?}", p.scope).to_lowercase(),
                    "counts": count,
                    "millions": millions,
                    "target_millions": target,
                    "head_reduction_percent": reduction,
                    "passed": passed,
                }),
                passed,
            })
        }
        Command::Gradcheck(g) => {
            let modules: Vec<&str> = if g.module == "all" { GRAD_MODULES.to_vec() } else { vec![g.module.as_str()] };
            let mut text = String::new();
            let mut rows = Vec::new();
            let mut passed = true;
            for m in modules {
                let r = gradcheck_module(m, cli.seed)?;
                let ok = r.passes(GRAD_TOLERANCE);
                passed &= ok;
                let worst = r.worst.as_ref().map(|(p, i)| format!("{p}[{i}]")).unwrap_or_default();
                text += &format!(
                    "{m:<24} max relative error {:.3e} over {} entries {worst} {}\n",
                    r.max_rel_error,
                    r.entries_checked,
                    if ok { "PASS" } else { "FAIL" }
                );
                rows.push(json!({
                    "module": m,
                    "max_rel_error": r.max_rel_error,
                    "entries_checked": r.entries_checked,
                    "worst": worst,
                    "passed": ok,
                }));
            }
            text.pop();
            Ok(Outcome {
                text,
                json: json!({ "seed": cli.seed, "tolerance": GRAD_TOLERANCE, "modules": rows, "passed": passed }),
                passed,
            })
        }
        Command::TrainToy(t) => {
            let task = ToyTask::standard(t.task, cli.seed);
            let cfg = configured(EncoderConfig::toy(t.model, t.d_model, t.layers, t.heads, t.kernel), config)?;
            let opts = TrainOptions {
                epochs: t.epochs,
                steps_per_epoch: t.steps,
                seed: cli.seed,
                ..Default::default()
            };
            let report = train_toy(&task, &cfg, &opts)?;
            let mut text = format!(
                "{} on {} (N {}..{}, {} parameters)\n  initial accuracy {:.1}%",
                t.model.name(),
                t.task.name(),
                task.n_min,
                task.n_max,
                report.params,
                100.0 * report.initial_accuracy
            );
            for (e, (a, l)) in report.accuracy.iter().zip(&report.loss).enumerate() {
                text += &format!("\n  epoch {:>3} loss {l:.4} accuracy {:.1}%", e + 1, 100.0 * a);
            }
            Ok(Outcome {
                text,
                json: json!({
                    "model": t.model.name(),
                    "task": t.task.name(),
                    "config": cfg,
                    "options": opts,
                    "report": report,
                    "final_accuracy": report.final_accuracy(),
                }),
                passed: true,
            })
        }
        Command::Verify => {
            let report = run_all(cli.seed)?;
            let mut text = String::new();
            for s in &report.suites {
                text += &format!(
                    "{:<32} {:>5} cases  max error {:.3e}  tolerance {:.0e}  {}\n",
                    s.name,
                    s.cases,
                    s.max_error,
                    s.tolerance,
                    if s.passed { "PASS" } else { "FAIL" }
                );
            }
            text += if report.passed { "all suites passed" } else { "some suites failed" };
            Ok(Outcome {
                text,
                passed: report.passed,
                json: serde_json::to_value(&report).expect("report serializes"),
            })
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Input(_) | Error::Parse { .. } | Error::Capacity { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", out.json);
            } else {
                println!("{}", out.text);
            }
            ExitCode::from(if out.passed { 0 } else { 1 })
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "error": e.to_string() }));
            }
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
