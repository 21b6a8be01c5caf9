//! Sequence-length and head-count benchmarks.
//!
//! Inputs are seeded random `(100·seconds)×80` feature matrices, processed
//! one sequence at a time. Every forward pass runs with gradient recording
//! on, as during training, so peak bytes include the activations kept for
//! the backward pass. Timings include the convolutional frontend, which is
//! identical for all models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mhsa_forward, MhsaParams};
use crate::configs::{EncoderConfig, GiKind, ModelKind, Preset};
use crate::conformer::{encoder_forward, subsampled_len, EncoderParams, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::hypermixer::{mhhm_forward, MhhmParams};
use crate::init::Init;
use crate::position::PositionTable;
use crate::tensor::{measure, Tensor};

/// Input frame rate (10 ms hop).
pub const FRAMES_PER_SECOND: usize = 100;
pub const BENCH_SECONDS: [f64; 5] = [6.0, 12.0, 18.0, 24.0, 30.0];
pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_WARMUPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub model: String,
    pub gi_kind: String,
    pub heads: usize,
    pub d_model: usize,
    pub seq_seconds: f64,
    pub n_frames: usize,
    pub repeat: usize,
    pub duration_seconds: f64,
    pub peak_bytes: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repeats: DEFAULT_REPEATS,
            warmups: DEFAULT_WARMUPS,
            seed: 0,
        }
    }
}

pub fn input_frames(seconds: f64) -> usize {
    (seconds * FRAMES_PER_SECOND as f64).round() as usize
}

/// Seeded standard-uniform features; the same for every model at a length.
pub fn random_features(frames: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ frames as u64);
    let data = (0..frames * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[frames, FEATURE_DIM], data).expect("feature shape")
}

/// A named configuration to benchmark.
#[derive(Debug, Clone)]
pub struct BenchModel {
    pub name: String,
    pub cfg: EncoderConfig,
}

impl BenchModel {
    pub fn preset(preset: Preset, model: ModelKind) -> Self {
        BenchModel {
            name: model.name().to_string(),
            cfg: EncoderConfig::preset(preset, model),
        }
    }
}

/// Times full encoder forward passes for every model and length.
///
/// Models are interleaved within each repeat so that background load on the
/// host affects all of them alike. Records come out grouped by model, then
/// length, then repeat.
pub fn run_scaling_bench(models: &[BenchModel], seconds: &[f64], opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    if opts.repeats == 0 {
        return Err(Error::Usage("repeats must be at least 1".into()));
    }
    let encoders = models.iter().map(|m| EncoderParams::new(&m.cfg, opts.seed)).collect::<Result<Vec<_>>>()?;
    let mut per_model: Vec<Vec<BenchRecord>> = vec![Vec::new(); models.len()];
    for &s in seconds {
        let frames = input_frames(s);
        let feats = random_features(frames, opts.seed);
        for enc in &encoders {
            for _ in 0..opts.warmups {
                encoder_forward(&feats, enc)?;
            }
        }
        for repeat in 0..opts.repeats {
            for ((m, enc), out) in models.iter().zip(&encoders).zip(per_model.iter_mut()) {
                let (n, stats) = measure(|| encoder_forward(&feats, enc).map(|y| y.rows()));
                let n = n?;
                debug_assert_eq!(n, subsampled_len(frames));
                out.push(BenchRecord {
                    model: m.name.clone(),
                    gi_kind: m.cfg.gi_kind.to_string(),
                    heads: m.cfg.heads,
                    d_model: m.cfg.d_model,
                    seq_seconds: s,
                    n_frames: n,
                    repeat,
                    duration_seconds: stats.duration.as_secs_f64(),
                    peak_bytes: stats.peak_bytes,
                    flops: stats.flops,
                });
            }
        }
    }
    Ok(per_model.concat())
}

/// HyperConformer at each head count, identical seeds.
pub fn run_head_bench(preset: Preset, heads: &[usize], seconds: &[f64], opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    let models: Vec<BenchModel> = heads
        .iter()
        .map(|&k| BenchModel {
            name: format!("hyperconformer-k{k}"),
            cfg: EncoderConfig::preset(preset, ModelKind::HyperConformer).with_heads(k),
        })
        .collect();
    run_scaling_bench(&models, seconds, opts)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median duration, and the peak bytes and FLOPs, of one model at one length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub model: String,
    pub seq_seconds: f64,
    pub n_frames: usize,
    pub median_seconds: f64,
    pub peak_bytes: u64,
    pub flops: u64,
}

pub fn summarize(records: &[BenchRecord]) -> Vec<BenchSummary> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(m, s)| *m == r.model && *s == r.seq_seconds) {
            keys.push((r.model.clone(), r.seq_seconds));
        }
    }
    keys.into_iter()
        .map(|(model, s)| {
            let group: Vec<&BenchRecord> = records.iter().filter(|r| r.model == model && r.seq_seconds == s).collect();
            let times: Vec<f64> = group.iter().map(|r| r.duration_seconds).collect();
            BenchSummary {
                n_frames: group[0].n_frames,
                median_seconds: median(&times),
                peak_bytes: group.iter().map(|r| r.peak_bytes).max().unwrap_or(0),
                flops: group[0].flops,
                model,
                seq_seconds: s,
            }
        })
        .collect()
}

pub fn find<'a>(summaries: &'a [BenchSummary], model: &str, seconds: f64) -> Option<&'a BenchSummary> {
    summaries.iter().find(|s| s.model == model && s.seq_seconds == seconds)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Peak bytes and FLOPs of one global interaction module (no pre-norm) on
/// an `n×d` input, gradient recording on.
pub fn gi_probe(kind: GiKind, d: usize, d_prime: usize, heads: usize, n: usize, seed: u64) -> Result<(u64, u64)> {
    let mut init = Init::new(seed);
    let x = init.uniform("x", &[n, d], 1.0).value().detach();
    let table = PositionTable::new(n.max(1), d);
    let stats = match kind {
        GiKind::Mhsa => {
            let p = MhsaParams::new(d, heads, &mut init)?;
            let (y, s) = measure(|| mhsa_forward(&x, &p, None).map(drop));
            y?;
            s
        }
        GiKind::HyperMixer => {
            let cfg = EncoderConfig {
                d_model: d,
                d_prime,
                heads,
                ..EncoderConfig::small(ModelKind::HyperConformer)
            };
            let p = MhhmParams::new(d, d_prime, heads, cfg.hypernet_hidden, cfg.tied_hypernets, cfg.mixer_norm, &mut init)?;
            let (y, s) = measure(|| mhhm_forward(&x, &p, Some(&table)).map(drop));
            y?;
            s
        }
        GiKind::None => return Err(Error::Usage("no global interaction module to probe".into())),
    };
    Ok((stats.peak_bytes, stats.flops))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts_follow_length_formula() {
        assert_eq!(input_frames(30.0), 3000);
        assert_eq!(subsampled_len(input_frames(30.0)), 749);
        assert_eq!(subsampled_len(input_frames(6.0)), 149);
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((log_log_slope(&xs, &ys) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn tiny_bench_records_every_repeat() {
        let cfg = EncoderConfig::toy(ModelKind::HyperConformer, 8, 1, 2, 3);
        let models = [BenchModel { name: "toy".into(), cfg }];
        let opts = BenchOptions { repeats: 3, warmups: 1, seed: 1 };
        let recs = run_scaling_bench(&models, &[0.2, 0.4], &opts).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().all(|r| r.peak_bytes > 0 && r.flops > 0 && r.n_frames > 0));
        // engine-counted peaks are deterministic
        assert!(recs[..3].iter().all(|r| r.peak_bytes == recs[0].peak_bytes));
        assert_eq!(summarize(&recs).len(), 2);
    }

    #[test]
    fn mixer_probe_grows_linearly() {
        let (a, _) = gi_probe(GiKind::HyperMixer, 16, 32, 2, 200, 0).unwrap();
        let (b, _) = gi_probe(GiKind::HyperMixer, 16, 32, 2, 400, 0).unwrap();
        let r = b as f64 / a as f64;
        assert!((1.8..=2.2).contains(&r), "{r}");
    }
}
