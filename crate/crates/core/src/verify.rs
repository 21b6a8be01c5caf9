//! Oracle suites and gradient checks.
//!
//! Each oracle recomputes a result with plain loops over `Vec<f64>` (module
//! [`dense`]) and compares it with the engine. [`run_all`] produces a report
//! that depends only on the seed, so two runs serialize identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{mhsa_flops, mhsa_forward, MhsaParams};
use crate::configs::{EncoderConfig, ModelKind, Preset};
use crate::conformer::{
    blocks_flops, conformer_block, conv_module, encode_frames, encoder_forward, ffn_module, subsampled_len, BlockParams, ConvParams,
    EncoderParams, FfnParams, GlobalInteraction, Norm, NORM_EPS,
};
use crate::ctc::{self, CtcBatch};
use crate::error::{Error, Result};
use crate::hypermixer::{
    generate_weights, hypermixer_forward, mhhm_forward, tm_mlp, HiddenWidth, HyperNetParams, MhhmParams, MixerNorm,
    MixerShape, MIXER_EPS,
};
use crate::init::Init;
use crate::position::PositionTable;
use crate::tensor::gradcheck::{self, probed_loss, GradCheckReport};
use crate::tensor::{measure, no_grad, Module, Param, Tensor};

/// Plain-loop reference implementations on row-major matrices.
pub mod dense {
    pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    pub fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
        let mut y = matmul(x, n, din, w, dout);
        for i in 0..n {
            for j in 0..dout {
                y[i * dout + j] += b[j];
            }
        }
        y
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn map(x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        x.iter().map(|&v| f(v)).collect()
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn softmax_rows(x: &[f64], n: usize, c: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * c];
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                y[i * c + j] = (row[j] - m).exp() / z;
            }
        }
        y
    }

    /// Row-wise normalization with optional affine parameters.
    pub fn layer_norm_rows(x: &[f64], n: usize, d: usize, gain: Option<&[f64]>, bias: Option<&[f64]>, eps: f64) -> Vec<f64> {
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            for j in 0..d {
                let mut v = (row[j] - mean) / (var + eps).sqrt();
                if let Some(g) = gain {
                    v *= g[j];
                }
                if let Some(b) = bias {
                    v += b[j];
                }
                y[i * d + j] = v;
            }
        }
        y
    }

    pub fn layer_norm_cols(x: &[f64], n: usize, d: usize, eps: f64) -> Vec<f64> {
        transpose(&layer_norm_rows(&transpose(x, n, d), d, n, None, None, eps), d, n)
    }

    pub fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, dk: usize) -> Vec<f64> {
        let mut scores = matmul(q, n, dk, &transpose(k, n, dk), n);
        let scale = 1.0 / (dk as f64).sqrt();
        scores.iter_mut().for_each(|s| *s *= scale);
        matmul(&softmax_rows(&scores, n, n), n, n, v, dk)
    }

    pub fn depthwise(x: &[f64], n: usize, d: usize, w: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
        let r = (k - 1) / 2;
        let mut y = vec![0.0; n * d];
        for t in 0..n {
            for c in 0..d {
                let mut s = b[c];
                for j in 0..k {
                    let src = t as isize + j as isize - r as isize;
                    if src >= 0 && (src as usize) < n {
                        s += w[j * d + c] * x[src as usize * d + c];
                    }
                }
                y[t * d + c] = s;
            }
        }
        y
    }

    pub fn columns(x: &[f64], n: usize, d: usize, lo: usize, hi: usize) -> Vec<f64> {
        (0..n).flat_map(|i| x[i * d + lo..i * d + hi].to_vec()).collect()
    }

    pub fn concat_columns(parts: &[Vec<f64>], n: usize) -> Vec<f64> {
        let widths: Vec<usize> = parts.iter().map(|p| p.len() / n).collect();
        let mut out = Vec::new();
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p[i * w..(i + 1) * w]);
            }
        }
        out
    }
}

/// Outcome of one oracle suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Number of entries whose bit patterns differ.
fn bit_mismatches(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count() as f64
}

struct Suite {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    max_error: f64,
    /// Passing requires `max_error ≤ tolerance` instead of `<`.
    inclusive: bool,
}

impl Suite {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Suite {
            name,
            tolerance,
            cases: 0,
            max_error: 0.0,
            inclusive: false,
        }
    }

    fn exact(name: &'static str) -> Self {
        Suite {
            inclusive: true,
            ..Suite::new(name, 0.0)
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
    }

    fn finish(self) -> SuiteResult {
        let passed = self.cases > 0
            && if self.inclusive {
                self.max_error <= self.tolerance
            } else {
                self.max_error < self.tolerance
            };
        SuiteResult {
            name: self.name.to_string(),
            cases: self.cases,
            max_error: self.max_error,
            tolerance: self.tolerance,
            passed,
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn mat(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
    Tensor::from_vec(shape, data)
}

fn vals(p: &Param) -> Vec<f64> {
    p.value().to_vec()
}

fn suite_matmul(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("matmul", 1e-12);
    let hand = mat(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])?.matmul(&mat(&[2, 2], vec![5.0, 6.0, 7.0, 8.0])?)?;
    s.record(max_abs_diff(hand.data(), &[19.0, 22.0, 43.0, 50.0]));
    for &(m, k, n) in &[(1, 1, 1), (3, 4, 2), (7, 5, 6), (16, 9, 11)] {
        let (a, b) = (rand_vec(rng, m * k, 1.0), rand_vec(rng, k * n, 1.0));
        let got = mat(&[m, k], a.clone())?.matmul(&mat(&[k, n], b.clone())?)?;
        s.record(max_abs_diff(got.data(), &dense::matmul(&a, m, k, &b, n)));
    }
    Ok(s.finish())
}

fn suite_elementwise(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("softmax-layernorm-activations", 1e-12);
    let sm = mat(&[1, 3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()])?.softmax(1)?;
    s.record(max_abs_diff(sm.data(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]));
    // population variance of [1, 3] is 1
    let ln = mat(&[1, 2], vec![1.0, 3.0])?.layer_norm(1, None, None, NORM_EPS)?;
    let r = 1.0 / (1.0 + NORM_EPS).sqrt();
    s.record(max_abs_diff(ln.data(), &[-r, r]));
    let g6 = Tensor::scalar(6.0).gelu().item();
    s.record(if (5.99..=6.0).contains(&g6) { 0.0 } else { 1.0 });
    let box_out = mat(&[3, 1], vec![0.0, 1.0, 0.0])?.conv1d_depthwise(&mat(&[3, 1], vec![1.0; 3])?, None)?;
    s.record(max_abs_diff(box_out.data(), &[1.0, 1.0, 1.0]));
    for &(n, d) in &[(2, 3), (5, 4), (3, 8)] {
        let x = rand_vec(rng, n * d, 3.0);
        let t = mat(&[n, d], x.clone())?;
        s.record(max_abs_diff(t.softmax(1)?.data(), &dense::softmax_rows(&x, n, d)));
        s.record(max_abs_diff(t.gelu().data(), &dense::map(&x, dense::gelu)));
        s.record(max_abs_diff(t.swish().data(), &dense::map(&x, |v| v * dense::sigmoid(v))));
        let (g, b) = (rand_vec(rng, d, 1.0), rand_vec(rng, d, 1.0));
        let got = t.layer_norm(1, Some(&mat(&[d], g.clone())?), Some(&mat(&[d], b.clone())?), NORM_EPS)?;
        s.record(max_abs_diff(got.data(), &dense::layer_norm_rows(&x, n, d, Some(&g), Some(&b), NORM_EPS)));
        let k = 3;
        let (w, bias) = (rand_vec(rng, k * d, 1.0), rand_vec(rng, d, 1.0));
        let got = t.conv1d_depthwise(&mat(&[k, d], w.clone())?, Some(&mat(&[d], bias.clone())?))?;
        s.record(max_abs_diff(got.data(), &dense::depthwise(&x, n, d, &w, k, &bias)));
    }
    Ok(s.finish())
}

fn suite_attention(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("attention-dense", 1e-12);
    for &(n, dk) in &[(1, 3), (2, 2), (2, 5), (6, 4)] {
        let (q, k, v) = (rand_vec(rng, n * dk, 1.0), rand_vec(rng, n * dk, 1.0), rand_vec(rng, n * dk, 1.0));
        let got = Tensor::attention(&mat(&[n, dk], q.clone())?, &mat(&[n, dk], k.clone())?, &mat(&[n, dk], v.clone())?)?;
        s.record(max_abs_diff(got.data(), &dense::attention(&q, &k, &v, n, dk)));
    }
    Ok(s.finish())
}

/// Dense MHSA with per-head projections taken from the column blocks.
pub fn dense_mhsa(x: &[f64], n: usize, p: &MhsaParams) -> Vec<f64> {
    let d = p.width();
    let dk = p.head_width();
    let proj = |w: &Param, b: &Param| dense::linear(x, n, d, &vals(w), &vals(b), d);
    let (q, k, v) = (proj(&p.w_q, &p.b_q), proj(&p.w_k, &p.b_k), proj(&p.w_v, &p.b_v));
    let heads: Vec<Vec<f64>> = (0..p.heads())
        .map(|h| {
            let cols = |m: &[f64]| dense::columns(m, n, d, h * dk, (h + 1) * dk);
            dense::attention(&cols(&q), &cols(&k), &cols(&v), n, dk)
        })
        .collect();
    dense::linear(&dense::concat_columns(&heads, n), n, d, &vals(&p.w_o), &vals(&p.b_o), d)
}

fn suite_mhsa(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("mhsa-per-head-dense", 1e-12);
    for &(n, d, k) in &[(3, 4, 2), (5, 8, 2), (4, 8, 4)] {
        let p = MhsaParams::new(d, k, &mut Init::new(rng.gen()))?;
        let x = rand_vec(rng, n * d, 1.0);
        let got = mhsa_forward(&mat(&[n, d], x.clone())?, &p, None)?;
        s.record(max_abs_diff(got.data(), &dense_mhsa(&x, n, &p)));
    }
    Ok(s.finish())
}

fn dense_mlp(x: &[f64], n: usize, mlp: &crate::hypermixer::Mlp) -> Vec<f64> {
    let (din, h) = (mlp.w_in.shape()[0], mlp.w_in.shape()[1]);
    let dout = mlp.w_out.shape()[1];
    let hidden = dense::map(&dense::linear(x, n, din, &vals(&mlp.w_in), &vals(&mlp.b_in), h), dense::gelu);
    dense::linear(&hidden, n, h, &vals(&mlp.w_out), &vals(&mlp.b_out), dout)
}

/// Per-feature loop: for each feature `f`, `a = W2ᵀ·x_f`, `y_f = W1·GELU(a)`,
/// then normalization as selected.
pub fn dense_tm_mlp(x: &[f64], n: usize, d: usize, w1: &[f64], w2: &[f64], dp: usize, norm: MixerNorm) -> Vec<f64> {
    let mut y = vec![0.0; n * d];
    for f in 0..d {
        let mut a = vec![0.0; dp];
        for (i, ai) in a.iter_mut().enumerate() {
            for j in 0..n {
                *ai += w2[j * dp + i] * x[j * d + f];
            }
        }
        let g: Vec<f64> = a.iter().map(|&v| dense::gelu(v)).collect();
        for m in 0..n {
            y[m * d + f] = (0..dp).map(|i| w1[m * dp + i] * g[i]).sum();
        }
    }
    match norm {
        MixerNorm::Tokens => dense::layer_norm_cols(&y, n, d, MIXER_EPS),
        MixerNorm::Features => dense::layer_norm_rows(&y, n, d, None, None, MIXER_EPS),
        MixerNorm::Off => y,
    }
}

/// Dense single-head HyperMixer; `pos` is the `n×d` slice added to the
/// hypernetwork inputs.
pub fn dense_hypermixer(x: &[f64], n: usize, hn: &HyperNetParams, pos: Option<&[f64]>, norm: MixerNorm) -> Vec<f64> {
    let d = hn.width();
    let input = match pos {
        Some(p) => dense::add(x, p),
        None => x.to_vec(),
    };
    let w1 = dense_mlp(&input, n, &hn.mlp1);
    let w2 = dense_mlp(&input, n, &hn.mlp2);
    dense_tm_mlp(x, n, d, &w1, &w2, hn.prime_width(), norm)
}

pub fn dense_mhhm(x: &[f64], n: usize, p: &MhhmParams, table: Option<&PositionTable>) -> Result<Vec<f64>> {
    let d = p.width();
    let dh = d / p.num_heads();
    let mut outs = Vec::new();
    for (l, hn) in p.heads.iter().enumerate() {
        let (lo, hi) = (l * dh, (l + 1) * dh);
        let pos = table.map(|t| t.rows(n).map(|r| dense::columns(r.data(), n, t.width(), lo, hi))).transpose()?;
        outs.push(dense_hypermixer(&dense::columns(x, n, d, lo, hi), n, hn, pos.as_deref(), p.norm));
    }
    Ok(dense::concat_columns(&outs, n))
}

fn suite_tm_mlp(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("tm-mlp-per-feature", 1e-12);
    for &(n, d, dp) in &[(1, 3, 2), (4, 3, 5), (7, 6, 4), (9, 2, 8)] {
        for norm in [MixerNorm::Tokens, MixerNorm::Features, MixerNorm::Off] {
            let (x, w1, w2) = (rand_vec(rng, n * d, 1.0), rand_vec(rng, n * dp, 1.0), rand_vec(rng, n * dp, 1.0));
            let got = tm_mlp(&mat(&[n, d], x.clone())?, &mat(&[n, dp], w1.clone())?, &mat(&[n, dp], w2.clone())?, norm)?;
            s.record(max_abs_diff(got.data(), &dense_tm_mlp(&x, n, d, &w1, &w2, dp, norm)));
        }
    }
    Ok(s.finish())
}

fn suite_hypermixer_dense(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("hypermixer-dense", 1e-12);
    for &(n, d, dp, k) in &[(3, 4, 6, 1), (5, 4, 8, 2), (6, 8, 8, 4)] {
        let p = MhhmParams::new(d, dp, k, HiddenWidth::Model, false, MixerNorm::Tokens, &mut Init::new(rng.gen()))?;
        let x = rand_vec(rng, n * d, 1.0);
        let table = PositionTable::new(16, d);
        let got = mhhm_forward(&mat(&[n, d], x.clone())?, &p, Some(&table))?;
        s.record(max_abs_diff(got.data(), &dense_mhhm(&x, n, &p, Some(&table))?));
    }
    Ok(s.finish())
}

/// MHHM against per-head single-head HyperMixers on column slices,
/// concatenated by hand. Must agree bit for bit.
fn suite_mhhm_slices(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::exact("mhhm-slice-concat");
    for &(n, d, dp) in &[(4, 4, 6), (7, 8, 8), (5, 6, 10)] {
        let p = MhhmParams::new(d, dp, 2, HiddenWidth::Model, false, MixerNorm::Tokens, &mut Init::new(rng.gen()))?;
        let x = rand_vec(rng, n * d, 1.0);
        let xt = mat(&[n, d], x.clone())?;
        let table = PositionTable::new(16, d);
        for positions in [false, true] {
            let got = mhhm_forward(&xt, &p, positions.then_some(&table))?;
            let mut parts = Vec::new();
            for (l, hn) in p.heads.iter().enumerate() {
                let (lo, hi) = (l * d / 2, (l + 1) * d / 2);
                let xs = mat(&[n, hi - lo], dense::columns(&x, n, d, lo, hi))?;
                let y = if positions {
                    let (w1, w2) = generate_weights(&xs, Some(&table.slice(n, lo, hi)?), hn)?;
                    tm_mlp(&xs, &w1, &w2, p.norm)?
                } else {
                    hypermixer_forward(&xs, hn, None, p.norm)?
                };
                parts.push(y.to_vec());
            }
            s.record(bit_mismatches(got.data(), &dense::concat_columns(&parts, n)));
        }
    }
    Ok(s.finish())
}

fn suite_ctc(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("ctc-path-enumeration", 1e-8);
    let mut done = 0;
    while done < 200 {
        let n = rng.gen_range(1..=6);
        let v = rng.gen_range(1..=3);
        let l = rng.gen_range(0..=3);
        let targets: Vec<usize> = (0..l).map(|_| rng.gen_range(1..=v)).collect();
        if n < targets.len() + ctc::repeats(&targets) {
            continue;
        }
        let c = v + 1;
        let lp = mat(&[n, c], rand_vec(rng, n * c, 3.0))?.log_softmax(1)?;
        let got = ctc::ctc_loss(&CtcBatch::new(lp.clone(), targets.clone())?)?.item();
        s.record((got - brute_force_ctc(lp.data(), n, c, &targets)).abs());
        done += 1;
    }
    Ok(s.finish())
}

/// `−ln` of the summed probability of every path collapsing to `targets`.
pub fn brute_force_ctc(lp: &[f64], n: usize, c: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for code in 0..c.pow(n as u32) {
        let mut rest = code;
        let path: Vec<usize> = (0..n)
            .map(|_| {
                let p = rest % c;
                rest /= c;
                p
            })
            .collect();
        if ctc::collapse(path.iter().copied()) == targets {
            total += path.iter().enumerate().map(|(t, &p)| lp[t * c + p]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn suite_greedy() -> Result<SuiteResult> {
    let mut s = Suite::exact("greedy-decode");
    let onehot = |path: &[usize]| -> Result<Tensor> {
        let mut v = vec![-5.0; path.len() * 3];
        for (t, &p) in path.iter().enumerate() {
            v[t * 3 + p] = 0.0;
        }
        mat(&[path.len(), 3], v)
    };
    let cases: [(&[usize], &[usize]); 3] = [(&[0, 1, 1, 0, 2], &[1, 2]), (&[0, 0, 0], &[]), (&[1, 0, 1], &[1, 1])];
    for (path, want) in cases {
        s.record(if ctc::greedy_decode(&onehot(path)?) == want { 0.0 } else { 1.0 });
    }
    Ok(s.finish())
}

fn dense_norm(x: &[f64], n: usize, d: usize, norm: &Norm) -> Vec<f64> {
    dense::layer_norm_rows(x, n, d, Some(&vals(&norm.gain)), Some(&vals(&norm.bias)), NORM_EPS)
}

pub fn dense_ffn(x: &[f64], n: usize, p: &FfnParams) -> Vec<f64> {
    let (d, f) = (p.w1.shape()[0], p.w1.shape()[1]);
    let h = dense::linear(&dense_norm(x, n, d, &p.norm), n, d, &vals(&p.w1), &vals(&p.b1), f);
    dense::linear(&dense::map(&h, dense::gelu), n, f, &vals(&p.w2), &vals(&p.b2), d)
}

/// Step-by-step convolution module.
pub fn dense_conv(x: &[f64], n: usize, p: &ConvParams) -> Vec<f64> {
    let d = p.pw1.shape()[0];
    let h = dense::linear(&dense_norm(x, n, d, &p.norm), n, d, &vals(&p.pw1), &vals(&p.pw1_b), 2 * d);
    let mut glu = vec![0.0; n * d];
    for t in 0..n {
        for c in 0..d {
            glu[t * d + c] = h[t * 2 * d + c] * dense::sigmoid(h[t * 2 * d + d + c]);
        }
    }
    let conv = dense::depthwise(&glu, n, d, &vals(&p.dw), p.kernel(), &vals(&p.dw_b));
    let act = dense::map(&dense_norm(&conv, n, d, &p.dw_norm), |v| v * dense::sigmoid(v));
    dense::linear(&act, n, d, &vals(&p.pw2), &vals(&p.pw2_b), d)
}

/// Conformer block composed from the dense module oracles.
pub fn dense_conformer_block(x: &[f64], n: usize, p: &BlockParams, table: &PositionTable) -> Result<Vec<f64>> {
    let d = x.len() / n;
    let half = |v: Vec<f64>| dense::map(&v, |e| 0.5 * e);
    let x1 = dense::add(x, &half(dense_ffn(x, n, &p.ffn1)));
    let x2 = match &p.gi {
        Some(gi) => {
            let normed = dense_norm(&x1, n, d, &gi.norm);
            let y = match &gi.gi {
                GlobalInteraction::Mhsa(m) => dense_mhsa(&normed, n, m),
                GlobalInteraction::HyperMixer(m) => dense_mhhm(&normed, n, m, Some(table))?,
            };
            dense::add(&x1, &y)
        }
        None => x1,
    };
    let conv = p.conv.as_ref().ok_or_else(|| Error::Config("block without convolution module".into()))?;
    let x3 = dense::add(&x2, &dense_conv(&x2, n, conv));
    let ffn2 = p.ffn2.as_ref().ok_or_else(|| Error::Config("block without second feed-forward".into()))?;
    let x4 = dense::add(&x3, &half(dense_ffn(&x3, n, ffn2)));
    let norm = p.final_norm.as_ref().ok_or_else(|| Error::Config("block without final norm".into()))?;
    Ok(dense_norm(&x4, n, d, norm))
}

fn suite_blocks(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("ffn-conv-block-composition", 1e-10);
    let mut init = Init::new(rng.gen());
    // FFN and convolution module (N=5, d=2, K=3)
    let ffn = FfnParams::new("ffn", 2, 8, &mut init);
    let conv = ConvParams::new("conv", 2, 3, &mut init)?;
    let x = rand_vec(rng, 10, 1.0);
    let xt = mat(&[5, 2], x.clone())?;
    s.record(max_abs_diff(ffn_module(&xt, &ffn)?.data(), &dense_ffn(&x, 5, &ffn)));
    s.record(max_abs_diff(conv_module(&xt, &conv)?.data(), &dense_conv(&x, 5, &conv)));
    // full block, HyperMixer k=2, N=4, d=4, and the MHSA variant
    let table = PositionTable::new(8, 4);
    for model in [ModelKind::HyperConformer, ModelKind::Conformer] {
        let cfg = EncoderConfig::toy(model, 4, 1, 2, 3);
        let block = BlockParams::new("b", &cfg, &mut init)?;
        let x = rand_vec(rng, 16, 1.0);
        let got = conformer_block(&mat(&[4, 4], x.clone())?, &block, Some(&table))?;
        s.record(max_abs_diff(got.data(), &dense_conformer_block(&x, 4, &block, &table)?));
    }
    Ok(s.finish())
}

fn permute_rows(x: &[f64], d: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect()
}

/// Largest deviation from `f(PX) = P·f(X)` over a few permutations.
fn equivariance_gap(x: &[f64], n: usize, d: usize, rng: &mut ChaCha8Rng, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    use rand::seq::SliceRandom;
    let base = f(&mat(&[n, d], x.to_vec())?)?.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let permuted = f(&mat(&[n, d], permute_rows(x, d, &perm))?)?.to_vec();
        worst = worst.max(max_abs_diff(&permuted, &permute_rows(&base, d, &perm)));
    }
    Ok(worst)
}

/// Equivariance with positions off (gap < 1e-10) and its violation with
/// positions on (gap > 1e-3, recorded as a failure otherwise).
fn suite_equivariance(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::new("permutation-equivariance", 1e-10);
    let (n, d) = (7, 8);
    let table = PositionTable::new(16, d);
    let mhsa = MhsaParams::new(d, 2, &mut Init::new(rng.gen()))?;
    let mhhm = MhhmParams::new(d, 16, 2, HiddenWidth::Model, false, MixerNorm::Tokens, &mut Init::new(rng.gen()))?;
    let x = rand_vec(rng, n * d, 1.0);
    s.record(equivariance_gap(&x, n, d, rng, |t| mhsa_forward(t, &mhsa, None))?);
    s.record(equivariance_gap(&x, n, d, rng, |t| mhhm_forward(t, &mhhm, None))?);
    let with_pos = [
        equivariance_gap(&x, n, d, rng, |t| mhsa_forward(t, &mhsa, Some(&table)))?,
        equivariance_gap(&x, n, d, rng, |t| mhhm_forward(t, &mhhm, Some(&table)))?,
    ];
    for gap in with_pos {
        s.record(if gap > 1e-3 { 0.0 } else { f64::INFINITY });
    }
    Ok(s.finish())
}

/// Perturbing frame 0 must leave every output beyond the kernel radius
/// bit-identical.
fn suite_locality(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::exact("conv-locality");
    for &(n, d, k) in &[(9, 4, 3), (12, 3, 5), (20, 2, 7)] {
        let p = ConvParams::new("c", d, k, &mut Init::new(rng.gen()))?;
        let x = rand_vec(rng, n * d, 1.0);
        let mut bumped = x.clone();
        bumped[0] += 0.5;
        let a = conv_module(&mat(&[n, d], x)?, &p)?;
        let b = conv_module(&mat(&[n, d], bumped)?, &p)?;
        let r = (k - 1) / 2;
        s.record(bit_mismatches(&a.data()[(r + 1) * d..], &b.data()[(r + 1) * d..]));
        // inside the radius the bump must be visible
        s.record(if a.data()[..(r + 1) * d] != b.data()[..(r + 1) * d] { 0.0 } else { 1.0 });
    }
    Ok(s.finish())
}

/// Closed-form FLOP models against the engine counter.
fn suite_flops(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut s = Suite::exact("flop-model-counter");
    let count = |f: &dyn Fn() -> Result<()>| -> Result<u64> {
        let (r, stats) = measure(|| no_grad(f));
        r.map(|_| stats.flops)
    };
    for &(n, d, k) in &[(5, 8, 2), (17, 16, 4)] {
        let p = MhsaParams::new(d, k, &mut Init::new(rng.gen()))?;
        let x = mat(&[n, d], rand_vec(rng, n * d, 1.0))?;
        let got = count(&|| mhsa_forward(&x, &p, None).map(drop))?;
        s.record(got.abs_diff(mhsa_flops(n, d, k, false)) as f64);
        let m = MhhmParams::new(d, 2 * d, k, HiddenWidth::Model, false, MixerNorm::Tokens, &mut Init::new(rng.gen()))?;
        let table = PositionTable::new(32, d);
        let got = count(&|| mhhm_forward(&x, &m, Some(&table)).map(drop))?;
        s.record(got.abs_diff(MixerShape::new(d, 2 * d, k).flops(n).total()) as f64);
    }
    for model in ModelKind::ALL {
        let cfg = EncoderConfig::toy(model, 8, 2, 2, 3);
        let enc = EncoderParams::new(&cfg, rng.gen())?;
        let feats = mat(&[30, 80], rand_vec(rng, 30 * 80, 1.0))?;
        let got = count(&|| encoder_forward(&feats, &enc).map(drop))?;
        s.record(got.abs_diff(crate::configs::flop_model(&cfg, 30).total()) as f64);
    }
    // block stack of the small preset at N = 512
    for model in [ModelKind::Conformer, ModelKind::HyperConformer] {
        let cfg = EncoderConfig::preset(Preset::Small, model);
        let enc = EncoderParams::new(&cfg, 0)?;
        let n = 512;
        let h = mat(&[n, cfg.d_model], rand_vec(rng, n * cfg.d_model, 1.0))?;
        let got = count(&|| encode_frames(&h, &enc.blocks, &enc.positions, &enc.final_norm).map(drop))?;
        s.record(got.abs_diff(blocks_flops(&cfg, n).total()) as f64);
    }
    Ok(s.finish())
}

fn suite_lengths() -> Result<SuiteResult> {
    let mut s = Suite::exact("subsampling-length");
    for (t, want) in [(100, 24), (8, 1), (400, 99)] {
        s.record(subsampled_len(t).abs_diff(want) as f64);
    }
    let enc = EncoderParams::new(&EncoderConfig::toy(ModelKind::HyperConformer, 8, 1, 2, 3), 0)?;
    for t in [8, 100, 123] {
        let y = no_grad(|| encoder_forward(&Tensor::zeros(&[t, 80]), &enc))?;
        s.record(y.rows().abs_diff(subsampled_len(t)) as f64);
    }
    s.record(match no_grad(|| encoder_forward(&Tensor::zeros(&[7, 80]), &enc)) {
        Err(Error::Input(_)) => 0.0,
        _ => 1.0,
    });
    Ok(s.finish())
}

/// Runs every oracle suite with randomness drawn from `seed`.
pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suites = vec![
        suite_matmul(&mut rng)?,
        suite_elementwise(&mut rng)?,
        suite_attention(&mut rng)?,
        suite_mhsa(&mut rng)?,
        suite_tm_mlp(&mut rng)?,
        suite_hypermixer_dense(&mut rng)?,
        suite_mhhm_slices(&mut rng)?,
        suite_ctc(&mut rng)?,
        suite_greedy()?,
        suite_blocks(&mut rng)?,
        suite_equivariance(&mut rng)?,
        suite_locality(&mut rng)?,
        suite_flops(&mut rng)?,
        suite_lengths()?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport { seed, suites, passed })
}

/// Tolerance of every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Names accepted by [`gradcheck_module`].
pub const GRAD_MODULES: [&str; 24] = [
    "matmul",
    "linear",
    "elementwise",
    "reshape-slice-concat",
    "softmax",
    "log-softmax",
    "layer-norm",
    "gelu",
    "swish",
    "relu",
    "sigmoid",
    "glu",
    "conv1d-depthwise",
    "conv2d",
    "attention",
    "nll",
    "ctc",
    "mhsa",
    "hypermixer",
    "mhhm",
    "ffn",
    "conv-module",
    "encoder-conformer",
    "encoder-hyperconformer",
];

type Loss = Box<dyn Fn() -> Result<Tensor>>;

fn leaf(init: &mut Init, name: &str, shape: &[usize]) -> Param {
    init.uniform(name, shape, 1.0)
}

/// Parameters and loss of one gradient-check case. `variant` selects one of
/// three input shapes.
fn grad_case(module: &str, variant: usize, init: &mut Init, seed: u64) -> Result<(Vec<Param>, Loss, Option<usize>)> {
    let pick = |opts: [(usize, usize); 3]| opts[variant % 3];
    let (n, d) = pick([(2, 3), (4, 2), (3, 5)]);
    let probe = move |t: Result<Tensor>| t.and_then(|t| probed_loss(&t, seed));
    let unary = |init: &mut Init, f: fn(&Tensor) -> Result<Tensor>| -> (Vec<Param>, Loss, Option<usize>) {
        let x = leaf(init, "x", &[n, d]);
        let xc = x.clone();
        (vec![x], Box::new(move || probe(f(&xc.value()))), None)
    };
    Ok(match module {
        "matmul" => {
            let k = pick([(4, 0), (1, 0), (3, 0)]).0;
            let (a, b) = (leaf(init, "a", &[n, k]), leaf(init, "b", &[k, d]));
            let (ac, bc) = (a.clone(), b.clone());
            (vec![a, b], Box::new(move || probe(ac.value().matmul(&bc.value()))), None)
        }
        "linear" => {
            let (x, w, b) = (leaf(init, "x", &[n, d]), leaf(init, "w", &[d, 3]), leaf(init, "b", &[3]));
            let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
            (vec![x, w, b], Box::new(move || probe(xc.value().linear(&wc.value(), Some(&bc.value())))), None)
        }
        "elementwise" => {
            let (a, b) = (leaf(init, "a", &[n, d]), leaf(init, "b", &[n, d]));
            let (ac, bc) = (a.clone(), b.clone());
            let f = move || {
                let (a, b) = (ac.value(), bc.value());
                let y = a.add(&b)?.mul(&a)?.sub(&b.scale(0.5))?.add_scalar(0.25);
                y.sum().add(&y.transpose()?.mean())?.add(&probed_loss(&y, seed)?)
            };
            (vec![a, b], Box::new(f), None)
        }
        "reshape-slice-concat" => {
            let x = leaf(init, "x", &[n, 2 * d]);
            let xc = x.clone();
            let f = move || {
                let x = xc.value();
                let parts = [x.slice_cols(d, 2 * d)?, x.slice_cols(0, d)?.scale(2.0)];
                let y = Tensor::concat_cols(&parts)?.reshape(&[2 * d, n])?.slice_rows(1, 2 * d)?;
                probed_loss(&y, seed)
            };
            (vec![x], Box::new(f), None)
        }
        "softmax" => {
            let x = leaf(init, "x", &[n, d]);
            let xc = x.clone();
            let f = move || probed_loss(&xc.value().softmax(1)?, seed)?.add(&probed_loss(&xc.value().softmax(0)?, seed + 1)?);
            (vec![x], Box::new(f), None)
        }
        "log-softmax" => unary(init, |x| x.log_softmax(1)),
        "layer-norm" => {
            let (x, g, b) = (leaf(init, "x", &[n, d]), leaf(init, "g", &[d]), leaf(init, "b", &[d]));
            let (xc, gc, bc) = (x.clone(), g.clone(), b.clone());
            let f = move || {
                let rows = xc.value().layer_norm(1, Some(&gc.value()), Some(&bc.value()), NORM_EPS)?;
                let cols = xc.value().layer_norm(0, None, None, NORM_EPS)?;
                probed_loss(&rows, seed)?.add(&probed_loss(&cols, seed + 1)?)
            };
            (vec![x, g, b], Box::new(f), None)
        }
        "gelu" => unary(init, |x| Ok(x.gelu())),
        "swish" => unary(init, |x| Ok(x.swish())),
        "relu" => unary(init, |x| Ok(x.relu())),
        "sigmoid" => unary(init, |x| Ok(x.sigmoid())),
        "glu" => {
            let x = leaf(init, "x", &[n, 2 * d]);
            let xc = x.clone();
            (vec![x], Box::new(move || probe(xc.value().glu(1))), None)
        }
        "conv1d-depthwise" => {
            let k = [3, 1, 5][variant % 3];
            let n = n + 3;
            let (x, w, b) = (leaf(init, "x", &[n, d]), leaf(init, "w", &[k, d]), leaf(init, "b", &[d]));
            let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
            (vec![x, w, b], Box::new(move || probe(xc.value().conv1d_depthwise(&wc.value(), Some(&bc.value())))), None)
        }
        "conv2d" => {
            let (h, w, cin, cout) = [(7, 7, 1, 2), (9, 8, 2, 3), (8, 10, 1, 1)][variant % 3];
            let (x, wt, b) = (leaf(init, "x", &[h, w, cin]), leaf(init, "w", &[9 * cin, cout]), leaf(init, "b", &[cout]));
            let (xc, wc, bc) = (x.clone(), wt.clone(), b.clone());
            (vec![x, wt, b], Box::new(move || probe(xc.value().conv2d_3x3_s2(&wc.value(), &bc.value()))), None)
        }
        "attention" => {
            let (q, k, v) = (leaf(init, "q", &[n, d]), leaf(init, "k", &[n, d]), leaf(init, "v", &[n, d]));
            let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
            (vec![q, k, v], Box::new(move || probe(Tensor::attention(&qc.value(), &kc.value(), &vc.value()))), None)
        }
        "nll" => {
            let x = leaf(init, "logits", &[n, d]);
            let xc = x.clone();
            let targets: Vec<usize> = (0..n).map(|i| (i * 7 + variant) % d).collect();
            (vec![x], Box::new(move || xc.value().log_softmax(1)?.nll(&targets)), None)
        }
        "ctc" => {
            let (n, c, targets) = [(4, 3, vec![1, 2]), (5, 4, vec![3, 3]), (6, 2, vec![1, 1, 1])][variant % 3].clone();
            let x = leaf(init, "logits", &[n, c]);
            let xc = x.clone();
            (vec![x], Box::new(move || ctc::ctc_loss(&CtcBatch::new(xc.value().log_softmax(1)?, targets.clone())?)), None)
        }
        "mhsa" => {
            let (n, d, k) = [(3, 4, 2), (5, 4, 1), (4, 6, 3)][variant % 3];
            let p = MhsaParams::new(d, k, init)?;
            let x = leaf(init, "x", &[n, d]);
            let table = PositionTable::new(8, d);
            let mut params = p.parameters();
            params.push(x.clone());
            let pos = variant == 1;
            (params, Box::new(move || probe(mhsa_forward(&x.value(), &p, pos.then_some(&table)))), None)
        }
        "hypermixer" | "mhhm" => {
            let (n, d, dp) = [(3, 4, 6), (5, 2, 4), (4, 6, 6)][variant % 3];
            let k = if module == "mhhm" { 2 } else { 1 };
            let norm = [MixerNorm::Tokens, MixerNorm::Features, MixerNorm::Off][variant % 3];
            let p = MhhmParams::new(d, dp, k, HiddenWidth::Model, variant == 2, norm, init)?;
            let x = leaf(init, "x", &[n, d]);
            let table = PositionTable::new(8, d);
            let mut params = p.parameters();
            params.push(x.clone());
            (params, Box::new(move || probe(mhhm_forward(&x.value(), &p, Some(&table)))), None)
        }
        "ffn" => {
            let p = FfnParams::new("ffn", d, 2 * d, init);
            let x = leaf(init, "x", &[n, d]);
            let mut params = p.parameters();
            params.push(x.clone());
            (params, Box::new(move || probe(ffn_module(&x.value(), &p))), None)
        }
        "conv-module" => {
            let k = [3, 5, 1][variant % 3];
            let p = ConvParams::new("conv", d, k, init)?;
            let x = leaf(init, "x", &[n + 2, d]);
            let mut params = p.parameters();
            params.push(x.clone());
            (params, Box::new(move || probe(conv_module(&x.value(), &p))), None)
        }
        "encoder-conformer" | "encoder-hyperconformer" => {
            let model = if module == "encoder-conformer" { ModelKind::Conformer } else { ModelKind::HyperConformer };
            let cfg = EncoderConfig::toy(model, 8, 2, 2, 3);
            let enc = EncoderParams::new(&cfg, init.rng().gen())?;
            let t = [40, 48, 56][variant % 3];
            // central differences are only meaningful where the loss is smooth
            // across the stencil, so keep every frontend ReLU input clear of 0
            let mut feats = leaf(init, "features", &[t, 80]).value().detach();
            while relu_margin(&enc, &feats)? < KINK_MARGIN {
                feats = leaf(init, "features", &[t, 80]).value().detach();
            }
            (enc.parameters(), Box::new(move || probe(encoder_forward(&feats, &enc))), Some(4))
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown gradcheck module '{other}'; valid modules: {}",
                GRAD_MODULES.join(", ")
            )))
        }
    })
}

/// Smallest distance of a frontend ReLU input from zero accepted for the
/// encoder gradient checks (ten finite-difference steps).
pub const KINK_MARGIN: f64 = 10.0 * gradcheck::STEP;

/// Smallest `|pre-activation|` over both frontend ReLUs.
pub fn relu_margin(enc: &EncoderParams, feats: &Tensor) -> Result<f64> {
    no_grad(|| {
        let fe = &enc.frontend;
        let (t, f) = feats.expect_2d("frontend")?;
        let pre1 = feats.reshape(&[t, f, 1])?.conv2d_3x3_s2(&fe.conv1_w.value(), &fe.conv1_b.value())?;
        let pre2 = pre1.relu().conv2d_3x3_s2(&fe.conv2_w.value(), &fe.conv2_b.value())?;
        Ok(pre1.data().iter().chain(pre2.data()).map(|v| v.abs()).fold(f64::INFINITY, f64::min))
    })
}

/// Worst central-difference error of `module` over three input shapes.
pub fn gradcheck_module(module: &str, seed: u64) -> Result<GradCheckReport> {
    let mut worst = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for variant in 0..3 {
        let mut init = Init::new(seed.wrapping_mul(1000).wrapping_add(variant as u64));
        let (params, loss, per_param) = grad_case(module, variant, &mut init, seed)?;
        let r = gradcheck::check(&params, loss, per_param, seed)?;
        worst.entries_checked += r.entries_checked;
        if worst.worst.is_none() || r.max_rel_error > worst.max_rel_error {
            worst.max_rel_error = r.max_rel_error;
            worst.worst = r.worst;
        }
    }
    Ok(worst)
}
