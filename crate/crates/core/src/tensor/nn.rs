//! Neural-network primitives: normalizations, activations, convolutions and
//! fused scaled dot-product attention.
//!
//! FLOP charges (per element unless noted): softmax and log-softmax 4,
//! layer norm 5 plus 2 with an affine, GELU/Swish/ReLU/sigmoid 1, GLU 2 per
//! output element.

use rand::Rng;

use super::instrument::add_flops;
use super::ops::gemm;
use super::{Buffer, Tensor};
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Elementwise activation kinds. GLU is handled by [`Tensor::glu`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Swish,
    Relu,
}

/// Axis along which a matrix is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxis {
    /// Normalize each column over its rows (the token axis of an `N×d` matrix).
    Rows,
    /// Normalize each row over its columns (the feature axis).
    Cols,
}

impl NormAxis {
    pub fn axis(self) -> usize {
        match self {
            NormAxis::Rows => 0,
            NormAxis::Cols => 1,
        }
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Input(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Calls `f` with the flat indices of every line along the split axis.
fn for_each_line(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0; len];
    for o in 0..outer {
        for j in 0..inner {
            for (i, slot) in idx.iter_mut().enumerate() {
                *slot = (o * len + i) * inner + j;
            }
            f(&idx);
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(
        &self,
        name: &'static str,
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        add_flops(data.len() as u64);
        Tensor::from_op(name, self.shape().to_vec(), Buffer::new(data), &[self], move |ctx| {
            let x = ctx.parents[0].data();
            vec![Some(ctx.grad_out.iter().zip(x).map(|(g, &v)| g * df(v)).collect())]
        })
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF evaluated through erf.
    pub fn gelu(&self) -> Tensor {
        self.unary("gelu", gelu_scalar, gelu_grad)
    }

    /// Swish / SiLU, `x·sigmoid(x)`.
    pub fn swish(&self) -> Tensor {
        self.unary(
            "swish",
            |x| x * sigmoid_scalar(x),
            |x| {
                let s = sigmoid_scalar(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid_scalar, |x| {
            let s = sigmoid_scalar(x);
            s * (1.0 - s)
        })
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        match kind {
            Activation::Gelu => self.gelu(),
            Activation::Swish => self.swish(),
            Activation::Relu => self.relu(),
        }
    }

    /// Gated linear unit: splits `axis` into halves `(a, b)` and returns `a ⊙ sigmoid(b)`.
    pub fn glu(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("glu", self.shape(), axis)?;
        if len % 2 != 0 {
            return Err(Error::Dimension {
                op: "glu",
                lhs: self.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let half = len / 2;
        let x = self.data();
        let mut out = Vec::with_capacity(outer * half * inner);
        for o in 0..outer {
            for i in 0..half {
                for j in 0..inner {
                    let a = x[(o * len + i) * inner + j];
                    let b = x[(o * len + i + half) * inner + j];
                    out.push(a * sigmoid_scalar(b));
                }
            }
        }
        add_flops(2 * out.len() as u64);
        let mut shape = self.shape().to_vec();
        shape[axis] = half;
        Ok(Tensor::from_op("glu", shape, Buffer::new(out), &[self], move |ctx| {
            let x = ctx.parents[0].data();
            let mut g = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..half {
                    for j in 0..inner {
                        let ia = (o * len + i) * inner + j;
                        let ib = (o * len + i + half) * inner + j;
                        let go = ctx.grad_out[(o * half + i) * inner + j];
                        let s = sigmoid_scalar(x[ib]);
                        g[ia] = go * s;
                        g[ib] = go * x[ia] * s * (1.0 - s);
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("softmax", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for_each_line(outer, len, inner, |idx| {
            let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in idx {
                let e = (x[i] - max).exp();
                out[i] = e;
                sum += e;
            }
            for &i in idx {
                out[i] /= sum;
            }
        });
        add_flops(4 * x.len() as u64);
        Ok(Tensor::from_op("softmax", self.shape().to_vec(), Buffer::new(out), &[self], move |ctx| {
            let y = ctx.out;
            let mut g = vec![0.0; y.len()];
            for_each_line(outer, len, inner, |idx| {
                let dot: f64 = idx.iter().map(|&i| ctx.grad_out[i] * y[i]).sum();
                for &i in idx {
                    g[i] = y[i] * (ctx.grad_out[i] - dot);
                }
            });
            vec![Some(g)]
        }))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("log_softmax", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for_each_line(outer, len, inner, |idx| {
            let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.iter().map(|&i| (x[i] - max).exp()).sum::<f64>().ln();
            for &i in idx {
                out[i] = x[i] - lse;
            }
        });
        add_flops(4 * x.len() as u64);
        Ok(Tensor::from_op("log_softmax", self.shape().to_vec(), Buffer::new(out), &[self], move |ctx| {
            let y = ctx.out;
            let mut g = vec![0.0; y.len()];
            for_each_line(outer, len, inner, |idx| {
                let total: f64 = idx.iter().map(|&i| ctx.grad_out[i]).sum();
                for &i in idx {
                    g[i] = ctx.grad_out[i] - y[i].exp() * total;
                }
            });
            vec![Some(g)]
        }))
    }

    /// Layer normalization along `axis` with population variance.
    ///
    /// `gain` and `bias`, when given, have the length of `axis`.
    pub fn layer_norm(&self, axis: usize, gain: Option<&Tensor>, bias: Option<&Tensor>, eps: f64) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("layer_norm", self.shape(), axis)?;
        for p in [gain, bias].into_iter().flatten() {
            if p.numel() != len {
                return Err(Error::dim("layer_norm affine", self.shape(), p.shape()));
            }
        }
        let x = self.data();
        let mut normed = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for_each_line(outer, len, inner, |idx| {
            let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / len as f64;
            let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / len as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            for &i in idx {
                normed[i] = (x[i] - mean) * r;
            }
        });
        let mut flops = 5 * x.len() as u64;
        let affine = gain.is_some() || bias.is_some();
        let mut out = normed.clone();
        if affine {
            flops += 2 * x.len() as u64;
            let g = gain.map(|t| t.data());
            let b = bias.map(|t| t.data());
            for_each_line(outer, len, inner, |idx| {
                for (pos, &i) in idx.iter().enumerate() {
                    out[i] = out[i] * g.map_or(1.0, |g| g[pos]) + b.map_or(0.0, |b| b[pos]);
                }
            });
        }
        add_flops(flops);
        let mut parents = vec![self];
        let has_gain = gain.is_some();
        if let Some(g) = gain {
            parents.push(g);
        }
        if let Some(b) = bias {
            parents.push(b);
        }
        let normed = Buffer::new(normed);
        Ok(Tensor::from_op("layer_norm", self.shape().to_vec(), Buffer::new(out), &parents, move |ctx| {
            let gain = has_gain.then(|| ctx.parents[1].data());
            let mut gx = vec![0.0; normed.len()];
            let mut ggain = vec![0.0; len];
            let mut gbias = vec![0.0; len];
            let mut line = 0;
            for_each_line(outer, len, inner, |idx| {
                let r = inv_std[line];
                line += 1;
                let dy = |pos: usize, i: usize| ctx.grad_out[i] * gain.map_or(1.0, |g| g[pos]);
                let mean_dy = idx.iter().enumerate().map(|(p, &i)| dy(p, i)).sum::<f64>() / len as f64;
                let mean_dy_y =
                    idx.iter().enumerate().map(|(p, &i)| dy(p, i) * normed[i]).sum::<f64>() / len as f64;
                for (p, &i) in idx.iter().enumerate() {
                    gx[i] = r * (dy(p, i) - mean_dy - normed[i] * mean_dy_y);
                    ggain[p] += ctx.grad_out[i] * normed[i];
                    gbias[p] += ctx.grad_out[i];
                }
            });
            let mut grads = vec![ctx.needs[0].then_some(gx)];
            let mut k = 1;
            if has_gain {
                grads.push(ctx.needs[k].then(|| ggain.clone()));
                k += 1;
            }
            if ctx.parents.len() > k {
                grads.push(ctx.needs[k].then_some(gbias));
            }
            grads
        }))
    }

    /// Per-channel 1-D convolution of an `N×d` sequence with a `K×d` kernel,
    /// zero-padded so the output keeps length `N`. `K` must be odd.
    pub fn conv1d_depthwise(&self, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (n, d) = self.expect_2d("conv1d_depthwise")?;
        let (k, d2) = kernel.expect_2d("conv1d_depthwise")?;
        if d != d2 {
            return Err(Error::dim("conv1d_depthwise", self.shape(), kernel.shape()));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
        }
        if let Some(b) = bias {
            if b.numel() != d {
                return Err(Error::dim("conv1d_depthwise bias", kernel.shape(), b.shape()));
            }
        }
        let r = (k - 1) / 2;
        let x = self.data();
        let w = kernel.data();
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            let row = &mut out[t * d..(t + 1) * d];
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(r).filter(|&s| s < n) else {
                    continue;
                };
                let xs = &x[src * d..(src + 1) * d];
                let ws = &w[j * d..(j + 1) * d];
                for c in 0..d {
                    row[c] += ws[c] * xs[c];
                }
            }
        }
        let mut flops = 2 * (n * d * k) as u64;
        let mut parents = vec![self, kernel];
        if let Some(b) = bias {
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(b.data()).for_each(|(o, bb)| *o += bb);
            }
            flops += (n * d) as u64;
            parents.push(b);
        }
        add_flops(flops);
        Ok(Tensor::from_op("conv1d_depthwise", vec![n, d], Buffer::new(out), &parents, move |ctx| {
            let x = ctx.parents[0].data();
            let w = ctx.parents[1].data();
            let g = ctx.grad_out;
            let mut gx = vec![0.0; n * d];
            let mut gw = vec![0.0; k * d];
            for t in 0..n {
                let go = &g[t * d..(t + 1) * d];
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(r).filter(|&s| s < n) else {
                        continue;
                    };
                    for c in 0..d {
                        gx[src * d + c] += w[j * d + c] * go[c];
                        gw[j * d + c] += x[src * d + c] * go[c];
                    }
                }
            }
            let mut grads = vec![ctx.needs[0].then_some(gx), ctx.needs[1].then_some(gw)];
            if ctx.parents.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// 2-D convolution with a 3×3 kernel, stride 2 and no padding over a
    /// channels-last `H×W×C_in` input. `weight` is `(9·C_in)×C_out`, rows
    /// ordered by kernel offset `(ky, kx)` then input channel.
    pub fn conv2d_3x3_s2(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let &[h, w, cin] = self.shape() else {
            return Err(Error::dim("conv2d", self.shape(), &[0, 0, 0]));
        };
        let (wr, cout) = weight.expect_2d("conv2d")?;
        if wr != 9 * cin || bias.numel() != cout {
            return Err(Error::dim("conv2d", self.shape(), weight.shape()));
        }
        if h < 3 || w < 3 {
            return Err(Error::Input(format!("conv2d input {h}×{w} smaller than the 3×3 kernel")));
        }
        let (h2, w2) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0; h2 * w2 * cout];
        for t in 0..h2 {
            let dst = &mut out[t * w2 * cout..(t + 1) * w2 * cout];
            for (ky, kx) in offsets() {
                let a = &x[((2 * t + ky) * w + kx) * cin..];
                let b = &wt[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                strided_gemm(w2, cin, cout, a, (2 * cin) as isize, 1, b, cout as isize, 1, dst, cout as isize, 1);
            }
            for row in dst.chunks_mut(cout) {
                row.iter_mut().zip(bias.data()).for_each(|(o, bb)| *o += bb);
            }
        }
        add_flops((2 * h2 * w2 * 9 * cin * cout + h2 * w2 * cout) as u64);
        Ok(Tensor::from_op("conv2d", vec![h2, w2, cout], Buffer::new(out), &[self, weight, bias], move |ctx| {
            let x = ctx.parents[0].data();
            let wt = ctx.parents[1].data();
            let g = ctx.grad_out;
            let mut gx = ctx.needs[0].then(|| vec![0.0; h * w * cin]);
            let mut gw = ctx.needs[1].then(|| vec![0.0; 9 * cin * cout]);
            for t in 0..h2 {
                let go = &g[t * w2 * cout..(t + 1) * w2 * cout];
                for (ky, kx) in offsets() {
                    let off = (ky * 3 + kx) * cin * cout;
                    let base = ((2 * t + ky) * w + kx) * cin;
                    if let Some(gw) = gw.as_mut() {
                        // dW_o += Aᵀ · dOut
                        strided_gemm(
                            cin, w2, cout,
                            &x[base..], 1, (2 * cin) as isize,
                            go, cout as isize, 1,
                            &mut gw[off..off + cin * cout], cout as isize, 1,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dA += dOut · W_oᵀ
                        strided_gemm(
                            w2, cout, cin,
                            go, cout as isize, 1,
                            &wt[off..off + cin * cout], 1, cout as isize,
                            &mut gx[base..], (2 * cin) as isize, 1,
                        );
                    }
                }
            }
            let gb = ctx.needs[2].then(|| {
                let mut gb = vec![0.0; cout];
                for row in g.chunks(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gb
            });
            vec![gx, gw, gb]
        }))
    }

    /// Fused `softmax(Q·Kᵀ/√d_k)·V` for `N×d_k` inputs. Keeps only the
    /// `N×N` weight matrix for the backward pass.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (n, dk) = q.expect_2d("attention")?;
        if k.shape() != q.shape() {
            return Err(Error::dim("attention", q.shape(), k.shape()));
        }
        if v.shape() != q.shape() {
            return Err(Error::dim("attention", q.shape(), v.shape()));
        }
        let p = attention_weights(q.data(), k.data(), n, dk);
        let mut out = Buffer::zeros(n * dk);
        gemm(n, n, dk, &p, false, v.data(), false, &mut out, false);
        add_flops(attention_flops(n, dk));
        let scale = 1.0 / (dk as f64).sqrt();
        Ok(Tensor::from_op("attention", vec![n, dk], out, &[q, k, v], move |ctx| {
            let (q, k, v) = (ctx.parents[0].data(), ctx.parents[1].data(), ctx.parents[2].data());
            let gv = ctx.needs[2].then(|| {
                let mut g = vec![0.0; n * dk];
                gemm(n, n, dk, &p, true, ctx.grad_out, false, &mut g, false);
                g
            });
            let (gq, gk) = if ctx.needs[0] || ctx.needs[1] {
                let mut ds = vec![0.0; n * n];
                gemm(n, dk, n, ctx.grad_out, false, v, true, &mut ds, false);
                for (drow, prow) in ds.chunks_mut(n).zip(p.chunks(n)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                let gq = ctx.needs[0].then(|| {
                    let mut g = vec![0.0; n * dk];
                    gemm(n, n, dk, &ds, false, k, false, &mut g, false);
                    g
                });
                let gk = ctx.needs[1].then(|| {
                    let mut g = vec![0.0; n * dk];
                    gemm(n, n, dk, &ds, true, q, false, &mut g, false);
                    g
                });
                (gq, gk)
            } else {
                (None, None)
            };
            vec![gq, gk, gv]
        }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-probabilities.
    pub fn nll(&self, targets: &[usize]) -> Result<Tensor> {
        let (n, c) = self.expect_2d("nll")?;
        if targets.len() != n {
            return Err(Error::dim("nll", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!("target class {bad} outside 0..{c}")));
        }
        let x = self.data();
        let loss = -targets.iter().enumerate().map(|(i, &t)| x[i * c + t]).sum::<f64>() / n as f64;
        add_flops(n as u64);
        let targets = targets.to_vec();
        Ok(Tensor::from_op("nll", vec![1], Buffer::new(vec![loss]), &[self], move |ctx| {
            let mut g = vec![0.0; n * c];
            for (i, &t) in targets.iter().enumerate() {
                g[i * c + t] = -ctx.grad_out[0] / n as f64;
            }
            vec![Some(g)]
        }))
    }

    /// Inverted dropout; a zero rate returns the input unchanged.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        add_flops(data.len() as u64);
        Ok(Tensor::from_op("dropout", self.shape().to_vec(), Buffer::new(data), &[self], move |ctx| {
            vec![Some(ctx.grad_out.iter().zip(&mask).map(|(g, m)| g * m).collect())]
        }))
    }
}

/// FLOPs charged by [`Tensor::attention`]: scores and mixing matmuls
/// (`2·N²·d_k` each), scaling `N²` and softmax `4·N²`.
pub fn attention_flops(n: usize, dk: usize) -> u64 {
    let (n, dk) = (n as u64, dk as u64);
    4 * n * n * dk + 5 * n * n
}

fn attention_weights(q: &[f64], k: &[f64], n: usize, dk: usize) -> Buffer {
    let mut s = Buffer::zeros(n * n);
    gemm(n, dk, n, q, false, k, true, &mut s, false);
    let scale = 1.0 / (dk as f64).sqrt();
    for row in s.chunks_mut(n) {
        let mut max = f64::NEG_INFINITY;
        for v in row.iter_mut() {
            *v *= scale;
            max = max.max(*v);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    s
}

fn offsets() -> impl Iterator<Item = (usize, usize)> {
    (0..3).flat_map(|ky| (0..3).map(move |kx| (ky, kx)))
}

/// `c += a · b` with explicit strides; `c` must not alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(extent(m, k, rsa, csa) as usize <= a.len());
    assert!(extent(k, n, rsb, csb) as usize <= b.len());
    assert!(extent(m, n, rsc, csc) as usize <= c.len());
    // SAFETY: the asserts above bound every accessed element inside each slice.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), rsc, csc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let y = t(&[4], &[0.0; 4]).softmax(0).unwrap();
        assert_eq!(y.to_vec(), vec![0.25; 4]);
    }

    #[test]
    fn softmax_of_logs_is_normalized_ratio() {
        let y = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).softmax(0).unwrap();
        for (got, want) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = t(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.5, -3.0]);
        let a = x.softmax(1).unwrap();
        let b = x.add_scalar(123.25).softmax(1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_bad_axis() {
        assert!(t(&[2, 2], &[0.0; 4]).softmax(2).is_err());
    }

    #[test]
    fn layer_norm_constant_gives_zero() {
        let y = t(&[3], &[4.0; 3]).layer_norm(0, None, None, 1e-5).unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn layer_norm_two_values() {
        let y = t(&[2], &[1.0, 3.0]).layer_norm(0, None, None, 1e-5).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_statistics_along_rows() {
        let x = t(&[4, 2], &[1.0, 10.0, 2.0, -3.0, 7.0, 0.5, -4.0, 2.0]);
        let y = x.layer_norm(0, None, None, 1e-5).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| y.at(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        let g6 = gelu_scalar(6.0);
        assert!((5.99..=6.0).contains(&g6), "{g6}");
    }

    #[test]
    fn glu_of_zero_gate_halves() {
        let y = t(&[2], &[3.0, 0.0]).glu(0).unwrap();
        assert_eq!(y.to_vec(), vec![1.5]);
        assert!(matches!(t(&[3], &[0.0; 3]).glu(0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn depthwise_identity_and_box_kernels() {
        let x = t(&[3, 1], &[0.0, 1.0, 0.0]);
        let ones = t(&[3, 1], &[1.0; 3]);
        assert_eq!(x.conv1d_depthwise(&ones, None).unwrap().to_vec(), vec![1.0; 3]);
        let x = t(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let delta = t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(x.conv1d_depthwise(&delta, None).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn depthwise_rejects_even_kernel() {
        let x = Tensor::zeros(&[4, 2]);
        let k = Tensor::zeros(&[2, 2]);
        assert!(matches!(x.conv1d_depthwise(&k, None), Err(Error::Config(_))));
    }

    #[test]
    fn depthwise_channels_independent() {
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[9.0, 2.0, -3.0, 4.0, 0.5, 6.0]);
        let k = t(&[3, 2], &[0.3, 0.1, -0.7, 0.9, 0.2, 0.4]);
        let ya = a.conv1d_depthwise(&k, None).unwrap();
        let yb = b.conv1d_depthwise(&k, None).unwrap();
        for r in 0..3 {
            assert_eq!(ya.at(r, 1).to_bits(), yb.at(r, 1).to_bits());
        }
    }

    #[test]
    fn conv2d_output_geometry() {
        let x = Tensor::zeros(&[100, 80, 1]);
        let w = Tensor::zeros(&[9, 4]);
        let b = Tensor::zeros(&[4]);
        let y = x.conv2d_3x3_s2(&w, &b).unwrap();
        assert_eq!(y.shape(), &[49, 39, 4]);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let (h, w, cin, cout) = (7, 5, 2, 3);
        let xv: Vec<f64> = (0..h * w * cin).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let wv: Vec<f64> = (0..9 * cin * cout).map(|i| ((i * 5 % 13) as f64 - 6.0) / 7.0).collect();
        let bv = vec![0.1, -0.2, 0.3];
        let y = t(&[h, w, cin], &xv).conv2d_3x3_s2(&t(&[9 * cin, cout], &wv), &t(&[cout], &bv)).unwrap();
        let (h2, w2) = (3, 2);
        for i in 0..h2 {
            for j in 0..w2 {
                for o in 0..cout {
                    let mut s = bv[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for c in 0..cin {
                                s += xv[((2 * i + ky) * w + 2 * j + kx) * cin + c] * wv[((ky * 3 + kx) * cin + c) * cout + o];
                            }
                        }
                    }
                    let got = y.data()[(i * w2 + j) * cout + o];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_singleton_returns_value() {
        let q = t(&[1, 3], &[0.2, -1.0, 4.0]);
        let k = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let v = t(&[1, 3], &[7.0, 8.0, 9.0]);
        let y = Tensor::attention(&q, &k, &v).unwrap();
        assert_eq!(y.to_vec(), v.to_vec());
    }

    #[test]
    fn nll_picks_targets() {
        let lp = t(&[2, 2], &[-0.1, -2.0, -3.0, -0.5]);
        let l = lp.nll(&[0, 1]).unwrap();
        assert!((l.item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(y.id(), x.id());
        let z = x.dropout(0.5, &mut rng).unwrap();
        backward(&z.sum()).unwrap();
        for (g, v) in x.grad().unwrap().iter().zip(z.data()) {
            assert!(*g == 0.0 || *g == 2.0);
            assert!(*v == 0.0 || *g == 2.0);
        }
    }
}
