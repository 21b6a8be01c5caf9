//! Linear algebra and structural operations.
//!
//! FLOP convention: a multiply-add is 2 FLOPs, every other elementwise
//! arithmetic step or reduction term is 1 FLOP per element; data movement
//! (transpose, slicing, concatenation, reshape) is free.

use super::instrument::add_flops;
use super::{Buffer, Tensor};
use crate::error::{Error, Result};

/// `c (m×n) = a (m×k) · b (k×n)`, optionally transposed operands and
/// accumulation into `c`. Operands are row-major in their stored layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the logical extents checked above, and
    // `c` is a distinct mutable borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl Tensor {
    /// Matrix product of an `m×k` and a `k×n` matrix.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut out = Buffer::zeros(m * n);
        gemm(m, k, n, self.data(), false, other.data(), false, &mut out, false);
        add_flops(2 * (m * k * n) as u64);
        Ok(Tensor::from_op("matmul", vec![m, n], out, &[self, other], move |ctx| {
            let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
            let ga = ctx.needs[0].then(|| {
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, ctx.grad_out, false, b.data(), true, &mut g, false);
                g
            });
            let gb = ctx.needs[1].then(|| {
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, ctx.grad_out, false, &mut g, false);
                g
            });
            vec![ga, gb]
        }))
    }

    /// Affine map `x·W + b` for `x: N×in`, `W: in×out`, `b: out`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (rows, inp) = self.expect_2d("linear")?;
        let (inp2, out_w) = weight.expect_2d("linear")?;
        if inp != inp2 {
            return Err(Error::dim("linear", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.numel() != out_w {
                return Err(Error::dim("linear bias", weight.shape(), b.shape()));
            }
        }
        let mut out = Buffer::zeros(rows * out_w);
        gemm(rows, inp, out_w, self.data(), false, weight.data(), false, &mut out, false);
        add_flops(2 * (rows * inp * out_w) as u64);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            for row in out.chunks_mut(out_w) {
                row.iter_mut().zip(b.data()).for_each(|(o, bb)| *o += bb);
            }
            add_flops((rows * out_w) as u64);
            parents.push(b);
        }
        Ok(Tensor::from_op("linear", vec![rows, out_w], out, &parents, move |ctx| {
            let (x, w) = (&ctx.parents[0], &ctx.parents[1]);
            let gx = ctx.needs[0].then(|| {
                let mut g = vec![0.0; rows * inp];
                gemm(rows, out_w, inp, ctx.grad_out, false, w.data(), true, &mut g, false);
                g
            });
            let gw = ctx.needs[1].then(|| {
                let mut g = vec![0.0; inp * out_w];
                gemm(inp, rows, out_w, x.data(), true, ctx.grad_out, false, &mut g, false);
                g
            });
            let mut grads = vec![gx, gw];
            if ctx.parents.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut g = vec![0.0; out_w];
                    for row in ctx.grad_out.chunks(out_w) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    g
                }));
            }
            grads
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("transpose")?;
        let out = Buffer::new(transpose_raw(self.data(), r, c));
        Ok(Tensor::from_op("transpose", vec![c, r], out, &[self], move |ctx| {
            vec![Some(transpose_raw(ctx.grad_out, c, r))]
        }))
    }

    fn zip_with(
        &self,
        other: &Tensor,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        rule: impl Fn(&super::BackwardCtx<'_>) -> super::ParentGrads + Send + Sync + 'static,
    ) -> Result<Tensor> {
        same_shape(name, self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        add_flops(data.len() as u64);
        Ok(Tensor::from_op(name, self.shape().to_vec(), Buffer::new(data), &[self, other], rule))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad_out.to_vec()),
                ctx.needs[1].then(|| ctx.grad_out.to_vec()),
            ]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad_out.to_vec()),
                ctx.needs[1].then(|| ctx.grad_out.iter().map(|g| -g).collect()),
            ]
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b, |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            vec![
                ctx.needs[0].then(|| ctx.grad_out.iter().zip(b).map(|(g, y)| g * y).collect()),
                ctx.needs[1].then(|| ctx.grad_out.iter().zip(a).map(|(g, x)| g * x).collect()),
            ]
        })
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| c * x).collect();
        add_flops(data.len() as u64);
        Tensor::from_op("scale", self.shape().to_vec(), Buffer::new(data), &[self], move |ctx| {
            vec![Some(ctx.grad_out.iter().map(|g| c * g).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x + c).collect();
        add_flops(data.len() as u64);
        Tensor::from_op("add_scalar", self.shape().to_vec(), Buffer::new(data), &[self], |ctx| {
            vec![Some(ctx.grad_out.to_vec())]
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        add_flops(n as u64);
        let s = Buffer::new(vec![self.data().iter().sum()]);
        Tensor::from_op("sum", vec![1], s, &[self], move |ctx| vec![Some(vec![ctx.grad_out[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        add_flops(n as u64);
        let s = Buffer::new(vec![self.data().iter().sum::<f64>() / n as f64]);
        Tensor::from_op("mean", vec![1], s, &[self], move |ctx| {
            vec![Some(vec![ctx.grad_out[0] / n as f64; n])]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.0.data.clone(), &[self], |ctx| {
            vec![Some(ctx.grad_out.to_vec())]
        }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.expect_2d("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Input(format!("column range {start}..{end} outside 0..{c}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in self.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(Tensor::from_op("slice_cols", vec![r, w], Buffer::new(out), &[self], move |ctx| {
            let mut g = vec![0.0; r * c];
            for (dst, src) in g.chunks_mut(c).zip(ctx.grad_out.chunks(w)) {
                dst[start..end].copy_from_slice(src);
            }
            vec![Some(g)]
        }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.expect_2d("slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Input(format!("row range {start}..{end} outside 0..{r}")));
        }
        let out = Buffer::new(self.data()[start * c..end * c].to_vec());
        Ok(Tensor::from_op("slice_rows", vec![end - start, c], out, &[self], move |ctx| {
            let mut g = vec![0.0; r * c];
            g[start * c..end * c].copy_from_slice(ctx.grad_out);
            vec![Some(g)]
        }))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of zero tensors".into()))?;
        let r = first.expect_2d("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.expect_2d("concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::from_op("concat_cols", vec![r, total], Buffer::new(out), &refs, move |ctx| {
            let mut offset = 0;
            widths
                .iter()
                .zip(ctx.needs)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut g = Vec::with_capacity(r * w);
                        for row in ctx.grad_out.chunks(total) {
                            g.extend_from_slice(&row[start..start + w]);
                        }
                        g
                    })
                })
                .collect()
        }))
    }
}

pub(crate) fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, measure};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(i2.matmul(&b).unwrap().to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[3, 4]);
        let b = t(&[4, 2], &[1.0, -2.0, 3.0, 4.5, 0.1, 7.0, -8.0, 2.0]);
        let c = z.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_counts_two_mkn() {
        let a = Tensor::zeros(&[3, 5]);
        let b = Tensor::zeros(&[5, 7]);
        let (_, s) = measure(|| a.matmul(&b).unwrap());
        assert_eq!(s.flops, 2 * 3 * 5 * 7);
    }

    #[test]
    fn flops_are_additive() {
        let a = Tensor::full(&[4, 4], 0.5);
        let (_, f1) = measure(|| a.matmul(&a).unwrap());
        let (_, f2) = measure(|| a.scale(2.0));
        let (_, both) = measure(|| a.matmul(&a).unwrap().scale(2.0));
        assert_eq!(both.flops, f1.flops + f2.flops);
    }

    #[test]
    fn matmul_gradients_match_closed_form() {
        // d sum(A·B)/dA = 1·Bᵀ, d/dB = Aᵀ·1
        let a = Tensor::leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::leaf(&[3, 2], vec![1.0, -1.0, 0.5, 2.0, 0.0, 3.0]).unwrap();
        backward(&a.matmul(&b).unwrap().sum()).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 2.5, 3.0, 0.0, 2.5, 3.0]);
        assert_eq!(b.grad().unwrap(), vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn slice_and_concat_invert() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let a = x.slice_cols(0, 1).unwrap();
        let b = x.slice_cols(1, 4).unwrap();
        assert_eq!(b.to_vec(), vec![2.0, 3.0, 4.0, 6.0, 7.0, 8.0]);
        assert_eq!(Tensor::concat_cols(&[a, b]).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn transpose_round_trip() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(y.transpose().unwrap().to_vec(), x.to_vec());
    }
}
