//! Scaled dot-product attention and multi-head self-attention (MHSA), the
//! quadratic-cost global interaction baseline.

use crate::error::{Error, Result};
use crate::init::Init;
use crate::position::PositionTable;
use crate::tensor::{attention_flops, Module, Param, Tensor};

/// `softmax(Q·Kᵀ/√d_k)·V` for `N×d_k` inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Tensor::attention(q, k, v)
}

/// Projections of a `k`-head self-attention layer over `d` features.
///
/// The per-head `d×(d/k)` projections are stored side by side in one `d×d`
/// matrix; head `i` owns columns `i·d/k .. (i+1)·d/k`. All four projections
/// carry a bias.
#[derive(Debug, Clone)]
pub struct MhsaParams {
    pub w_q: Param,
    pub b_q: Param,
    pub w_k: Param,
    pub b_k: Param,
    pub w_v: Param,
    pub b_v: Param,
    pub w_o: Param,
    pub b_o: Param,
    heads: usize,
    d: usize,
}

impl MhsaParams {
    pub fn new(d: usize, heads: usize, init: &mut Init) -> Result<Self> {
        check_heads(d, heads)?;
        let mut proj = |name: &str| init.xavier(name, &[d, d], d, d);
        let (w_q, w_k, w_v, w_o) = (proj("mhsa.w_q"), proj("mhsa.w_k"), proj("mhsa.w_v"), proj("mhsa.w_o"));
        Ok(MhsaParams {
            w_q,
            b_q: init.bias("mhsa.b_q", d),
            w_k,
            b_k: init.bias("mhsa.b_k", d),
            w_v,
            b_v: init.bias("mhsa.b_v", d),
            w_o,
            b_o: init.bias("mhsa.b_o", d),
            heads,
            d,
        })
    }

    /// Builds parameters from explicit values (row-major `d×d` matrices).
    #[allow(clippy::too_many_arguments)]
    pub fn from_values(
        d: usize,
        heads: usize,
        w_q: Vec<f64>,
        w_k: Vec<f64>,
        w_v: Vec<f64>,
        w_o: Vec<f64>,
        biases: Option<[Vec<f64>; 4]>,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let [b_q, b_k, b_v, b_o] = biases.unwrap_or_else(|| std::array::from_fn(|_| vec![0.0; d]));
        Ok(MhsaParams {
            w_q: Param::new("mhsa.w_q", &[d, d], w_q)?,
            b_q: Param::new("mhsa.b_q", &[d], b_q)?,
            w_k: Param::new("mhsa.w_k", &[d, d], w_k)?,
            b_k: Param::new("mhsa.b_k", &[d], b_k)?,
            w_v: Param::new("mhsa.w_v", &[d, d], w_v)?,
            b_v: Param::new("mhsa.b_v", &[d], b_v)?,
            w_o: Param::new("mhsa.w_o", &[d, d], w_o)?,
            b_o: Param::new("mhsa.b_o", &[d], b_o)?,
            heads,
            d,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }
}

impl Module for MhsaParams {
    fn parameters(&self) -> Vec<Param> {
        vec![
            self.w_q.clone(),
            self.b_q.clone(),
            self.w_k.clone(),
            self.b_k.clone(),
            self.w_v.clone(),
            self.b_v.clone(),
            self.w_o.clone(),
            self.b_o.clone(),
        ]
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} attention heads do not divide width {d}")));
    }
    Ok(())
}

/// `Concat(head_1, …, head_k)·W_O + b_O` with
/// `head_i = attention(X·W_Q,i, X·W_K,i, X·W_V,i)`.
///
/// With `positions`, the table's first `N` rows are added to `X` before the
/// projections.
pub fn mhsa_forward(x: &Tensor, params: &MhsaParams, positions: Option<&PositionTable>) -> Result<Tensor> {
    let (n, d) = x.expect_2d("mhsa")?;
    if d != params.d {
        return Err(Error::dim("mhsa", x.shape(), &[params.d, params.d]));
    }
    let x = match positions {
        Some(table) => x.add(&table.rows(n)?)?,
        None => x.clone(),
    };
    let q = x.linear(&params.w_q.value(), Some(&params.b_q.value()))?;
    let k = x.linear(&params.w_k.value(), Some(&params.b_k.value()))?;
    let v = x.linear(&params.w_v.value(), Some(&params.b_v.value()))?;
    let dk = params.head_width();
    let heads = (0..params.heads)
        .map(|h| {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            attention(&q.slice_cols(lo, hi)?, &k.slice_cols(lo, hi)?, &v.slice_cols(lo, hi)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = if heads.len() == 1 {
        heads.into_iter().next().expect("one head")
    } else {
        Tensor::concat_cols(&heads)?
    };
    merged.linear(&params.w_o.value(), Some(&params.b_o.value()))
}

/// Closed-form FLOPs of [`mhsa_forward`]:
/// `8·N·d² + 4·N·d` for the four biased projections, `k·(4·N²·d/k + 5·N²)`
/// for the attention heads, plus `N·d` when positions are added.
pub fn mhsa_flops(n: usize, d: usize, heads: usize, positions: bool) -> u64 {
    let (nn, dd) = (n as u64, d as u64);
    let projections = 4 * (2 * nn * dd * dd + nn * dd);
    let attn = heads as u64 * attention_flops(n, d / heads);
    projections + attn + if positions { nn * dd } else { 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::measure;

    fn eye(d: usize) -> Vec<f64> {
        (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn single_token_identity_projections() {
        let d = 4;
        let p = MhsaParams::from_values(d, 1, eye(d), eye(d), eye(d), eye(d), None).unwrap();
        let x = Tensor::from_vec(&[1, d], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mhsa_forward(&x, &p, None).unwrap().to_vec(), x.to_vec());
        let table = PositionTable::new(8, d);
        let with_pos = mhsa_forward(&x, &p, Some(&table)).unwrap();
        let want: Vec<f64> = x.data().iter().zip(table.rows(1).unwrap().data()).map(|(a, b)| a + b).collect();
        assert_eq!(with_pos.to_vec(), want);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut init = Init::new(0);
        assert!(matches!(MhsaParams::new(6, 4, &mut init), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_for_all_head_counts() {
        let x = Tensor::from_vec(&[5, 8], (0..40).map(|i| (i as f64).sin()).collect()).unwrap();
        for k in [1, 2, 4, 8] {
            let p = MhsaParams::new(8, k, &mut Init::new(k as u64)).unwrap();
            assert_eq!(mhsa_forward(&x, &p, None).unwrap().shape(), &[5, 8]);
        }
    }

    #[test]
    fn uniform_scores_average_values() {
        let q = Tensor::from_vec(&[3, 2], vec![0.0; 6]).unwrap();
        let k = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let v = Tensor::from_vec(&[3, 2], vec![1.0, 4.0, 2.0, 5.0, 6.0, 0.0]).unwrap();
        let y = attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert!((y.at(r, 0) - 3.0).abs() < 1e-15);
            assert!((y.at(r, 1) - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_matches_counter() {
        for &(n, d, k, pos) in &[(1, 4, 1, false), (7, 8, 2, true), (12, 16, 4, false), (9, 24, 8, true)] {
            let p = MhsaParams::new(d, k, &mut Init::new(3)).unwrap();
            let x = Tensor::full(&[n, d], 0.1);
            let table = PositionTable::new(16, d);
            let (_, s) = measure(|| mhsa_forward(&x, &p, pos.then_some(&table)).unwrap());
            assert_eq!(s.flops, mhsa_flops(n, d, k, pos), "n={n} d={d} k={k}");
        }
    }

    #[test]
    fn flops_quadratic_and_positive() {
        assert!(mhsa_flops(1, 144, 8, false) > 0);
        let r = mhsa_flops(4096, 144, 8, false) as f64 / mhsa_flops(2048, 144, 8, false) as f64;
        assert!(r > 3.5, "{r}");
    }
}
