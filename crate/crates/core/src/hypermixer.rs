//! HyperMixer: token mixing with weights generated by hypernetworks, and its
//! multi-head variant that mixes disjoint feature slices independently.
//!
//! For an `N×d` input `X`, two hypernetworks map every token (plus its
//! position embedding) to a `d'`-wide row, giving `W1, W2 ∈ ℝ^{N×d'}`. The
//! token-mixing MLP then treats each feature column `x_i ∈ ℝ^N` as
//!
//! ```text
//! y_i = LayerNorm(W1 · GELU(W2ᵀ · x_i))
//! ```
//!
//! so every output position depends on every input position, at a cost of
//! `O(N·d·d')`. With `k` heads each slice of `d/k` features gets its own
//! `(d/k, d'/k)` HyperMixer, and the outputs are concatenated.

use crate::error::{Error, Result};
use crate::init::Init;
use crate::position::PositionTable;
use crate::tensor::{Module, Param, Tensor};

/// Epsilon of the token-mixing layer norm.
pub const MIXER_EPS: f64 = 1e-5;

/// Normalization applied to the token-mixing output. It carries no
/// learnable gain or bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixerNorm {
    /// Normalize each feature over the token axis (the default).
    #[default]
    Tokens,
    /// Normalize each token over the feature axis.
    Features,
    Off,
}

/// Hidden width of the hypernetwork MLPs, per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HiddenWidth {
    /// Same as the head's input width, `d/k`.
    #[default]
    Model,
    /// Same as the head's output width, `d'/k`.
    Prime,
}

impl HiddenWidth {
    pub fn resolve(self, d_in: usize, d_out: usize) -> usize {
        match self {
            HiddenWidth::Model => d_in,
            HiddenWidth::Prime => d_out,
        }
    }
}

/// Two-layer perceptron `ℝ^{d_in} → ℝ^{hidden} → ℝ^{d_out}` with GELU between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w_in: Param,
    pub b_in: Param,
    pub w_out: Param,
    pub b_out: Param,
}

impl Mlp {
    fn new(prefix: &str, d_in: usize, hidden: usize, d_out: usize, init: &mut Init) -> Self {
        Mlp {
            w_in: init.xavier(&format!("{prefix}.w_in"), &[d_in, hidden], d_in, hidden),
            b_in: init.bias(&format!("{prefix}.b_in"), hidden),
            w_out: init.xavier(&format!("{prefix}.w_out"), &[hidden, d_out], hidden, d_out),
            b_out: init.bias(&format!("{prefix}.b_out"), d_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.w_in.value(), Some(&self.b_in.value()))?
            .gelu()
            .linear(&self.w_out.value(), Some(&self.b_out.value()))
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<Param> {
        vec![self.w_in.clone(), self.b_in.clone(), self.w_out.clone(), self.b_out.clone()]
    }
}

/// The pair of hypernetworks generating `W1` and `W2`.
#[derive(Debug, Clone)]
pub struct HyperNetParams {
    pub mlp1: Mlp,
    /// Shares `mlp1`'s slots when tied.
    pub mlp2: Mlp,
    tied: bool,
    d: usize,
    d_prime: usize,
}

impl HyperNetParams {
    pub fn new(d: usize, d_prime: usize, hidden: HiddenWidth, tied: bool, init: &mut Init) -> Self {
        Self::named("hypermixer", d, d_prime, hidden, tied, init)
    }

    pub(crate) fn named(
        prefix: &str,
        d: usize,
        d_prime: usize,
        hidden: HiddenWidth,
        tied: bool,
        init: &mut Init,
    ) -> Self {
        let h = hidden.resolve(d, d_prime);
        let mlp1 = Mlp::new(&format!("{prefix}.mlp1"), d, h, d_prime, init);
        let mlp2 = if tied {
            mlp1.clone()
        } else {
            Mlp::new(&format!("{prefix}.mlp2"), d, h, d_prime, init)
        };
        HyperNetParams {
            mlp1,
            mlp2,
            tied,
            d,
            d_prime,
        }
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn prime_width(&self) -> usize {
        self.d_prime
    }
}

impl Module for HyperNetParams {
    fn parameters(&self) -> Vec<Param> {
        let mut p = self.mlp1.parameters();
        if !self.tied {
            p.extend(self.mlp2.parameters());
        }
        p
    }
}

/// Row `j` of `W_k` is `MLP^k(X_j + p_j)`; returns `(W1, W2)`, each `N×d'`.
///
/// `positions`, when given, must be `N×d`.
pub fn generate_weights(x: &Tensor, positions: Option<&Tensor>, hn: &HyperNetParams) -> Result<(Tensor, Tensor)> {
    let (_, d) = x.expect_2d("generate_weights")?;
    if d != hn.d {
        return Err(Error::dim("generate_weights", x.shape(), &[hn.d, hn.d_prime]));
    }
    let input = match positions {
        Some(p) => x.add(p)?,
        None => x.clone(),
    };
    let w1 = hn.mlp1.forward(&input)?;
    let w2 = if hn.tied { w1.clone() } else { hn.mlp2.forward(&input)? };
    Ok((w1, w2))
}

/// Token-mixing MLP: for each feature column `x_i`,
/// `y_i = LayerNorm(W1 · GELU(W2ᵀ · x_i))`, normalized per `norm`.
pub fn tm_mlp(x: &Tensor, w1: &Tensor, w2: &Tensor, norm: MixerNorm) -> Result<Tensor> {
    let (n, _) = x.expect_2d("tm_mlp")?;
    let (n1, dp1) = w1.expect_2d("tm_mlp")?;
    if n1 != n {
        return Err(Error::dim("tm_mlp", x.shape(), w1.shape()));
    }
    if w2.shape() != [n, dp1] {
        return Err(Error::dim("tm_mlp", w1.shape(), w2.shape()));
    }
    let hidden = w2.transpose()?.matmul(x)?.gelu();
    let mixed = w1.matmul(&hidden)?;
    match norm {
        MixerNorm::Tokens => mixed.layer_norm(0, None, None, MIXER_EPS),
        MixerNorm::Features => mixed.layer_norm(1, None, None, MIXER_EPS),
        MixerNorm::Off => Ok(mixed),
    }
}

/// Single-head HyperMixer: `tm_mlp(X, generate_weights(X, P))`.
pub fn hypermixer_forward(
    x: &Tensor,
    hn: &HyperNetParams,
    positions: Option<&PositionTable>,
    norm: MixerNorm,
) -> Result<Tensor> {
    let (n, _) = x.expect_2d("hypermixer")?;
    let pos = positions.map(|t| t.slice(n, 0, hn.d)).transpose()?;
    let (w1, w2) = generate_weights(x, pos.as_ref(), hn)?;
    tm_mlp(x, &w1, &w2, norm)
}

/// Multi-head HyperMixer parameters: one `(d/k, d'/k)` hypernetwork pair per head.
#[derive(Debug, Clone)]
pub struct MhhmParams {
    pub heads: Vec<HyperNetParams>,
    pub norm: MixerNorm,
    d: usize,
    d_prime: usize,
}

impl MhhmParams {
    pub fn new(
        d: usize,
        d_prime: usize,
        heads: usize,
        hidden: HiddenWidth,
        tied: bool,
        norm: MixerNorm,
        init: &mut Init,
    ) -> Result<Self> {
        check_heads(d, d_prime, heads)?;
        let heads_v = (0..heads)
            .map(|l| HyperNetParams::named(&format!("mhhm.head{l}"), d / heads, d_prime / heads, hidden, tied, init))
            .collect();
        Ok(MhhmParams {
            heads: heads_v,
            norm,
            d,
            d_prime,
        })
    }

    /// Wraps existing per-head hypernetworks.
    pub fn from_heads(heads: Vec<HyperNetParams>, norm: MixerNorm) -> Result<Self> {
        let k = heads.len();
        let first = heads.first().ok_or_else(|| Error::Config("MHHM needs at least one head".into()))?;
        let (dh, dph) = (first.d, first.d_prime);
        if heads.iter().any(|h| h.d != dh || h.d_prime != dph) {
            return Err(Error::Config("MHHM heads must share widths".into()));
        }
        Ok(MhhmParams {
            heads,
            norm,
            d: dh * k,
            d_prime: dph * k,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn prime_width(&self) -> usize {
        self.d_prime
    }
}

impl Module for MhhmParams {
    fn parameters(&self) -> Vec<Param> {
        self.heads.iter().flat_map(Module::parameters).collect()
    }
}

fn check_heads(d: usize, d_prime: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) || !d_prime.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{heads} mixing heads must divide both d={d} and d'={d_prime}"
        )));
    }
    Ok(())
}

/// Splits the features into `k` contiguous slices, mixes each with its own
/// HyperMixer (positions sliced the same way) and concatenates the results.
pub fn mhhm_forward(x: &Tensor, params: &MhhmParams, positions: Option<&PositionTable>) -> Result<Tensor> {
    let (n, d) = x.expect_2d("mhhm")?;
    if d != params.d {
        return Err(Error::dim("mhhm", x.shape(), &[params.d, params.d_prime]));
    }
    let dh = d / params.heads.len();
    let outs = params
        .heads
        .iter()
        .enumerate()
        .map(|(l, hn)| {
            let (lo, hi) = (l * dh, (l + 1) * dh);
            let xs = x.slice_cols(lo, hi)?;
            let pos = positions.map(|t| t.slice(n, lo, hi)).transpose()?;
            let (w1, w2) = generate_weights(&xs, pos.as_ref(), hn)?;
            tm_mlp(&xs, &w1, &w2, params.norm)
        })
        .collect::<Result<Vec<_>>>()?;
    if outs.len() == 1 {
        Ok(outs.into_iter().next().expect("one head"))
    } else {
        Tensor::concat_cols(&outs)
    }
}

/// Shape of a (multi-head) HyperMixer for closed-form accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerShape {
    pub d: usize,
    pub d_prime: usize,
    pub heads: usize,
    pub hidden: HiddenWidth,
    pub tied: bool,
    pub positions: bool,
    pub norm: MixerNorm,
}

impl MixerShape {
    /// Default layout: hidden width `d/k`, untied, positions on, token-axis norm.
    pub fn new(d: usize, d_prime: usize, heads: usize) -> Self {
        MixerShape {
            d,
            d_prime,
            heads,
            hidden: HiddenWidth::Model,
            tied: false,
            positions: true,
            norm: MixerNorm::Tokens,
        }
    }

    /// Learnable parameters (hypernetworks only; `W1`, `W2` are generated).
    pub fn num_params(&self) -> usize {
        let (dh, dph) = (self.d / self.heads, self.d_prime / self.heads);
        let h = self.hidden.resolve(dh, dph);
        let mlp = dh * h + h + h * dph + dph;
        self.heads * mlp * if self.tied { 1 } else { 2 }
    }

    /// Closed-form FLOPs of [`mhhm_forward`] on `n` tokens.
    pub fn flops(&self, n: usize) -> MixerFlops {
        let k = self.heads as u64;
        let n = n as u64;
        let dh = (self.d / self.heads) as u64;
        let dph = (self.d_prime / self.heads) as u64;
        let h = self.hidden.resolve(dh as usize, dph as usize) as u64;
        let mlp = 2 * n * dh * h + n * h + n * h + 2 * n * h * dph + n * dph;
        let mlps = if self.tied { 1 } else { 2 };
        MixerFlops {
            positions: if self.positions { k * n * dh } else { 0 },
            hypernet: k * mlps * mlp,
            token_mixing: k * 4 * n * dh * dph,
            activation: k * dh * dph,
            norm: if self.norm == MixerNorm::Off { 0 } else { k * 5 * n * dh },
        }
    }
}

/// FLOP breakdown of a (multi-head) HyperMixer forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MixerFlops {
    pub positions: u64,
    /// Both hypernetwork MLPs (one when tied).
    pub hypernet: u64,
    /// The two mixing products `W2ᵀ·X` and `W1·H`: `4·N·d·d'/k`.
    pub token_mixing: u64,
    pub activation: u64,
    pub norm: u64,
}

impl MixerFlops {
    pub fn total(&self) -> u64 {
        self.positions + self.hypernet + self.token_mixing + self.activation + self.norm
    }
}

/// Default-layout FLOPs of a `k`-head HyperMixer on `n` tokens.
pub fn mhhm_flops(n: usize, d: usize, d_prime: usize, heads: usize) -> MixerFlops {
    MixerShape::new(d, d_prime, heads).flops(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::measure;

    fn rand_x(n: usize, d: usize, seed: u64) -> Tensor {
        let p = Init::new(seed).uniform("x", &[n, d], 1.0);
        p.value().detach()
    }

    #[test]
    fn single_token_weights_are_mlp_outputs() {
        let hn = HyperNetParams::new(3, 5, HiddenWidth::Model, false, &mut Init::new(1));
        let x = rand_x(1, 3, 2);
        let (w1, w2) = generate_weights(&x, None, &hn).unwrap();
        assert_eq!(w1.to_vec(), hn.mlp1.forward(&x).unwrap().to_vec());
        assert_eq!(w2.to_vec(), hn.mlp2.forward(&x).unwrap().to_vec());
        assert_eq!(w1.shape(), &[1, 5]);
    }

    #[test]
    fn duplicated_tokens_give_identical_rows() {
        let hn = HyperNetParams::new(2, 4, HiddenWidth::Model, false, &mut Init::new(3));
        let x = Tensor::from_vec(&[3, 2], vec![0.3, -0.7, 0.3, -0.7, 1.0, 2.0]).unwrap();
        let (w1, _) = generate_weights(&x, None, &hn).unwrap();
        assert_eq!(w1.data()[0..4], w1.data()[4..8]);
    }

    #[test]
    fn zero_w1_gives_zero_output() {
        let x = rand_x(4, 3, 5);
        let w1 = Tensor::zeros(&[4, 6]);
        let w2 = rand_x(4, 6, 6);
        let y = tm_mlp(&x, &w1, &w2, MixerNorm::Tokens).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixing_shape_mismatch() {
        let x = rand_x(4, 3, 5);
        let w = rand_x(5, 6, 6);
        assert!(matches!(tm_mlp(&x, &w, &w, MixerNorm::Tokens), Err(Error::Dimension { .. })));
    }

    #[test]
    fn heads_must_divide_both_widths() {
        let r = MhhmParams::new(8, 12, 8, HiddenWidth::Model, false, MixerNorm::Tokens, &mut Init::new(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn tied_shares_slots() {
        let hn = HyperNetParams::new(4, 8, HiddenWidth::Model, true, &mut Init::new(0));
        assert!(hn.mlp1.w_in.same_slot(&hn.mlp2.w_in));
        assert_eq!(hn.num_params(), 4 * 4 + 4 + 4 * 8 + 8);
    }

    #[test]
    fn capacity_error_from_short_table() {
        let p = MhhmParams::new(4, 8, 2, HiddenWidth::Model, false, MixerNorm::Tokens, &mut Init::new(0)).unwrap();
        let table = PositionTable::new(3, 4);
        let x = rand_x(5, 4, 1);
        assert!(matches!(mhhm_forward(&x, &p, Some(&table)), Err(Error::Capacity { .. })));
    }

    #[test]
    fn closed_forms_match_instrumentation() {
        let cases = [
            (5, 4, 8, 1, HiddenWidth::Model, false, true, MixerNorm::Tokens),
            (7, 8, 16, 2, HiddenWidth::Prime, false, false, MixerNorm::Features),
            (6, 8, 32, 4, HiddenWidth::Model, true, true, MixerNorm::Off),
            (9, 16, 64, 8, HiddenWidth::Model, false, true, MixerNorm::Tokens),
        ];
        for (n, d, dp, k, hidden, tied, pos, norm) in cases {
            let p = MhhmParams::new(d, dp, k, hidden, tied, norm, &mut Init::new(9)).unwrap();
            let shape = MixerShape { d, d_prime: dp, heads: k, hidden, tied, positions: pos, norm };
            assert_eq!(p.num_params(), shape.num_params());
            let table = PositionTable::new(16, d);
            let x = rand_x(n, d, 4);
            let (_, s) = measure(|| mhhm_forward(&x, &p, pos.then_some(&table)).unwrap());
            assert_eq!(s.flops, shape.flops(n).total(), "{shape:?}");
        }
    }

    #[test]
    fn token_mixing_divides_by_heads() {
        let one = mhhm_flops(1000, 144, 576, 1).token_mixing;
        let eight = mhhm_flops(1000, 144, 576, 8).token_mixing;
        assert_eq!(one, 8 * eight);
    }

    #[test]
    fn flops_linear_in_length() {
        for k in [1, 8] {
            for n in [512, 1024, 2048] {
                let r = mhhm_flops(2 * n, 144, 576, k).total() as f64 / mhhm_flops(n, 144, 576, k).total() as f64;
                assert!((1.9..=2.1).contains(&r), "k={k} n={n} r={r}");
            }
        }
    }
}
