//! Encoder blocks with a pluggable global interaction module.
//!
//! A Conformer block runs, with residual connections,
//!
//! ```text
//! x1 = x  + ½·FFN1(x)
//! x2 = x1 + GI(x1)
//! x3 = x2 + Conv(x2)
//! x4 = x3 + ½·FFN2(x3)
//! y  = LayerNorm(x4)
//! ```
//!
//! where GI is either multi-head self-attention (Conformer) or multi-head
//! HyperMixer (HyperConformer). A Transformer block is the pre-norm pair
//! `x1 = x + GI(x)`, `y = x1 + FFN(x1)`. Every sub-module starts with its own
//! feature-axis layer norm.
//!
//! Position embeddings are added once to the frontend output. Inside the
//! blocks MHSA sees no further positions, while each HyperMixer adds the
//! matching slice of the table to its hypernetwork inputs.

use crate::attention::{mhsa_flops, mhsa_forward, MhsaParams};
use crate::configs::{BlockKind, EncoderConfig, GiKind};
use crate::error::{Error, Result};
use crate::hypermixer::{mhhm_forward, MhhmParams, MixerShape};
use crate::init::Init;
use crate::position::{PositionTable, DEFAULT_MAX_LEN};
use crate::tensor::{Module, Param, Tensor};

/// Epsilon of every feature-axis layer norm in the encoder.
pub const NORM_EPS: f64 = 1e-5;

/// Number of log-Mel features per input frame.
pub const FEATURE_DIM: usize = 80;

/// Learnable gain and bias of a feature-axis layer norm.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Param,
    pub bias: Param,
}

impl Norm {
    pub fn new(name: &str, d: usize, init: &mut Init) -> Self {
        Norm {
            gain: init.constant(&format!("{name}.gain"), &[d], 1.0),
            bias: init.constant(&format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(1, Some(&self.gain.value()), Some(&self.bias.value()), NORM_EPS)
    }
}

impl Module for Norm {
    fn parameters(&self) -> Vec<Param> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}

/// `LayerNorm → Linear(d→d_ffn) → GELU → Linear(d_ffn→d)`.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub norm: Norm,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl FfnParams {
    pub fn new(name: &str, d: usize, d_ffn: usize, init: &mut Init) -> Self {
        FfnParams {
            norm: Norm::new(&format!("{name}.norm"), d, init),
            w1: init.xavier(&format!("{name}.w1"), &[d, d_ffn], d, d_ffn),
            b1: init.bias(&format!("{name}.b1"), d_ffn),
            w2: init.xavier(&format!("{name}.w2"), &[d_ffn, d], d_ffn, d),
            b2: init.bias(&format!("{name}.b2"), d),
        }
    }
}

impl Module for FfnParams {
    fn parameters(&self) -> Vec<Param> {
        let mut p = self.norm.parameters();
        p.extend([self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]);
        p
    }
}

pub fn ffn_module(x: &Tensor, p: &FfnParams) -> Result<Tensor> {
    p.norm
        .forward(x)?
        .linear(&p.w1.value(), Some(&p.b1.value()))?
        .gelu()
        .linear(&p.w2.value(), Some(&p.b2.value()))
}

/// `LayerNorm → pointwise d→2d → GLU → depthwise conv K → LayerNorm → Swish → pointwise d→d`.
///
/// The normalization after the depthwise convolution is a layer norm, so the
/// module never looks across batch items.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub norm: Norm,
    pub pw1: Param,
    pub pw1_b: Param,
    pub dw: Param,
    pub dw_b: Param,
    pub dw_norm: Norm,
    pub pw2: Param,
    pub pw2_b: Param,
}

impl ConvParams {
    pub fn new(name: &str, d: usize, kernel: usize, init: &mut Init) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {kernel}")));
        }
        Ok(ConvParams {
            norm: Norm::new(&format!("{name}.norm"), d, init),
            pw1: init.xavier(&format!("{name}.pw1"), &[d, 2 * d], d, 2 * d),
            pw1_b: init.bias(&format!("{name}.pw1_b"), 2 * d),
            dw: init.xavier(&format!("{name}.dw"), &[kernel, d], kernel, 1),
            dw_b: init.bias(&format!("{name}.dw_b"), d),
            dw_norm: Norm::new(&format!("{name}.dw_norm"), d, init),
            pw2: init.xavier(&format!("{name}.pw2"), &[d, d], d, d),
            pw2_b: init.bias(&format!("{name}.pw2_b"), d),
        })
    }

    pub fn kernel(&self) -> usize {
        self.dw.shape()[0]
    }
}

impl Module for ConvParams {
    fn parameters(&self) -> Vec<Param> {
        let mut p = self.norm.parameters();
        p.extend([self.pw1.clone(), self.pw1_b.clone(), self.dw.clone(), self.dw_b.clone()]);
        p.extend(self.dw_norm.parameters());
        p.extend([self.pw2.clone(), self.pw2_b.clone()]);
        p
    }
}

pub fn conv_module(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let h = p.norm.forward(x)?.linear(&p.pw1.value(), Some(&p.pw1_b.value()))?.glu(1)?;
    let h = h.conv1d_depthwise(&p.dw.value(), Some(&p.dw_b.value()))?;
    p.dw_norm.forward(&h)?.swish().linear(&p.pw2.value(), Some(&p.pw2_b.value()))
}

/// The mechanism that mixes information across all positions.
#[derive(Debug, Clone)]
pub enum GlobalInteraction {
    Mhsa(MhsaParams),
    HyperMixer(MhhmParams),
}

impl GlobalInteraction {
    pub fn kind(&self) -> GiKind {
        match self {
            GlobalInteraction::Mhsa(_) => GiKind::Mhsa,
            GlobalInteraction::HyperMixer(_) => GiKind::HyperMixer,
        }
    }

    pub fn heads(&self) -> usize {
        match self {
            GlobalInteraction::Mhsa(p) => p.heads(),
            GlobalInteraction::HyperMixer(p) => p.num_heads(),
        }
    }

    /// `ℝ^{N×d} → ℝ^{N×d}`. Only the HyperMixer consumes `positions`.
    pub fn forward(&self, x: &Tensor, positions: Option<&PositionTable>) -> Result<Tensor> {
        match self {
            GlobalInteraction::Mhsa(p) => mhsa_forward(x, p, None),
            GlobalInteraction::HyperMixer(p) => mhhm_forward(x, p, positions),
        }
    }
}

impl Module for GlobalInteraction {
    fn parameters(&self) -> Vec<Param> {
        match self {
            GlobalInteraction::Mhsa(p) => p.parameters(),
            GlobalInteraction::HyperMixer(p) => p.parameters(),
        }
    }
}

/// A global interaction mechanism behind its pre-norm.
#[derive(Debug, Clone)]
pub struct GiModule {
    pub norm: Norm,
    pub gi: GlobalInteraction,
}

impl GiModule {
    pub fn new(name: &str, cfg: &EncoderConfig, init: &mut Init) -> Result<Option<Self>> {
        let d = cfg.d_model;
        let gi = match cfg.gi_kind {
            GiKind::None => return Ok(None),
            GiKind::Mhsa => GlobalInteraction::Mhsa(MhsaParams::new(d, cfg.heads, init)?),
            GiKind::HyperMixer => GlobalInteraction::HyperMixer(MhhmParams::new(
                d,
                cfg.d_prime,
                cfg.heads,
                cfg.hypernet_hidden,
                cfg.tied_hypernets,
                cfg.mixer_norm,
                init,
            )?),
        };
        Ok(Some(GiModule {
            norm: Norm::new(&format!("{name}.norm"), d, init),
            gi,
        }))
    }

    pub fn forward(&self, x: &Tensor, positions: Option<&PositionTable>) -> Result<Tensor> {
        self.gi.forward(&self.norm.forward(x)?, positions)
    }
}

impl Module for GiModule {
    fn parameters(&self) -> Vec<Param> {
        let mut p = self.norm.parameters();
        p.extend(self.gi.parameters());
        p
    }
}

/// Parameters of one encoder block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub kind: BlockKind,
    pub ffn1: FfnParams,
    /// Second (top) feed-forward module; Conformer blocks only.
    pub ffn2: Option<FfnParams>,
    /// `None` removes global interaction entirely (local-only ablation).
    pub gi: Option<GiModule>,
    /// Convolution module; Conformer blocks only.
    pub conv: Option<ConvParams>,
    /// Closing layer norm; Conformer blocks only.
    pub final_norm: Option<Norm>,
}

impl BlockParams {
    pub fn new(name: &str, cfg: &EncoderConfig, init: &mut Init) -> Result<Self> {
        let d = cfg.d_model;
        let ffn1 = FfnParams::new(&format!("{name}.ffn1"), d, cfg.d_ffn, init);
        let gi = GiModule::new(&format!("{name}.gi"), cfg, init)?;
        Ok(match cfg.block {
            BlockKind::Conformer => BlockParams {
                kind: cfg.block,
                ffn1,
                gi,
                conv: Some(ConvParams::new(&format!("{name}.conv"), d, cfg.kernel, init)?),
                ffn2: Some(FfnParams::new(&format!("{name}.ffn2"), d, cfg.d_ffn, init)),
                final_norm: Some(Norm::new(&format!("{name}.norm"), d, init)),
            },
            BlockKind::Transformer => BlockParams {
                kind: cfg.block,
                ffn1,
                gi,
                conv: None,
                ffn2: None,
                final_norm: None,
            },
        })
    }
}

impl Module for BlockParams {
    fn parameters(&self) -> Vec<Param> {
        let mut p = self.ffn1.parameters();
        if let Some(gi) = &self.gi {
            p.extend(gi.parameters());
        }
        if let Some(c) = &self.conv {
            p.extend(c.parameters());
        }
        if let Some(f) = &self.ffn2 {
            p.extend(f.parameters());
        }
        if let Some(n) = &self.final_norm {
            p.extend(n.parameters());
        }
        p
    }
}

fn missing(part: &str) -> Error {
    Error::Config(format!("conformer block without {part}"))
}

pub fn conformer_block(x: &Tensor, p: &BlockParams, positions: Option<&PositionTable>) -> Result<Tensor> {
    match p.kind {
        BlockKind::Conformer => {
            let x1 = x.add(&ffn_module(x, &p.ffn1)?.scale(0.5))?;
            let x2 = match &p.gi {
                Some(gi) => x1.add(&gi.forward(&x1, positions)?)?,
                None => x1,
            };
            let conv = p.conv.as_ref().ok_or_else(|| missing("convolution module"))?;
            let x3 = x2.add(&conv_module(&x2, conv)?)?;
            let ffn2 = p.ffn2.as_ref().ok_or_else(|| missing("second feed-forward"))?;
            let x4 = x3.add(&ffn_module(&x3, ffn2)?.scale(0.5))?;
            p.final_norm.as_ref().ok_or_else(|| missing("final norm"))?.forward(&x4)
        }
        BlockKind::Transformer => {
            let x1 = match &p.gi {
                Some(gi) => x.add(&gi.forward(x, positions)?)?,
                None => x.clone(),
            };
            x1.add(&ffn_module(&x1, &p.ffn1)?)
        }
    }
}

/// Output length of one 3-wide, stride-2, unpadded convolution stage.
pub fn stage_len(len: usize) -> usize {
    len.saturating_sub(1) / 2
}

/// Frames after the two-stage frontend: `⌊(⌊(T−1)/2⌋ − 1)/2⌋`.
pub fn subsampled_len(frames: usize) -> usize {
    stage_len(stage_len(frames))
}

/// Minimum input length accepted by the frontend.
pub const MIN_FRAMES: usize = 8;

/// Two 3×3 stride-2 convolutions (ReLU after each) over the time×frequency
/// plane, channels `1 → d → d`, then a projection of the flattened
/// frequency×channel axis to `d`.
#[derive(Debug, Clone)]
pub struct FrontendParams {
    pub conv1_w: Param,
    pub conv1_b: Param,
    pub conv2_w: Param,
    pub conv2_b: Param,
    pub proj_w: Param,
    pub proj_b: Param,
    features: usize,
    d: usize,
}

impl FrontendParams {
    pub fn new(features: usize, d: usize, init: &mut Init) -> Result<Self> {
        if features < 7 {
            return Err(Error::Config(format!("frontend needs at least 7 feature bins, got {features}")));
        }
        let f2 = subsampled_len(features);
        Ok(FrontendParams {
            conv1_w: init.xavier("frontend.conv1_w", &[9, d], 9, 9 * d),
            conv1_b: init.bias("frontend.conv1_b", d),
            conv2_w: init.xavier("frontend.conv2_w", &[9 * d, d], 9 * d, 9 * d),
            conv2_b: init.bias("frontend.conv2_b", d),
            proj_w: init.xavier("frontend.proj_w", &[f2 * d, d], f2 * d, d),
            proj_b: init.bias("frontend.proj_b", d),
            features,
            d,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, f) = x.expect_2d("frontend")?;
        if f != self.features {
            return Err(Error::dim("frontend", x.shape(), &[t, self.features]));
        }
        if t < MIN_FRAMES {
            return Err(Error::Input(format!("frontend needs at least {MIN_FRAMES} frames, got {t}")));
        }
        let h = x
            .reshape(&[t, f, 1])?
            .conv2d_3x3_s2(&self.conv1_w.value(), &self.conv1_b.value())?
            .relu()
            .conv2d_3x3_s2(&self.conv2_w.value(), &self.conv2_b.value())?
            .relu();
        let (t2, f2) = (h.shape()[0], h.shape()[1]);
        h.reshape(&[t2, f2 * self.d])?
            .linear(&self.proj_w.value(), Some(&self.proj_b.value()))
    }
}

impl Module for FrontendParams {
    fn parameters(&self) -> Vec<Param> {
        vec![
            self.conv1_w.clone(),
            self.conv1_b.clone(),
            self.conv2_w.clone(),
            self.conv2_b.clone(),
            self.proj_w.clone(),
            self.proj_b.clone(),
        ]
    }
}

pub fn conv2d_subsample(x: &Tensor, p: &FrontendParams) -> Result<Tensor> {
    p.forward(x)
}

/// Frontend, position table and block stack of one encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub frontend: FrontendParams,
    pub positions: PositionTable,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Norm,
}

impl EncoderParams {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let frontend = FrontendParams::new(FEATURE_DIM, cfg.d_model, &mut init)?;
        let blocks = (0..cfg.n_layers)
            .map(|i| BlockParams::new(&format!("block{i}"), cfg, &mut init))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParams {
            frontend,
            positions: PositionTable::new(DEFAULT_MAX_LEN, cfg.d_model),
            blocks,
            final_norm: Norm::new("encoder.norm", cfg.d_model, &mut init),
        })
    }
}

impl Module for EncoderParams {
    fn parameters(&self) -> Vec<Param> {
        let mut p = self.frontend.parameters();
        for b in &self.blocks {
            p.extend(b.parameters());
        }
        p.extend(self.final_norm.parameters());
        p
    }
}

/// Block stack after the frontend: add positions, run blocks, final norm.
pub fn encode_frames(h: &Tensor, blocks: &[BlockParams], positions: &PositionTable, final_norm: &Norm) -> Result<Tensor> {
    let n = h.rows();
    let mut h = h.add(&positions.rows(n)?)?;
    for b in blocks {
        h = conformer_block(&h, b, Some(positions))?;
    }
    final_norm.forward(&h)
}

/// `T×80` features → `N×d` encodings.
pub fn encoder_forward(features: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let h = params.frontend.forward(features)?;
    encode_frames(&h, &params.blocks, &params.positions, &params.final_norm)
}

/// Closed-form FLOP counts of one encoder forward pass, by sub-module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopBreakdown {
    pub frontend: u64,
    /// Feed-forward modules including their norms.
    pub ffn: u64,
    /// Global interaction modules including their norms.
    pub gi: u64,
    pub conv: u64,
    /// Positions, residual additions, half-step scaling and closing norms.
    pub other: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.frontend + self.ffn + self.gi + self.conv + self.other
    }
}

const AFFINE_NORM: u64 = 7;

pub fn ffn_flops(n: usize, d: usize, d_ffn: usize) -> u64 {
    let (n, d, f) = (n as u64, d as u64, d_ffn as u64);
    AFFINE_NORM * n * d + 4 * n * d * f + 2 * n * f + n * d
}

pub fn conv_flops(n: usize, d: usize, kernel: usize) -> u64 {
    let (n, d, k) = (n as u64, d as u64, kernel as u64);
    // norm, pw1 (+bias), GLU, depthwise (+bias), norm, swish, pw2 (+bias)
    AFFINE_NORM * n * d + (4 * n * d * d + 2 * n * d) + 2 * n * d + (2 * n * d * k + n * d)
        + AFFINE_NORM * n * d
        + n * d
        + (2 * n * d * d + n * d)
}

/// FLOPs of the global interaction module (pre-norm included).
pub fn gi_flops(cfg: &EncoderConfig, n: usize) -> u64 {
    let norm = AFFINE_NORM * (n * cfg.d_model) as u64;
    match cfg.gi_kind {
        GiKind::None => 0,
        GiKind::Mhsa => norm + mhsa_flops(n, cfg.d_model, cfg.heads, false),
        GiKind::HyperMixer => norm + mixer_shape(cfg).flops(n).total(),
    }
}

pub(crate) fn mixer_shape(cfg: &EncoderConfig) -> MixerShape {
    MixerShape {
        d: cfg.d_model,
        d_prime: cfg.d_prime,
        heads: cfg.heads,
        hidden: cfg.hypernet_hidden,
        tied: cfg.tied_hypernets,
        positions: true,
        norm: cfg.mixer_norm,
    }
}

pub fn frontend_flops(frames: usize, features: usize, d: usize) -> u64 {
    let (t1, f1) = (stage_len(frames) as u64, stage_len(features) as u64);
    let (t2, f2) = (stage_len(t1 as usize) as u64, stage_len(f1 as usize) as u64);
    let d = d as u64;
    let conv1 = 2 * t1 * f1 * 9 * d + t1 * f1 * d + t1 * f1 * d;
    let conv2 = 2 * t2 * f2 * 9 * d * d + t2 * f2 * d + t2 * f2 * d;
    let proj = 2 * t2 * f2 * d * d + t2 * d;
    conv1 + conv2 + proj
}

/// Block-stack FLOPs for `n` frames (no frontend).
pub fn blocks_flops(cfg: &EncoderConfig, n: usize) -> FlopBreakdown {
    let nd = (n * cfg.d_model) as u64;
    let layers = cfg.n_layers as u64;
    let gi = gi_flops(cfg, n);
    let has_gi = cfg.gi_kind != GiKind::None;
    let per_layer = match cfg.block {
        BlockKind::Conformer => FlopBreakdown {
            frontend: 0,
            ffn: 2 * ffn_flops(n, cfg.d_model, cfg.d_ffn),
            gi,
            conv: conv_flops(n, cfg.d_model, cfg.kernel),
            // two half-step scales, residual adds, closing norm
            other: 2 * nd + (3 + u64::from(has_gi)) * nd + AFFINE_NORM * nd,
        },
        BlockKind::Transformer => FlopBreakdown {
            frontend: 0,
            ffn: ffn_flops(n, cfg.d_model, cfg.d_ffn),
            gi,
            conv: 0,
            other: (1 + u64::from(has_gi)) * nd,
        },
    };
    FlopBreakdown {
        frontend: 0,
        ffn: layers * per_layer.ffn,
        gi: layers * per_layer.gi,
        conv: layers * per_layer.conv,
        // positions + final norm
        other: layers * per_layer.other + nd + AFFINE_NORM * nd,
    }
}

/// Whole-encoder FLOPs for a `frames×80` input.
pub fn encoder_flops(cfg: &EncoderConfig, frames: usize) -> FlopBreakdown {
    let n = subsampled_len(frames);
    FlopBreakdown {
        frontend: frontend_flops(frames, FEATURE_DIM, cfg.d_model),
        ..blocks_flops(cfg, n)
    }
}
