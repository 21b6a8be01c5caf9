//! Model configurations, presets and parameter accounting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conformer::{self, subsampled_len, EncoderParams, FlopBreakdown, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::hypermixer::{HiddenWidth, MixerNorm};
use crate::tensor::Module;

/// Which mechanism fills the global interaction slot of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GiKind {
    Mhsa,
    HyperMixer,
    /// No global interaction (local-only ablation).
    None,
}

/// Block layout hosting the global interaction module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Conformer,
    Transformer,
}

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Transformer,
    HyperMixer,
    Conformer,
    HyperConformer,
    /// Conformer blocks with the global interaction module removed.
    ConvOnly,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Transformer,
        ModelKind::HyperMixer,
        ModelKind::Conformer,
        ModelKind::HyperConformer,
        ModelKind::ConvOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::HyperMixer => "hypermixer",
            ModelKind::Conformer => "conformer",
            ModelKind::HyperConformer => "hyperconformer",
            ModelKind::ConvOnly => "conv-only",
        }
    }

    pub fn block(self) -> BlockKind {
        match self {
            ModelKind::Transformer | ModelKind::HyperMixer => BlockKind::Transformer,
            _ => BlockKind::Conformer,
        }
    }

    pub fn gi_kind(self) -> GiKind {
        match self {
            ModelKind::Transformer | ModelKind::Conformer => GiKind::Mhsa,
            ModelKind::HyperMixer | ModelKind::HyperConformer => GiKind::HyperMixer,
            ModelKind::ConvOnly => GiKind::None,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Usage(format!("unknown model '{s}'; valid models: {}", Self::valid_names())))
    }
}

impl fmt::Display for GiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GiKind::Mhsa => "mhsa",
            GiKind::HyperMixer => "hypermixer",
            GiKind::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Small,
    Medium,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Medium => "medium",
        }
    }

    pub fn d_model(self) -> usize {
        match self {
            Preset::Small => 144,
            Preset::Medium => 256,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            _ => Err(Error::Usage(format!("unknown preset '{s}'; valid presets: small, medium"))),
        }
    }
}

/// Full hyperparameter record of one encoder (plus decoder sizes used only
/// for parameter accounting).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub d_prime: usize,
    pub kernel: usize,
    pub gi_kind: GiKind,
    pub tied_hypernets: bool,
    pub vocab: usize,
    pub n_decoder_layers: usize,
    pub block: BlockKind,
    #[serde(skip)]
    pub hypernet_hidden: HiddenWidth,
    #[serde(skip)]
    pub mixer_norm: MixerNorm,
}

pub const DEFAULT_KERNEL: usize = 31;

impl EncoderConfig {
    pub fn preset(preset: Preset, model: ModelKind) -> Self {
        let d = preset.d_model();
        EncoderConfig {
            d_model: d,
            n_layers: 10,
            heads: 8,
            d_ffn: 4 * d,
            d_prime: 4 * d,
            kernel: DEFAULT_KERNEL,
            gi_kind: model.gi_kind(),
            tied_hypernets: false,
            vocab: 5000,
            n_decoder_layers: 4,
            block: model.block(),
            hypernet_hidden: HiddenWidth::Model,
            mixer_norm: MixerNorm::Tokens,
        }
    }

    pub fn small(model: ModelKind) -> Self {
        Self::preset(Preset::Small, model)
    }

    pub fn medium(model: ModelKind) -> Self {
        Self::preset(Preset::Medium, model)
    }

    /// Desk-scale configuration: `d_ffn = 2d`, `d' = d`.
    pub fn toy(model: ModelKind, d: usize, layers: usize, heads: usize, kernel: usize) -> Self {
        EncoderConfig {
            d_model: d,
            n_layers: layers,
            heads,
            d_ffn: 2 * d,
            d_prime: d,
            kernel,
            vocab: 8,
            n_decoder_layers: 0,
            ..Self::preset(Preset::Small, model)
        }
    }

    pub fn with_heads(&self, heads: usize) -> Self {
        EncoderConfig { heads, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.d_ffn == 0 || self.d_prime == 0 {
            return bad("widths and depth must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.gi_kind == GiKind::HyperMixer && !self.d_prime.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide d_prime {}", self.heads, self.d_prime));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("depthwise kernel size must be odd, got {}", self.kernel));
        }
        Ok(())
    }

    /// Parses `key = value` lines over `base`. Blank lines and `#` comments
    /// are skipped; every key must be a field name.
    pub fn parse_overrides(base: &EncoderConfig, text: &str, origin: &str) -> Result<Self> {
        let mut cfg = base.clone();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: format!("{origin}:{}", i + 1),
                message,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(base: &EncoderConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_overrides(base, &text, &path.display().to_string())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("expected a non-negative integer, got '{v}'")))
        }
        fn choice<T: Copy>(v: &str, options: &[(&str, T)]) -> Result<T> {
            options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
                let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("expected one of {}, got '{v}'", names.join("|")))
            })
        }
        match key {
            "d_model" => self.d_model = num(value)?,
            "n_layers" => self.n_layers = num(value)?,
            "k" | "heads" => self.heads = num(value)?,
            "d_ffn" => self.d_ffn = num(value)?,
            "d_prime" => self.d_prime = num(value)?,
            "kernel" => self.kernel = num(value)?,
            "vocab" => self.vocab = num(value)?,
            "n_decoder_layers" => self.n_decoder_layers = num(value)?,
            "tied_hypernets" => self.tied_hypernets = choice(value, &[("true", true), ("false", false)])?,
            "gi_kind" => {
                self.gi_kind = choice(value, &[("mhsa", GiKind::Mhsa), ("hypermixer", GiKind::HyperMixer), ("none", GiKind::None)])?
            }
            "block" => self.block = choice(value, &[("conformer", BlockKind::Conformer), ("transformer", BlockKind::Transformer)])?,
            "hypernet_hidden" => self.hypernet_hidden = choice(value, &[("model", HiddenWidth::Model), ("prime", HiddenWidth::Prime)])?,
            "mixer_norm" => {
                self.mixer_norm = choice(value, &[("tokens", MixerNorm::Tokens), ("features", MixerNorm::Features), ("off", MixerNorm::Off)])?
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Closed-form encoder parameter count (frontend, blocks, final norm).
    pub fn encoder_params_formula(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ffn;
        let norm = 2 * d;
        let frontend = (9 * d + d) + (9 * d * d + d) + (subsampled_len(FEATURE_DIM) * d * d + d);
        let ffn = norm + d * f + f + f * d + d;
        let conv = norm + (d * 2 * d + 2 * d) + (self.kernel * d + d) + norm + (d * d + d);
        let gi = match self.gi_kind {
            GiKind::None => 0,
            GiKind::Mhsa => norm + 4 * (d * d + d),
            GiKind::HyperMixer => norm + conformer::mixer_shape(self).num_params(),
        };
        let block = match self.block {
            BlockKind::Conformer => 2 * ffn + gi + conv + norm,
            BlockKind::Transformer => ffn + gi,
        };
        frontend + self.n_layers * block + norm
    }

    /// Decoder layers: self- and cross-attention (`4d² + 4d` each), a
    /// feed-forward layer and three layer norms.
    pub fn decoder_params(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ffn;
        self.n_decoder_layers * (2 * (4 * d * d + 4 * d) + (2 * d * f + d + f) + 6 * d)
    }

    /// Token embedding shared with the decoder output head.
    pub fn embedding_params(&self) -> usize {
        self.vocab * self.d_model
    }

    /// CTC projection from encoder output to the vocabulary.
    pub fn ctc_head_params(&self) -> usize {
        self.d_model * self.vocab + self.vocab
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Encoder,
    Full,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Scope::Encoder),
            "full" => Ok(Scope::Full),
            _ => Err(Error::Usage(format!("unknown scope '{s}'; valid scopes: encoder, full"))),
        }
    }
}

/// Breakdown of a parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Sum over every tensor of an instantiated encoder.
    pub encoder: usize,
    pub decoder: usize,
    pub embedding: usize,
    pub ctc_head: usize,
    pub total: usize,
}

/// Counts parameters. The encoder part is always instantiated and checked
/// against [`EncoderConfig::encoder_params_formula`].
pub fn count_params(cfg: &EncoderConfig, scope: Scope) -> Result<ParamCount> {
    let encoder = EncoderParams::new(cfg, 0)?.num_params();
    let formula = cfg.encoder_params_formula();
    if encoder != formula {
        return Err(Error::Config(format!(
            "instantiated encoder has {encoder} parameters but the closed form gives {formula}"
        )));
    }
    Ok(match scope {
        Scope::Encoder => ParamCount {
            encoder,
            decoder: 0,
            embedding: 0,
            ctc_head: 0,
            total: encoder,
        },
        Scope::Full => full_count(cfg, encoder),
    })
}

/// Full-model count using the closed form for the encoder (no instantiation).
pub fn count_params_formula(cfg: &EncoderConfig, scope: Scope) -> ParamCount {
    let encoder = cfg.encoder_params_formula();
    match scope {
        Scope::Encoder => ParamCount {
            encoder,
            decoder: 0,
            embedding: 0,
            ctc_head: 0,
            total: encoder,
        },
        Scope::Full => full_count(cfg, encoder),
    }
}

fn full_count(cfg: &EncoderConfig, encoder: usize) -> ParamCount {
    let (decoder, embedding, ctc_head) = (cfg.decoder_params(), cfg.embedding_params(), cfg.ctc_head_params());
    ParamCount {
        encoder,
        decoder,
        embedding,
        ctc_head,
        total: encoder + decoder + embedding + ctc_head,
    }
}

/// `100·(1 − params(k=8)/params(k=1))` over the full model.
pub fn head_reduction(cfg: &EncoderConfig) -> Result<f64> {
    if cfg.gi_kind != GiKind::HyperMixer {
        return Err(Error::Config("head reduction is defined for HyperMixer models".into()));
    }
    let one = count_params_formula(&cfg.with_heads(1), Scope::Full).total as f64;
    let many = count_params_formula(cfg, Scope::Full).total as f64;
    Ok(100.0 * (1.0 - many / one))
}

/// Per-module FLOPs of one encoder forward pass on `frames` input frames.
pub fn flop_model(cfg: &EncoderConfig, frames: usize) -> FlopBreakdown {
    conformer::encoder_flops(cfg, frames)
}

/// Reference full-model sizes in millions of parameters.
pub fn reference_params_m(preset: Preset, model: ModelKind) -> Option<f64> {
    Some(match (preset, model) {
        (Preset::Small, ModelKind::Transformer) => 6.1,
        (Preset::Small, ModelKind::HyperMixer) => 5.6,
        (Preset::Small, ModelKind::Conformer) => 8.7,
        (Preset::Small, ModelKind::HyperConformer) => 7.9,
        (Preset::Medium, ModelKind::Transformer) => 16.2,
        (Preset::Medium, ModelKind::HyperMixer) => 14.4,
        (Preset::Medium, ModelKind::Conformer) => 24.1,
        (Preset::Medium, ModelKind::HyperConformer) => 21.7,
        _ => return None,
    })
}

/// Reference k=1→8 parameter reduction in percent.
pub fn reference_head_reduction(preset: Preset) -> f64 {
    match preset {
        Preset::Small => 7.1,
        Preset::Medium => 20.8,
    }
}

/// Relative band around [`reference_params_m`].
pub const PARAM_TOLERANCE: f64 = 0.10;
/// Absolute band (percentage points) around [`reference_head_reduction`].
pub const HEAD_REDUCTION_TOLERANCE: f64 = 2.5;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_follow_width_rules() {
        for p in [Preset::Small, Preset::Medium] {
            let c = EncoderConfig::preset(p, ModelKind::HyperConformer);
            assert_eq!(c.d_ffn, 4 * c.d_model);
            assert_eq!(c.d_prime, c.d_ffn);
            assert_eq!((c.n_layers, c.heads, c.vocab, c.n_decoder_layers), (10, 8, 5000, 4));
            c.validate().unwrap();
        }
    }

    #[test]
    fn model_names_round_trip() {
        for m in ModelKind::ALL {
            assert_eq!(m.name().parse::<ModelKind>().unwrap(), m);
        }
        let err = "lstm".parse::<ModelKind>().unwrap_err().to_string();
        assert!(err.contains("hyperconformer"), "{err}");
    }

    #[test]
    fn config_file_overrides_and_rejects_unknown_keys() {
        let base = EncoderConfig::small(ModelKind::HyperConformer);
        let cfg = EncoderConfig::parse_overrides(&base, "# toy\nd_model = 32\nk = 4\n\ntied_hypernets = true\n", "t").unwrap();
        assert_eq!((cfg.d_model, cfg.heads, cfg.tied_hypernets), (32, 4, true));
        assert!(matches!(EncoderConfig::parse_overrides(&base, "depth = 3", "t"), Err(Error::Parse { .. })));
        assert!(EncoderConfig::parse_overrides(&base, "kernel = 4", "t").is_err());
        assert!(EncoderConfig::parse_overrides(&base, "gi_kind = rnn", "t").is_err());
    }

    #[test]
    fn instantiation_matches_formula_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let models = [ModelKind::Transformer, ModelKind::HyperMixer, ModelKind::Conformer, ModelKind::HyperConformer, ModelKind::ConvOnly];
        for i in 0..6 {
            let heads = [1, 2, 4][rng.gen_range(0..3)];
            let mut cfg = EncoderConfig::toy(models[i % models.len()], heads * rng.gen_range(1..5), rng.gen_range(1..3), heads, [3, 5, 7][rng.gen_range(0..3)]);
            cfg.d_prime = heads * rng.gen_range(1..4);
            cfg.tied_hypernets = rng.gen();
            cfg.hypernet_hidden = if rng.gen() { HiddenWidth::Model } else { HiddenWidth::Prime };
            let count = count_params(&cfg, Scope::Encoder).unwrap();
            assert_eq!(count.encoder, cfg.encoder_params_formula(), "{cfg:?}");
        }
    }

    #[test]
    fn identical_heads_give_zero_reduction() {
        let cfg = EncoderConfig::small(ModelKind::HyperConformer).with_heads(1);
        assert_eq!(head_reduction(&cfg).unwrap(), 0.0);
        assert!(head_reduction(&EncoderConfig::small(ModelKind::Conformer)).is_err());
    }

    #[test]
    fn params_independent_of_length() {
        // generated token-mixing weights are not parameters, so nothing in
        // the count depends on sequence length
        let cfg = EncoderConfig::toy(ModelKind::HyperConformer, 8, 1, 2, 3);
        let enc = EncoderParams::new(&cfg, 0).unwrap();
        let before = enc.num_params();
        for t in [16, 64] {
            let x = crate::tensor::Tensor::zeros(&[t, FEATURE_DIM]);
            conformer::encoder_forward(&x, &enc).unwrap();
        }
        assert_eq!(enc.num_params(), before);
    }
}
