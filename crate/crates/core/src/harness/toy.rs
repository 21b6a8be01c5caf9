//! Synthetic sequence-labelling tasks and a small training loop.
//!
//! The tasks are chosen so that some need information from far away in the
//! sequence. A model whose only cross-position path is the convolution
//! module sees a window of `n_layers·(K−1)` frames and cannot solve them.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::optim::{Adam, AdamConfig};
use crate::configs::EncoderConfig;
use crate::conformer::{encode_frames, BlockParams, Norm};
use crate::ctc::{self, CtcBatch, BLANK};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::position::PositionTable;
use crate::tensor::{backward, no_grad, Module, Param, Tensor};

/// CTC weight in the combined objective `α·L_ctc + (1−α)·L_frame`.
pub const CTC_WEIGHT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTaskKind {
    /// Every frame is labelled with the majority token of the sequence.
    GlobalMajority,
    /// Frame `t` is labelled 1 iff its token equals the token at frame 0.
    FirstTokenMatch,
    /// Runs of label tokens separated by blanks; CTC target is the label
    /// string, the frame label is the token itself.
    CtcStrings,
}

impl ToyTaskKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyTaskKind::GlobalMajority => "global-majority",
            ToyTaskKind::FirstTokenMatch => "first-token-match",
            ToyTaskKind::CtcStrings => "ctc-strings",
        }
    }
}

impl FromStr for ToyTaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ToyTaskKind::GlobalMajority, ToyTaskKind::FirstTokenMatch, ToyTaskKind::CtcStrings]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!("unknown task '{s}'; valid tasks: global-majority, first-token-match, ctc-strings"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyTask {
    pub kind: ToyTaskKind,
    pub n_min: usize,
    pub n_max: usize,
    /// Number of distinct input tokens (for `CtcStrings`, labels excluding the blank).
    pub vocab: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub frame_labels: Vec<usize>,
    pub ctc_targets: Option<Vec<usize>>,
}

impl ToyTask {
    /// Defaults used by the acceptance runs.
    pub fn standard(kind: ToyTaskKind, seed: u64) -> Self {
        match kind {
            ToyTaskKind::FirstTokenMatch => ToyTask { kind, n_min: 40, n_max: 56, vocab: 2, seed },
            ToyTaskKind::GlobalMajority => ToyTask { kind, n_min: 21, n_max: 31, vocab: 2, seed },
            ToyTaskKind::CtcStrings => ToyTask { kind, n_min: 12, n_max: 24, vocab: 3, seed },
        }
    }

    /// Input token alphabet size.
    pub fn input_vocab(&self) -> usize {
        match self.kind {
            ToyTaskKind::CtcStrings => self.vocab + 1,
            _ => self.vocab,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            ToyTaskKind::FirstTokenMatch => 2,
            ToyTaskKind::GlobalMajority => self.vocab,
            ToyTaskKind::CtcStrings => self.vocab + 1,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Sample {
        let n = rng.gen_range(self.n_min..=self.n_max);
        match self.kind {
            ToyTaskKind::FirstTokenMatch => {
                let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.vocab)).collect();
                let frame_labels = tokens.iter().map(|&t| usize::from(t == tokens[0])).collect();
                Sample { tokens, frame_labels, ctc_targets: None }
            }
            ToyTaskKind::GlobalMajority => {
                // odd length and a strict winner so the label is well defined
                let n = n | 1;
                loop {
                    let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.vocab)).collect();
                    let mut counts = vec![0usize; self.vocab];
                    tokens.iter().for_each(|&t| counts[t] += 1);
                    let best = *counts.iter().max().expect("vocab ≥ 1");
                    if counts.iter().filter(|&&c| c == best).count() == 1 {
                        let winner = counts.iter().position(|&c| c == best).expect("max exists");
                        return Sample { frame_labels: vec![winner; n], tokens, ctc_targets: None };
                    }
                }
            }
            ToyTaskKind::CtcStrings => {
                let mut tokens = Vec::with_capacity(n);
                let mut labels = Vec::new();
                while tokens.len() < n {
                    let l = rng.gen_range(1..=self.vocab);
                    if labels.last() == Some(&l) || rng.gen_bool(0.3) {
                        tokens.push(BLANK);
                    }
                    let run = rng.gen_range(1..=3).min(n - tokens.len());
                    if run == 0 {
                        break;
                    }
                    tokens.extend(std::iter::repeat_n(l, run));
                    labels.push(l);
                }
                tokens.truncate(n);
                let labels = ctc::collapse(tokens.iter().copied());
                Sample {
                    frame_labels: tokens.clone(),
                    tokens,
                    ctc_targets: Some(labels),
                }
            }
        }
    }
}

/// Token embedding, encoder blocks and output heads for toy tasks. The
/// embedding replaces the convolutional frontend.
pub struct ToyModel {
    pub embed: Param,
    pub blocks: Vec<BlockParams>,
    pub norm: Norm,
    pub positions: PositionTable,
    pub frame_w: Param,
    pub frame_b: Param,
    /// CTC projection, present for tasks with label strings.
    pub ctc: Option<(Param, Param)>,
}

impl ToyModel {
    pub fn new(task: &ToyTask, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut init = Init::new(seed);
        let embed = init.uniform("embed", &[task.input_vocab(), d], 1.0);
        let blocks = (0..cfg.n_layers)
            .map(|i| BlockParams::new(&format!("block{i}"), cfg, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let c = task.num_classes();
        let ctc = (task.kind == ToyTaskKind::CtcStrings).then(|| {
            (
                init.xavier("ctc_w", &[d, task.vocab + 1], d, task.vocab + 1),
                init.bias("ctc_b", task.vocab + 1),
            )
        });
        Ok(ToyModel {
            embed,
            blocks,
            norm: Norm::new("norm", d, &mut init),
            positions: PositionTable::new(task.n_max + 1, d),
            frame_w: init.xavier("frame_w", &[d, c], d, c),
            frame_b: init.bias("frame_b", c),
            ctc,
        })
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor> {
        let v = self.embed.shape()[0];
        let mut onehot = vec![0.0; tokens.len() * v];
        for (i, &t) in tokens.iter().enumerate() {
            onehot[i * v + t] = 1.0;
        }
        let h = Tensor::from_vec(&[tokens.len(), v], onehot)?.matmul(&self.embed.value())?;
        encode_frames(&h, &self.blocks, &self.positions, &self.norm)
    }

    /// Frame log-probabilities and, when present, CTC log-probabilities.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, Option<Tensor>)> {
        let h = self.encode(tokens)?;
        let frame = h.linear(&self.frame_w.value(), Some(&self.frame_b.value()))?.log_softmax(1)?;
        let ctc = match &self.ctc {
            Some((w, b)) => Some(h.linear(&w.value(), Some(&b.value()))?.log_softmax(1)?),
            None => None,
        };
        Ok((frame, ctc))
    }

    pub fn loss(&self, s: &Sample, alpha: f64) -> Result<Tensor> {
        let (frame, ctc_lp) = self.forward(&s.tokens)?;
        let frame_loss = frame.nll(&s.frame_labels)?;
        match (ctc_lp, &s.ctc_targets) {
            (Some(lp), Some(targets)) => {
                let ctc_loss = ctc::ctc_loss(&CtcBatch::new(lp, targets.clone())?)?;
                combined_loss(&ctc_loss, &frame_loss, alpha)
            }
            _ => Ok(frame_loss),
        }
    }

    /// Fraction of frames whose argmax class equals the label.
    pub fn frame_accuracy(&self, samples: &[Sample]) -> Result<f64> {
        no_grad(|| {
            let (mut hit, mut total) = (0usize, 0usize);
            for s in samples {
                let (frame, _) = self.forward(&s.tokens)?;
                let c = frame.cols();
                for (row, &label) in frame.data().chunks(c).zip(&s.frame_labels) {
                    let pred = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                        .0;
                    hit += usize::from(pred == label);
                    total += 1;
                }
            }
            Ok(hit as f64 / total as f64)
        })
    }
}

impl Module for ToyModel {
    fn parameters(&self) -> Vec<Param> {
        let mut p = vec![self.embed.clone()];
        for b in &self.blocks {
            p.extend(b.parameters());
        }
        p.extend(self.norm.parameters());
        p.extend([self.frame_w.clone(), self.frame_b.clone()]);
        if let Some((w, b)) = &self.ctc {
            p.extend([w.clone(), b.clone()]);
        }
        p
    }
}

/// `α·ctc + (1−α)·aux`.
pub fn combined_loss(ctc: &Tensor, aux: &Tensor, alpha: f64) -> Result<Tensor> {
    ctc.scale(alpha).add(&aux.scale(1.0 - alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub eval_samples: usize,
    pub lr: f64,
    pub warmup: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            steps_per_epoch: 40,
            batch: 8,
            eval_samples: 64,
            lr: 3e-3,
            warmup: 50,
            alpha: CTC_WEIGHT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial_accuracy: f64,
    /// Held-out frame accuracy after each epoch.
    pub accuracy: Vec<f64>,
    /// Mean training loss of each epoch.
    pub loss: Vec<f64>,
    pub params: usize,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(self.initial_accuracy)
    }
}

/// Trains a toy model with Adam and reports accuracy per epoch on a fixed
/// held-out set. Fails on the first non-finite loss.
pub fn train_toy(task: &ToyTask, cfg: &EncoderConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let model = ToyModel::new(task, cfg, opts.seed)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(task.seed ^ 0x5eed_e7a1);
    let eval: Vec<Sample> = (0..opts.eval_samples).map(|_| task.sample(&mut eval_rng)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut opt = Adam::new(
        model.parameters(),
        AdamConfig {
            lr: opts.lr,
            warmup: opts.warmup,
            ..Default::default()
        },
    );
    let mut report = TrainReport {
        initial_accuracy: model.frame_accuracy(&eval)?,
        accuracy: Vec::with_capacity(opts.epochs),
        loss: Vec::with_capacity(opts.epochs),
        params: model.num_params(),
    };
    let mut step = 0;
    for _ in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..opts.steps_per_epoch {
            opt.zero_grad();
            let mut total: Option<Tensor> = None;
            for _ in 0..opts.batch {
                let l = model.loss(&task.sample(&mut rng), opts.alpha)?;
                total = Some(match total {
                    Some(t) => t.add(&l)?,
                    None => l,
                });
            }
            let loss = total.expect("batch ≥ 1").scale(1.0 / opts.batch as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            backward(&loss)?;
            opt.step()?;
            epoch_loss += value;
            step += 1;
        }
        report.loss.push(epoch_loss / opts.steps_per_epoch as f64);
        report.accuracy.push(model.frame_accuracy(&eval)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configs::ModelKind;

    #[test]
    fn task_labels_follow_their_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [ToyTaskKind::FirstTokenMatch, ToyTaskKind::GlobalMajority, ToyTaskKind::CtcStrings] {
            let task = ToyTask::standard(kind, 0);
            for _ in 0..20 {
                let s = task.sample(&mut rng);
                assert_eq!(s.tokens.len(), s.frame_labels.len());
                match kind {
                    ToyTaskKind::FirstTokenMatch => {
                        assert_eq!(s.frame_labels[0], 1);
                        for (t, l) in s.tokens.iter().zip(&s.frame_labels) {
                            assert_eq!(*l == 1, *t == s.tokens[0]);
                        }
                    }
                    ToyTaskKind::GlobalMajority => {
                        let ones = s.tokens.iter().filter(|&&t| t == 1).count();
                        assert_eq!(s.frame_labels[0], usize::from(2 * ones > s.tokens.len()));
                    }
                    ToyTaskKind::CtcStrings => {
                        let targets = s.ctc_targets.as_ref().unwrap();
                        assert!(ctc::check_feasible(s.tokens.len(), targets).is_ok());
                        assert!(targets.iter().all(|&l| (1..=task.vocab).contains(&l)));
                    }
                }
            }
        }
    }

    #[test]
    fn combined_loss_weights() {
        let l = combined_loss(&Tensor::scalar(2.0), &Tensor::scalar(4.0), 0.3).unwrap();
        assert!((l.item() - (0.3 * 2.0 + 0.7 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_initial_accuracy() {
        let task = ToyTask::standard(ToyTaskKind::FirstTokenMatch, 3);
        let cfg = EncoderConfig::toy(ModelKind::HyperConformer, 8, 1, 2, 3);
        let opts = TrainOptions { epochs: 2, steps_per_epoch: 2, batch: 2, eval_samples: 8, lr: 0.0, ..Default::default() };
        let r = train_toy(&task, &cfg, &opts).unwrap();
        assert!(r.accuracy.iter().all(|&a| a == r.initial_accuracy));
    }

    #[test]
    fn ctc_task_trains_without_divergence() {
        let task = ToyTask::standard(ToyTaskKind::CtcStrings, 4);
        let cfg = EncoderConfig::toy(ModelKind::HyperConformer, 8, 1, 2, 3);
        let opts = TrainOptions { epochs: 2, steps_per_epoch: 5, batch: 2, eval_samples: 8, ..Default::default() };
        let r = train_toy(&task, &cfg, &opts).unwrap();
        assert!(r.loss.iter().all(|l| l.is_finite()));
        assert!(r.loss[1] < r.loss[0]);
    }
}
