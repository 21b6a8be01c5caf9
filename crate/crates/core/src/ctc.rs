//! Connectionist temporal classification: loss by the log-space forward
//! recursion, and greedy decoding. Index 0 is the blank.

use crate::error::{Error, Result};
use crate::tensor::instrument::add_flops;
use crate::tensor::{Buffer, Tensor};

pub const BLANK: usize = 0;

/// Row sums of `exp(log_probs)` must be within this of one.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A `N×(V+1)` log-probability lattice and the label sequence it should emit.
#[derive(Debug, Clone)]
pub struct CtcBatch {
    pub log_probs: Tensor,
    pub targets: Vec<usize>,
}

impl CtcBatch {
    /// Validates normalization, label range and feasibility.
    pub fn new(log_probs: Tensor, targets: Vec<usize>) -> Result<Self> {
        let (n, c) = log_probs.expect_2d("ctc")?;
        if c < 2 {
            return Err(Error::Input(format!("CTC needs a blank and at least one label, got {c} classes")));
        }
        for (t, row) in log_probs.data().chunks(c).enumerate() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Input(format!("frame {t} probabilities sum to {total}")));
            }
        }
        if let Some(&bad) = targets.iter().find(|&&l| l == BLANK || l >= c) {
            return Err(Error::Input(format!("target label {bad} outside 1..{c}")));
        }
        check_feasible(n, &targets)?;
        Ok(CtcBatch { log_probs, targets })
    }
}

/// Number of adjacent equal label pairs; each needs a separating blank.
pub fn repeats(targets: &[usize]) -> usize {
    targets.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn check_feasible(frames: usize, targets: &[usize]) -> Result<()> {
    let r = repeats(targets);
    if frames < targets.len() + r {
        return Err(Error::Infeasible {
            frames,
            labels: targets.len(),
            repeats: r,
        });
    }
    Ok(())
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `label`, with blanks around and between every label.
fn extend(targets: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(BLANK);
    for &l in targets {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Whether position `s` of the extended sequence may be entered from `s − 2`.
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Log forward variables, `N×S` row-major.
fn forward_vars(lp: &[f64], n: usize, c: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; n * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..n {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = vec![prev[s]];
            if s >= 1 {
                terms.push(prev[s - 1]);
            }
            if can_skip(ext, s) {
                terms.push(prev[s - 2]);
            }
            alpha[t * s_len + s] = logsumexp(&terms) + lp[t * c + ext[s]];
        }
    }
    alpha
}

/// Log backward variables including the emission at `t`, `N×S` row-major.
fn backward_vars(lp: &[f64], n: usize, c: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; n * s_len];
    let last = (n - 1) * s_len;
    beta[last + s_len - 1] = lp[(n - 1) * c + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(n - 1) * c + ext[s_len - 2]];
    }
    for t in (0..n - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut terms = vec![next[s]];
            if s + 1 < s_len {
                terms.push(next[s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                terms.push(next[s + 2]);
            }
            beta[t * s_len + s] = logsumexp(&terms) + lp[t * c + ext[s]];
        }
    }
    beta
}

fn total_log_prob(alpha: &[f64], n: usize, s_len: usize) -> f64 {
    let last = &alpha[(n - 1) * s_len..];
    if s_len > 1 {
        logsumexp(&last[s_len - 2..])
    } else {
        last[0]
    }
}

/// `−log Σ_{alignments π ↦ targets} Π_t p_t(π_t)`, differentiable with
/// respect to `log_probs`.
pub fn ctc_loss(batch: &CtcBatch) -> Result<Tensor> {
    let (n, c) = batch.log_probs.expect_2d("ctc")?;
    check_feasible(n, &batch.targets)?;
    let ext = extend(&batch.targets);
    let s_len = ext.len();
    let lp = batch.log_probs.data();
    let alpha = forward_vars(lp, n, c, &ext);
    let log_p = total_log_prob(&alpha, n, s_len);
    add_flops(4 * (n * s_len) as u64);
    Ok(Tensor::from_op(
        "ctc_loss",
        vec![1],
        Buffer::new(vec![-log_p]),
        &[&batch.log_probs],
        move |ctx| {
            let lp = ctx.parents[0].data();
            let beta = backward_vars(lp, n, c, &ext);
            let mut g = vec![0.0; n * c];
            for t in 0..n {
                for k in 0..c {
                    let terms: Vec<f64> = (0..s_len)
                        .filter(|&s| ext[s] == k)
                        .map(|s| alpha[t * s_len + s] + beta[t * s_len + s])
                        .collect();
                    let occ = logsumexp(&terms) - lp[t * c + k] - log_p;
                    g[t * c + k] = -ctx.grad_out[0] * occ.exp();
                }
            }
            vec![Some(g)]
        },
    ))
}

/// Per-frame argmax, repeats collapsed, blanks removed.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let c = log_probs.cols();
    let path = log_probs.data().chunks(c).map(|row| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    });
    collapse(path)
}

/// Collapses an alignment path to its label sequence.
pub fn collapse(path: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for p in path {
        if p != BLANK && prev != Some(p) {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use crate::tensor::gradcheck;
    use crate::Param;
    use proptest::prelude::*;

    fn lattice(n: usize, c: usize, logits: &[f64]) -> Tensor {
        Tensor::from_vec(&[n, c], logits.to_vec()).unwrap().log_softmax(1).unwrap()
    }

    fn brute_force(lp: &[f64], n: usize, c: usize, targets: &[usize]) -> f64 {
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
            if collapse(path.iter().copied()) == targets {
                total += path.iter().enumerate().map(|(t, &p)| lp[t * c + p]).sum::<f64>().exp();
            }
        }
        -total.ln()
    }

    #[test]
    fn single_frame_single_label() {
        let lp = lattice(1, 3, &[0.3, 1.2, -0.4]);
        let b = CtcBatch::new(lp.clone(), vec![1]).unwrap();
        assert!((ctc_loss(&b).unwrap().item() + lp.at(0, 1)).abs() < 1e-14);
    }

    #[test]
    fn two_frames_three_alignments() {
        let lp = lattice(2, 2, &[0.1, 0.7, -0.5, 0.2]);
        let p = |t, k| f64::exp(lp.at(t, k));
        let want = -(p(0, 0) * p(1, 1) + p(0, 1) * p(1, 0) + p(0, 1) * p(1, 1)).ln();
        let got = ctc_loss(&CtcBatch::new(lp, vec![1]).unwrap()).unwrap().item();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let lp = lattice(2, 3, &[0.0; 6]);
        assert!(matches!(
            CtcBatch::new(lp.clone(), vec![1, 1]),
            Err(Error::Infeasible { frames: 2, labels: 2, repeats: 1 })
        ));
        assert!(CtcBatch::new(lp, vec![1, 2]).is_ok());
    }

    #[test]
    fn unnormalized_rows_rejected() {
        let raw = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(CtcBatch::new(raw, vec![1]), Err(Error::Input(_))));
    }

    #[test]
    fn greedy_rules() {
        let onehot = |path: &[usize]| {
            let mut v = vec![-10.0; path.len() * 3];
            for (t, &p) in path.iter().enumerate() {
                v[t * 3 + p] = 0.0;
            }
            Tensor::from_vec(&[path.len(), 3], v).unwrap()
        };
        assert_eq!(greedy_decode(&onehot(&[0, 1, 1, 0, 2])), vec![1, 2]);
        assert_eq!(greedy_decode(&onehot(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(greedy_decode(&onehot(&[1, 0, 1])), vec![1, 1]);
    }

    #[test]
    fn more_mass_on_best_alignment_lowers_loss() {
        let base = [0.0, 1.0, 0.0, 0.5, 0.0, 0.3, 1.0, 0.0, 0.0];
        let mut boosted = base;
        boosted[1] += 1.0;
        let loss = |l: &[f64]| ctc_loss(&CtcBatch::new(lattice(3, 3, l), vec![1]).unwrap()).unwrap().item();
        assert!(loss(&boosted) < loss(&base));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3u64 {
            let logits = crate::init::Init::new(seed).uniform("logits", &[5, 4], 2.0);
            let logits: Param = logits;
            let report = gradcheck::check(
                std::slice::from_ref(&logits),
                || ctc_loss(&CtcBatch::new(logits.value().log_softmax(1)?, vec![2, 2, 3])?),
                None,
                seed,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn gradient_wrt_log_probs_is_negative_occupancy() {
        // occupancies of each frame sum to one, so gradient rows sum to −1
        let lp = Tensor::leaf(&[4, 3], lattice(4, 3, &[0.2, -0.1, 0.5, 1.0, 0.0, 0.0, 0.3, 0.3, -1.0, 0.0, 2.0, 0.1]).to_vec()).unwrap();
        let b = CtcBatch::new(lp.clone(), vec![1, 2]).unwrap();
        backward(&ctc_loss(&b).unwrap()).unwrap();
        for row in lp.grad().unwrap().chunks(3) {
            assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_path_enumeration(
            n in 1usize..=6,
            v in 1usize..=3,
            seed in any::<u64>(),
            raw_targets in proptest::collection::vec(0usize..3, 0..=3),
        ) {
            let targets: Vec<usize> = raw_targets.iter().map(|t| t % v + 1).collect();
            prop_assume!(n >= targets.len() + repeats(&targets));
            let c = v + 1;
            let logits = crate::init::Init::new(seed).uniform("l", &[n, c], 3.0).value().to_vec();
            let lp = lattice(n, c, &logits);
            let got = ctc_loss(&CtcBatch::new(lp.clone(), targets.clone()).unwrap()).unwrap().item();
            let want = brute_force(lp.data(), n, c, &targets);
            prop_assert!((got - want).abs() < 1e-8, "got {got} want {want}");
        }
    }
}
