//! Central finite-difference gradient checking.
//!
//! The analytic gradient comes from [`backward`]; the numeric one from
//! re-evaluating the loss with a single parameter entry nudged by `±h`.
//! The relative error of one entry is `|a − n| / max(|a|, |n|, floor)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, no_grad, Param, Tensor};
use crate::error::Result;

/// Step size for central differences.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic and numeric gradients of `loss` with respect to `params`.
///
/// At most `max_per_param` entries of each parameter are checked, chosen
/// with `seed`; `None` checks every entry.
pub fn check(
    params: &[Param],
    loss: impl Fn() -> Result<Tensor>,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    let l = loss()?;
    backward(&l)?;
    drop(l);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (p, grad) in params.iter().zip(&analytic) {
        let base = p.value().to_vec();
        let idx: Vec<usize> = match max_per_param {
            Some(m) if m < base.len() => {
                let mut v = sample(&mut rng, base.len(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..base.len()).collect(),
        };
        for i in idx {
            let eval = |delta: f64| -> Result<f64> {
                let mut d = base.clone();
                d[i] += delta;
                p.set_data(d)?;
                no_grad(|| loss().map(|t| t.item()))
            };
            let plus = eval(STEP)?;
            let minus = eval(-STEP)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grad[i], numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p.name().to_string(), i));
            }
        }
        p.set_data(base)?;
    }
    Ok(report)
}

/// Fixed pseudo-random weights used to reduce a tensor to a scalar loss
/// without the cancellations a plain sum can hide.
pub fn probe(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("probe shape")
}

/// `sum(out ⊙ probe)`.
pub fn probed_loss(out: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(out.mul(&probe(out.shape(), seed))?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_checks_clean() {
        let p = Param::new("x", &[3], vec![0.5, -1.5, 2.0]).unwrap();
        let r = check(
            std::slice::from_ref(&p),
            || {
                let x = p.value();
                Ok(x.mul(&x)?.mul(&x)?.sum())
            },
            None,
            0,
        )
        .unwrap();
        assert_eq!(r.entries_checked, 3);
        assert!(r.passes(1e-6), "{r:?}");
        assert_eq!(p.value().to_vec(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependency from the analytic pass
        let p = Param::new("x", &[2], vec![1.0, 2.0]).unwrap();
        let r = check(
            std::slice::from_ref(&p),
            || {
                let x = p.value();
                Ok(x.mul(&x.detach())?.sum())
            },
            None,
            0,
        )
        .unwrap();
        assert!(!r.passes(1e-4));
    }
}
