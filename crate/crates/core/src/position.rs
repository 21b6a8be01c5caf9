//! Absolute sinusoidal position embeddings.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows needed by the longest benchmark input with headroom for the
/// memory-scaling probes.
pub const DEFAULT_MAX_LEN: usize = 5000;

/// Precomputed `max_len × d` sinusoid table:
/// `pe[t, 2i] = sin(t / 10000^(2i/d))`, `pe[t, 2i+1] = cos(t / 10000^(2i/d))`.
#[derive(Debug, Clone)]
pub struct PositionTable {
    max_len: usize,
    d: usize,
    data: Vec<f64>,
}

impl PositionTable {
    pub fn new(max_len: usize, d: usize) -> Self {
        let mut data = vec![0.0; max_len * d];
        for t in 0..max_len {
            for i in (0..d).step_by(2) {
                let freq = (-(i as f64) * (10000f64).ln() / d as f64).exp();
                let angle = t as f64 * freq;
                data[t * d + i] = angle.sin();
                if i + 1 < d {
                    data[t * d + i + 1] = angle.cos();
                }
            }
        }
        PositionTable { max_len, d, data }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn width(&self) -> usize {
        self.d
    }

    fn check(&self, n: usize) -> Result<()> {
        if n > self.max_len {
            return Err(Error::Capacity {
                needed: n,
                available: self.max_len,
            });
        }
        Ok(())
    }

    /// First `n` rows as an `n×d` constant.
    pub fn rows(&self, n: usize) -> Result<Tensor> {
        self.check(n)?;
        Tensor::from_vec(&[n, self.d], self.data[..n * self.d].to_vec())
    }

    /// First `n` rows restricted to columns `start..end`.
    pub fn slice(&self, n: usize, start: usize, end: usize) -> Result<Tensor> {
        self.check(n)?;
        if start >= end || end > self.d {
            return Err(Error::Input(format!("position columns {start}..{end} outside 0..{}", self.d)));
        }
        let mut out = Vec::with_capacity(n * (end - start));
        for row in self.data.chunks(self.d).take(n) {
            out.extend_from_slice(&row[start..end]);
        }
        Tensor::from_vec(&[n, end - start], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let p = PositionTable::new(4, 6);
        assert_eq!(p.rows(1).unwrap().to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn known_value() {
        let p = PositionTable::new(4, 4);
        let r = p.rows(3).unwrap();
        assert!((r.at(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((r.at(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn capacity_error() {
        let p = PositionTable::new(4, 2);
        assert!(matches!(p.rows(5), Err(Error::Capacity { needed: 5, available: 4 })));
    }

    #[test]
    fn slice_matches_rows() {
        let p = PositionTable::new(5, 8);
        let full = p.rows(3).unwrap();
        let s = p.slice(3, 2, 6).unwrap();
        assert_eq!(s.to_vec(), full.slice_cols(2, 6).unwrap().to_vec());
    }
}
