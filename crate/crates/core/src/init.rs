//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Param;

/// Deterministic source of initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Xavier/Glorot uniform weights of the given shape.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Param {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Param {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Param::new(name, shape, data).expect("init shape")
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Param {
        let n = shape.iter().product();
        Param::new(name, shape, vec![value; n]).expect("init shape")
    }

    /// Small random values; keeps biases from being exactly symmetric in tests.
    pub fn bias(&mut self, name: &str, len: usize) -> Param {
        self.uniform(name, &[len], 0.02)
    }
}
