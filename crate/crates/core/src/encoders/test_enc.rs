//! Frozen random-projection patch encoder.
//!
//! Splits the 224x224 image into a square grid of non-overlapping patches
//! and applies one fixed seeded linear map to each patch's centered [0,1]
//! pixels. Distinct images give distinct features almost surely, so the
//! whole pipeline can run and be tested without pretrained weights.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{Obs, IMG};
use crate::error::{Error, Result};
use crate::math::init;

use super::Encoder;

pub struct TestEncoder {
    seed: u64,
    rows: usize,
    e: usize,
    patch: usize,
    /// `[patch*patch*3, E]`
    weights: Array2<f64>,
    checksum: [u8; 32],
}

impl TestEncoder {
    /// `n` must be a perfect square whose root divides 224.
    pub fn new(seed: u64, n: usize, e: usize) -> Result<Self> {
        if n < 1 || e < 1 {
            return Err(Error::InvalidArgument("n and e must be >= 1".into()));
        }
        let rows = (n as f64).sqrt().round() as usize;
        if rows * rows != n {
            return Err(Error::InvalidArgument(format!("n={n} is not a perfect square")));
        }
        if IMG % rows != 0 {
            return Err(Error::InvalidArgument(format!(
                "grid {rows}x{rows} does not tile a {IMG}px image"
            )));
        }
        let patch = IMG / rows;
        let dim = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_e4c0);
        let weights2 = init::normal(&mut rng, &[dim, e], (1.0 / dim as f64).sqrt() * 4.0);
        let weights = weights2.into_dimensionality::<Ix2>().unwrap();
        let mut hasher = Sha256::new();
        for w in weights.iter() {
            hasher.update(w.to_le_bytes());
        }
        Ok(TestEncoder { seed, rows, e, patch, weights, checksum: hasher.finalize().into() })
    }
}

impl Encoder for TestEncoder {
    fn id(&self) -> String {
        format!("test:seed={},n={},e={}", self.seed, self.rows * self.rows, self.e)
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.rows, self.rows, self.e)
    }

    fn encode_patches(&self, img: &Obs) -> Result<Array2<f64>> {
        let n = self.rows * self.rows;
        let p = self.patch;
        let mut flat = Array2::<f64>::zeros((n, p * p * 3));
        for pr in 0..self.rows {
            for pc in 0..self.rows {
                let mut k = 0;
                let row = pr * self.rows + pc;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            flat[[row, k]] =
                                img[[pr * p + dy, pc * p + dx, c]] as f64 / 255.0 - 0.5;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(flat.dot(&self.weights))
    }

    fn checksum(&self) -> [u8; 32] {
        self.checksum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::encode_obs;
    use crate::envs::{self, EnvConfig, EnvState, WallState};

    #[test]
    fn deterministic_and_seed_sensitive() {
        let img = Array3::<u8>::zeros((IMG, IMG, 3));
        let a = TestEncoder::new(0, 16, 32).unwrap();
        let b = TestEncoder::new(0, 16, 32).unwrap();
        let c = TestEncoder::new(1, 16, 32).unwrap();
        let za = a.encode_patches(&img).unwrap();
        assert_eq!(za, b.encode_patches(&img).unwrap());
        assert_ne!(za, c.encode_patches(&img).unwrap());
        assert!(za.iter().all(|v| v.is_finite()));
        assert_eq!(za.shape(), [16, 32]);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn rejects_bad_grid() {
        assert!(TestEncoder::new(0, 15, 8).is_err());
        assert!(TestEncoder::new(0, 9, 8).is_err()); // 3 does not divide 224
    }

    #[test]
    fn injective_on_wall_positions_grid() {
        // sampled grid of agent positions, 1-pixel spacing in a band:
        // all pairwise latent distances strictly positive
        let cfg = EnvConfig::default();
        let enc = TestEncoder::new(0, 16, 32).unwrap();
        let mut latents = Vec::new();
        for i in 0..12 {
            let x = 0.2 + i as f64 / 224.0; // 1px apart
            let s = EnvState::Wall(WallState { pos: [x, 0.5], wall_x: 0.5, door_y: 0.5 });
            let img = envs::render(&s, &cfg);
            latents.push(encode_obs(&enc, &img).unwrap().patches);
        }
        for i in 0..latents.len() {
            for j in i + 1..latents.len() {
                let d = (&latents[i] - &latents[j]).mapv(|v| v * v).sum().sqrt();
                assert!(d > 0.0, "positions {i} and {j} collide");
            }
        }
    }
}
