//! Per-path random streams.
//!
//! Every path owns a ChaCha8 stream keyed by a splitmix64 hash of the master
//! seed and the path index, so a path's noise never depends on which worker
//! ran it or in what order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub master_seed: u64,
}

impl RngSpec {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn path_seed(&self, path_index: u64) -> u64 {
        splitmix64(self.master_seed ^ path_index.wrapping_add(1).wrapping_mul(GOLDEN))
    }

    pub fn path_stream(&self, path_index: u64) -> PathRng {
        PathRng::from_seed(self.path_seed(path_index))
    }

    /// Independent family of streams, e.g. one per experiment block.
    pub fn derive(&self, tag: u64) -> RngSpec {
        RngSpec::new(splitmix64(self.master_seed ^ splitmix64(tag ^ GOLDEN)))
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct PathRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl PathRng {
    pub fn from_seed(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Uniform on (0, 1].
    pub fn uniform(&mut self) -> f64 {
        let bits = self.inner.next_u64() >> 11;
        1.0 - bits as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by Box-Muller on consecutive uniform pairs.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for z in out.iter_mut() {
            *z = self.gaussian();
        }
    }
}
