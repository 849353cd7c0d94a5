//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a [`StreamRng`] built from a
//! [`StreamKey`]: a master seed plus a path of integers naming the experiment,
//! replica and sub-draw. The key is folded into a 256-bit ChaCha8 seed with a
//! SplitMix64 mixing chain:
//!
//! ```text
//! h0   = mix(master_seed ^ 0x6261_7463_686f_7421)
//! h_i  = mix(h_{i-1} ^ mix(path[i] + (i + 1) * 0x9E37_79B9_7F4A_7C15))
//! seed = mix(h_n + 0), mix(h_n + 1), mix(h_n + 2), mix(h_n + 3)  (little endian)
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. This derivation is frozen: golden
//! tests depend on it.
//!
//! Gaussian variates use the Box-Muller transform on two open-interval
//! uniforms, emitting both the cosine and sine branches in that order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const DOMAIN: u64 = 0x6261_7463_686f_7421;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Names one independent random stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamKey {
    master_seed: u64,
    path: Vec<u64>,
}

impl StreamKey {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            path: Vec::new(),
        }
    }

    pub fn with_path(master_seed: u64, path: &[u64]) -> Self {
        Self {
            master_seed,
            path: path.to_vec(),
        }
    }

    /// Key for the sub-stream `id` below this one.
    pub fn child(&self, id: u64) -> Self {
        let mut path = self.path.clone();
        path.push(id);
        Self {
            master_seed: self.master_seed,
            path,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut h = mix(self.master_seed ^ DOMAIN);
        for (i, &p) in self.path.iter().enumerate() {
            let salt = p.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN));
            h = mix(h ^ mix(salt));
        }
        let mut out = [0u8; 32];
        for (w, chunk) in out.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&mix(h.wrapping_add(w as u64)).to_le_bytes());
        }
        out
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng {
            inner: ChaCha8Rng::from_seed(self.seed_bytes()),
            spare: None,
        }
    }
}

impl std::fmt::Display for StreamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.master_seed)?;
        for p in &self.path {
            write!(f, "/{p}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for StreamKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split('/');
        let seed = parts
            .next()
            .ok_or_else(|| "empty key".to_string())?
            .parse::<u64>()
            .map_err(|e| format!("bad master seed: {e}"))?;
        let path = parts
            .map(|p| p.parse::<u64>().map_err(|e| format!("bad path id {p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            master_seed: seed,
            path,
        })
    }
}

/// Generator owned by a single task.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl StreamRng {
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift with rejection.
        let n = n as u64;
        loop {
            let m = (self.inner.next_u64() as u128) * (n as u128);
            let lo = m as u64;
            if lo >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.gaussian();
        }
    }

    /// Inverse-CDF categorical draw on a cumulative weight vector whose last
    /// entry is (close to) 1. Ties at a boundary resolve to the lower index.
    pub fn categorical(&mut self, cumulative: &[f64]) -> usize {
        let u = self.uniform() * cumulative[cumulative.len() - 1];
        // First index whose cumulative weight reaches u.
        let idx = cumulative.partition_point(|&c| c < u);
        idx.min(cumulative.len() - 1)
    }
}
