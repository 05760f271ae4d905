//! Reproducible randomness keyed by `(seed, stream_id)`.
//!
//! Every protocol role draws from its own ChaCha20 stream, so adding or
//! removing draws in one role never shifts the sequence seen by another.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{param_err, Result};
use crate::tensor::Tensor;

/// Purposes that get disjoint stream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Init = 1,
    Data = 2,
    Groups = 3,
    Mixer = 4,
    ClientShuffle = 5,
    SmashedNoise = 6,
    LabelNoise = 7,
    ServerBox = 8,
    Attack = 9,
    Export = 10,
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream for `kind` specialized by an arbitrary key path (round, client, ...).
    pub fn derive(seed: u64, kind: StreamKind, key: &[u64]) -> Self {
        let mut h = splitmix64(kind as u64);
        for &k in key {
            h = splitmix64(h ^ k);
        }
        Self::new(seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// I.i.d. `N(0, sigma²)` entries.
pub fn sample_gaussian(rng: &mut SeededRng, shape: &[usize], sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return param_err(format!(
            "noise std must be finite and nonnegative, got {sigma}"
        ));
    }
    let mut t = Tensor::zeros(shape);
    if sigma > 0.0 {
        for v in t.data_mut() {
            *v = sigma * rng.standard_normal();
        }
    }
    Ok(t)
}

/// One draw from `Dir(concentration)` via normalized Gamma variates.
pub fn sample_dirichlet(rng: &mut SeededRng, concentration: &[f64]) -> Result<Vec<f64>> {
    if concentration.is_empty() {
        return param_err("dirichlet needs at least one concentration parameter");
    }
    if let Some(bad) = concentration
        .iter()
        .find(|&&a| !(a > 0.0) || !a.is_finite())
    {
        return param_err(format!(
            "dirichlet concentration must be positive, got {bad}"
        ));
    }
    if concentration.len() == 1 {
        return Ok(vec![1.0]);
    }
    loop {
        let mut draws = Vec::with_capacity(concentration.len());
        for &a in concentration {
            let gamma = Gamma::new(a, 1.0).expect("validated shape");
            draws.push(gamma.sample(&mut rng.inner));
        }
        let total: f64 = draws.iter().sum();
        // All-underflow can happen for tiny concentrations; redraw.
        if total > 0.0 && total.is_finite() {
            for d in &mut draws {
                *d /= total;
            }
            return Ok(draws);
        }
    }
}
