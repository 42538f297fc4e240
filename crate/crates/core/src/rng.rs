//! Seeded, counter-based random streams.
//!
//! Every stream is a ChaCha8 keystream whose key is derived from a root seed
//! and a label path (`"noise"`, epoch, batch, ...). Streams with different
//! labels are independent, so adding a new consumer never shifts the values
//! seen by an existing one. Uniform and Gaussian variates are produced with
//! explicit bit-level conversions so output is identical on every platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a stream label.
#[derive(Debug, Clone, Copy)]
pub enum Label<'a> {
    Tag(&'a str),
    Index(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Tag(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(v: u64) -> Self {
        Label::Index(v)
    }
}

impl From<usize> for Label<'_> {
    fn from(v: usize) -> Self {
        Label::Index(v as u64)
    }
}

/// Derives a 256-bit stream key from a root seed and a label path.
pub fn derive_key(root: u64, labels: &[Label<'_>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"fisherjscc/stream/v1");
    h.update(root.to_le_bytes());
    for label in labels {
        match label {
            Label::Tag(s) => {
                h.update([0u8]);
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
            Label::Index(i) => {
                h.update([1u8]);
                h.update(i.to_le_bytes());
            }
        }
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

/// Derives a 64-bit sub-seed, for handing to code that takes a plain seed.
pub fn derive_seed(root: u64, labels: &[Label<'_>]) -> u64 {
    let key = derive_key(root, labels);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}

/// Deterministic random stream with uniform and Box–Muller Gaussian sampling.
#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(derive_key(seed, &[]))
    }

    pub fn derived(root: u64, labels: &[Label<'_>]) -> Self {
        Self::from_key(derive_key(root, labels))
    }

    fn from_key(key: [u8; 32]) -> Self {
        Stream {
            inner: ChaCha8Rng::from_seed(key),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe to take the logarithm of.
    fn uniform_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` by rejection, free of modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal variate (Box–Muller, both outputs used).
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std_dev: f64) {
        for v in out.iter_mut() {
            *v = std_dev * self.normal();
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
