//! Counter-based random streams.
//!
//! Output `i` of a stream with key `k` is `mix(k + (i + 1)·γ)` where `mix` is
//! the SplitMix64 finalizer and `γ = 0x9e3779b97f4a7c15`; this is the
//! SplitMix64 sequence started at state `k`. Every consumer (noise, shuffle,
//! initialization) derives its own key from the master seed by name, so
//! streams are independent of each other and of consumption order.
//!
//! Gaussians use the Box–Muller transform on consecutive pairs
//! `u1 = 1 − f(x₀)` and `u2 = f(x₁)` where `f(x) = (x >> 11)·2⁻⁵³`, yielding
//! `√(−2 ln u1)·cos(2π u2)` and then `√(−2 ln u1)·sin(2π u2)`.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
    spare: Option<u64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { key: seed, counter: 0, spare: None }
    }

    /// Independent stream identified by `name`.
    pub fn substream(&self, name: &str) -> Stream {
        Stream::new(mix64(self.key ^ fnv1a(name.as_bytes())))
    }

    /// Independent stream identified by an index, e.g. a patch number.
    pub fn indexed(&self, index: u64) -> Stream {
        Stream::new(mix64(self.key ^ mix64(index.wrapping_add(GAMMA))))
    }

    /// Number of 64-bit words drawn so far.
    pub fn cursor(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(bits) = self.spare.take() {
            return f64::from_bits(bits);
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some((r * theta.sin()).to_bits());
        r * theta.cos()
    }

    /// Fisher–Yates, swapping from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
