//! Counter-based deterministic random streams.
//!
//! Every stochastic concern in the toolkit (centerline shape, tree placement,
//! ground speckle, pixel noise, weight init, batch sampling, ...) draws from
//! its own stream, keyed by a seed plus a short tag. Streams are stateless
//! hash functions of (key, counter), so values can be queried by index —
//! which is what lets the renderer key speckle and noise to world coordinates
//! instead of draw order — and changing one concern never perturbs another.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. Bijective on u64 with good avalanche.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identity of one named random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64, tag: &str) -> Self {
        let mut k = mix(seed ^ GAMMA);
        for b in tag.bytes() {
            k = mix(k.wrapping_add(u64::from(b)).wrapping_mul(GAMMA));
        }
        StreamKey(k)
    }

    /// Sub-stream derived from this one (e.g. per-world or per-tensor).
    pub fn derive(self, salt: u64) -> StreamKey {
        StreamKey(mix(self.0 ^ salt.wrapping_mul(GAMMA)))
    }

    #[inline]
    pub fn u64_at(self, counter: u64) -> u64 {
        mix(self.0.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    #[inline]
    pub fn f64_at(self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; consumes counters (2i, 2i+1).
    #[inline]
    pub fn normal_at(self, i: u64) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.u64_at(2 * i) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.f64_at(2 * i + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Hash two coordinates into [0, 1). Used for position-keyed speckle.
    #[inline]
    pub fn f64_at2(self, a: i64, b: i64) -> f64 {
        let h = mix(self.0 ^ mix(a as u64 ^ (b as u64).rotate_left(32)));
        (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn stream(self) -> Stream {
        Stream { key: self, counter: 0 }
    }
}

/// Sequential view of a stream for shuffle/sampling loops.
#[derive(Debug, Clone)]
pub struct Stream {
    key: StreamKey,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, tag: &str) -> Self {
        StreamKey::new(seed, tag).stream()
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.key.u64_at(self.counter);
        self.counter += 1;
        v
    }

    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        let v = self.key.f64_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n) via widening multiply.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
