//! Deterministic splittable randomness.
//!
//! Every random quantity in this crate flows from a caller-supplied 64-bit
//! seed through [`Stream`], a SplitMix64 generator (Steele, Lea & Flood's
//! update/finalizer, as in `java.util.SplittableRandom`). There is no
//! global RNG. Independent streams are derived, never shared:
//!
//! * [`Stream::split`] mixes an FNV-1a hash of a purpose label into the
//!   state, so e.g. the exemplar-noise stream and the jitter stream of the
//!   same seed are unrelated.
//! * [`Stream::split_index`] does the same for a unit index, which makes
//!   per-exemplar / per-collage / per-fixation generation independent of
//!   scheduling order.
//!
//! Sampling helpers (uniform, normal via Box-Muller, gamma via
//! Marsaglia-Tsang) consume a deterministic number of raw draws per call
//! (gamma loops, but the loop itself is a pure function of the stream
//! state), so identical seeds always reproduce identical values bitwise.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A splittable SplitMix64 stream. 64-bit state, 64-bit output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    state: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { state: seed }
    }

    /// Derive an independent stream for a named purpose.
    pub fn split(&self, label: &str) -> Stream {
        Stream {
            state: mix64(self.state ^ fnv1a(label.as_bytes())),
        }
    }

    /// Derive an independent stream for the `index`-th unit of work.
    pub fn split_index(&self, index: u64) -> Stream {
        Stream {
            state: mix64(self.state ^ mix64(index.wrapping_add(GAMMA))),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1), 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Modulo reduction; the bias (n / 2^64) is
    /// far below anything observable here.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (cosine branch). Two draws per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Gamma(shape, scale) via Marsaglia-Tsang squeeze, shape >= 1.
    pub fn gamma(&mut self, shape: f64, scale: f64) -> f64 {
        debug_assert!(shape >= 1.0 && scale > 0.0);
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / libm::sqrt(9.0 * d);
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.next_f64_open();
            if libm::log(u) < 0.5 * x * x + d - d * v + d * libm::log(v) {
                return d * v * scale;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix64_reference_sequence() {
        // Published SplitMix64 vectors (also used by the xoshiro test suite).
        let mut s = Stream::new(1234567);
        assert_eq!(s.next_u64(), 6457827717110365317);
        assert_eq!(s.next_u64(), 3203168211198807973);
        assert_eq!(s.next_u64(), 9817491932198370423);
        let mut z = Stream::new(0);
        assert_eq!(z.next_u64(), 16294208416658607535);
    }

    #[test]
    fn splits_are_independent_and_stable() {
        let root = Stream::new(42);
        let a = root.split("noise");
        let b = root.split("jitter");
        assert_ne!(a, b);
        assert_eq!(a, root.split("noise"));
        assert_ne!(root.split_index(0), root.split_index(1));
        // Splitting does not advance the parent.
        let mut r2 = Stream::new(42);
        let mut r1 = root.clone();
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn uniform_range_and_bounds() {
        let mut s = Stream::new(7);
        for _ in 0..1000 {
            let u = s.next_f64();
            assert!((0.0..1.0).contains(&u));
            let r = s.range_f64(0.6, 1.0);
            assert!((0.6..1.0).contains(&r));
            let k = s.below(9);
            assert!(k < 9);
        }
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(11);
        let n = 100_000;
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..n {
            let x = s.normal();
            m += x;
            v += x * x;
        }
        m /= n as f64;
        v = v / n as f64 - m * m;
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((v - 1.0).abs() < 0.03, "var {v}");
    }

    #[test]
    fn gamma_mean_matches_shape_times_scale() {
        // Gamma(2, 100) has mean 200.
        let mut s = Stream::new(13);
        let n = 10_000;
        let mean = (0..n).map(|_| s.gamma(2.0, 100.0)).sum::<f64>() / n as f64;
        assert!((mean - 200.0).abs() < 5.0, "mean {mean}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut s = Stream::new(5);
        let mut xs: alloc::vec::Vec<u32> = (0..16).collect();
        s.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<alloc::vec::Vec<u32>>());
    }
}
