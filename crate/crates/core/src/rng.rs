//! Seedable pseudo-random number generator.
//!
//! Everything stochastic in this crate (weight init, shuffling, noise
//! injection, augmentation, mixing coefficients) draws from this generator so
//! that a run is a pure function of its seed.
//!
//! The algorithm is xoshiro256++ (Blackman & Vigna), with the 256-bit state
//! expanded from the 64-bit seed by SplitMix64. The raw u64 stream and the
//! uniform draws built from it are bit-identical on every platform; variates
//! that go through ln/sin/cos (Gaussian via Box-Muller with one spare
//! cached, Gamma via Marsaglia-Tsang, Beta as a Gamma ratio) are exactly
//! reproducible for a given build. Child generators are derived from the
//! *creation seed* and a stream tag, so derivation is independent of how
//! many values the parent has drawn.

/// SplitMix64 step: advances `state` and returns the next output.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, seedable PRNG (xoshiro256++).
///
/// Single-owner mutable state: never share one instance between threads.
/// Parallel work splits off children via [`Rng::derive`].
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
    gauss_spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            seed,
            state,
            gauss_spare: None,
        }
    }

    /// Child generator for stream `tag`.
    ///
    /// Derivation rule: `child_seed = splitmix64(parent_seed ^ tag)`. It
    /// depends only on the creation seed and the tag, never on draw position,
    /// so callers must use distinct tags for distinct streams.
    pub fn derive(&self, tag: u64) -> Rng {
        let mut sm = self.seed ^ tag;
        Rng::new(splitmix64(&mut sm))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let [s0, s1, s2, s3] = self.state;
        let result = s0.wrapping_add(s3).rotate_left(23).wrapping_add(s0);
        let t = s1 << 17;
        let mut n = [s0, s1, s2, s3];
        n[2] ^= n[0];
        n[3] ^= n[1];
        n[1] ^= n[2];
        n[0] ^= n[3];
        n[2] ^= t;
        n[3] = n[3].rotate_left(45);
        self.state = n;
        result
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    ///
    /// Uses rejection below the largest multiple of `n` to avoid modulo bias.
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

    /// Standard normal draw (Box-Muller, spare cached).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(spare) = self.gauss_spare.take() {
            return spare;
        }
        // 1 - unit() lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Gamma(shape, 1) draw via Marsaglia-Tsang; shape > 0.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "gamma shape must be positive");
        if shape < 1.0 {
            // Boost: Gamma(a) = Gamma(a + 1) * U^(1/a).
            let g = self.gamma(shape + 1.0);
            let u = 1.0 - self.unit();
            return g * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.gaussian();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = 1.0 - self.unit();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Beta(a, b) draw as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        let x = self.gamma(a);
        let y = self.gamma(b);
        x / (x + y)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// Mixing coefficient draw: Beta(alpha, alpha) on [0, 1].
///
/// alpha = 1 short-circuits to a single uniform draw, which is the same
/// distribution with fewer RNG consumptions.
pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> f64 {
    assert!(alpha > 0.0, "alpha must be positive");
    if alpha == 1.0 {
        rng.unit()
    } else {
        rng.beta(alpha, alpha)
    }
}
