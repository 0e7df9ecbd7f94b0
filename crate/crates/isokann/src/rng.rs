//! Counter-based splittable random number generation.
//!
//! Every consumer of randomness in this crate derives an independent stream
//! from `(master_seed, domain, a, b)` where `domain` separates purposes
//! (trajectory noise, weight init, start-point sampling, ...) and `(a, b)`
//! index the unit of work, e.g. `(point_index, replica_index)` for one
//! Monte Carlo shot. Identical keys give bit-identical streams no matter
//! how many other streams run concurrently or in what order, which is what
//! makes shot-level parallelism reproducible at any thread count.
//!
//! The generator is a splitmix64 counter stream: `state` advances by the
//! golden-ratio increment and each output is a finalizer hash of the state.
//! Normal draws use the Box-Muller transform with a cached spare.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const KEY_A: u64 = 0xBF58_476D_1CE4_E5B9;
const KEY_B: u64 = 0x94D0_49BB_1331_11EB;
const KEY_DOMAIN: u64 = 0xD6E8_FEB8_6659_FD93;

/// splitmix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream domains. Distinct domains guarantee that e.g. shot noise never
/// overlaps with weight initialization even under the same master seed.
pub mod domain {
    /// Trajectory noise, keyed by (point_index, replica_index).
    pub const SIMULATION: u64 = 1;
    /// Network weight initialization, keyed by (layer, 0).
    pub const MODEL_INIT: u64 = 2;
    /// Start-point sampling, keyed by (outer_iteration, 0).
    pub const START_POINTS: u64 = 3;
    /// Stratified-resampling fill draws, keyed by (outer_iteration, 0).
    pub const RESAMPLE: u64 = 4;
    /// Per-outer-iteration simulation seed derivation.
    pub const OUTER_ITER: u64 = 5;
}

/// Deterministic stream generator; see module docs.
#[derive(Debug, Clone)]
pub struct SplitRng {
    state: u64,
    seed: u64,
    spare_normal: Option<f64>,
}

impl SplitRng {
    /// Derive the stream keyed by `(master_seed, domain, a, b)`.
    pub fn from_key(master_seed: u64, domain: u64, a: u64, b: u64) -> Self {
        let seed = derive_seed(master_seed, domain, a, b);
        SplitRng { state: seed, seed, spare_normal: None }
    }

    /// The derived stream seed (recorded in `ControlledPath::seed_used`).
    pub fn stream_seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // 53-bit uniform scaled; bias is negligible for the small n used here.
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal draw (Box-Muller, cached spare).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = self.uniform();
        let mag = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare_normal = Some(mag * s);
        mag * c
    }
}

/// Seed for the stream keyed by `(master_seed, domain, a, b)`.
pub fn derive_seed(master_seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    let mut s = mix(master_seed ^ GOLDEN);
    s = mix(s ^ domain.wrapping_mul(KEY_DOMAIN));
    s = mix(s ^ a.wrapping_mul(KEY_A));
    mix(s ^ b.wrapping_mul(KEY_B))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut r1 = SplitRng::from_key(42, domain::SIMULATION, 3, 7);
        let mut r2 = SplitRng::from_key(42, domain::SIMULATION, 3, 7);
        for _ in 0..1000 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }

    #[test]
    fn distinct_keys_distinct_streams() {
        let base: Vec<u64> = {
            let mut r = SplitRng::from_key(42, domain::SIMULATION, 0, 0);
            (0..16).map(|_| r.next_u64()).collect()
        };
        for (d, a, b) in [
            (domain::SIMULATION, 0, 1),
            (domain::SIMULATION, 1, 0),
            (domain::MODEL_INIT, 0, 0),
            (domain::START_POINTS, 0, 0),
        ] {
            let mut r = SplitRng::from_key(42, d, a, b);
            let other: Vec<u64> = (0..16).map(|_| r.next_u64()).collect();
            assert_ne!(base, other);
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = SplitRng::from_key(7, domain::SIMULATION, 0, 0);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = SplitRng::from_key(11, domain::SIMULATION, 0, 0);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let z = r.standard_normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn below_is_in_range() {
        let mut r = SplitRng::from_key(3, domain::RESAMPLE, 0, 0);
        for _ in 0..1000 {
            assert!(r.below(7) < 7);
        }
    }
}
