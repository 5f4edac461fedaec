//! Deterministic random streams.
//!
//! A small splitmix64 generator with labeled stream derivation. Every
//! random draw in the crate flows through this module, so identical seeds
//! reproduce identical datasets, training runs, and evaluation tables
//! byte for byte, independent of thread count or platform.

/// splitmix64 state. Cheap to fork: every labeled derivation yields an
/// independent stream.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: mix(seed ^ 0x9e3779b97f4a7c15),
            spare_normal: None,
        }
    }

    /// Independent stream identified by a label, e.g. `rng.derive("dataset")`.
    /// Derivation does not advance `self`.
    pub fn derive(&self, label: &str) -> Rng {
        let mut h: u64 = 0xcbf29ce484222325;
        for &b in label.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        Rng::new(self.state ^ h)
    }

    /// Independent stream indexed by an integer, e.g. per-trajectory seeds.
    pub fn derive_u64(&self, index: u64) -> Rng {
        Rng::new(self.state ^ mix(index.wrapping_add(0x9e3779b97f4a7c15)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        mix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller, caching the second draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        loop {
            let u1 = self.next_f64();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2 = self.next_f64();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.spare_normal = Some(r * theta.sin());
            return r * theta.cos();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.uniform_usize(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_are_independent_of_parent_state() {
        let root = Rng::new(3);
        let d1 = root.derive("x");
        let mut root2 = Rng::new(3);
        root2.next_u64();
        // derive() reads only the stored state, which next_u64 mutates;
        // deriving from a fresh copy must match.
        let d2 = Rng::new(3).derive("x");
        assert_eq!(d1.state, d2.state);
        assert_ne!(d1.state, root2.derive("y").state);
    }

    #[test]
    fn uniform_range_and_normal_moments() {
        let mut r = Rng::new(11);
        let n = 20_000;
        let mut mean = 0.0;
        let mut var = 0.0;
        for _ in 0..n {
            let x = r.normal();
            mean += x;
            var += x * x;
        }
        mean /= n as f64;
        var /= n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        for _ in 0..1000 {
            let u = r.uniform(-1.0, 1.0);
            assert!((-1.0..1.0).contains(&u));
        }
    }
}
