//! Reproducible random streams.
//!
//! A stream is ChaCha20 keyed by the master seed with the 64-bit ChaCha
//! stream selector set to the stream id, so `(seed, stream_id)` fully
//! determines the sequence no matter which thread draws from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Number of replicate slots reserved per scenario in the stream id space.
pub const REPLICATES_PER_SCENARIO: u64 = 1 << 20;

/// Stream id for replicate `replicate` of scenario `scenario`.
pub fn stream_id(scenario: u64, replicate: u64) -> u64 {
    scenario * REPLICATES_PER_SCENARIO + replicate
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn for_replicate(seed: u64, scenario: u64, replicate: u64) -> Self {
        Self::new(seed, stream_id(scenario, replicate))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Normal draw with the given mean and standard deviation; `sd == 0`
    /// returns `mean` exactly.
    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        debug_assert!(sd >= 0.0);
        let z: f64 = StandardNormal.sample(&mut self.rng);
        if sd == 0.0 {
            mean
        } else {
            mean + sd * z
        }
    }

    pub fn raw_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }
}

pub fn draw_normal(rng: &mut RngStream, mean: f64, sd: f64) -> f64 {
    rng.normal(mean, sd)
}

pub fn draw_uniform(rng: &mut RngStream) -> f64 {
    rng.uniform()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sd_returns_mean() {
        let mut r = RngStream::new(1, 2);
        for _ in 0..10 {
            assert_eq!(draw_normal(&mut r, 3.25, 0.0), 3.25);
        }
    }

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..100 {
            assert_eq!(a.normal(0.0, 1.0).to_bits(), b.normal(0.0, 1.0).to_bits());
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(42, stream_id(1, 0));
        let mut b = RngStream::new(42, stream_id(1, 1));
        let xa: Vec<u64> = (0..8).map(|_| a.raw_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.raw_u64()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn thread_schedule_does_not_matter() {
        let serial: Vec<u64> = (0..4).map(|s| RngStream::new(9, s).raw_u64()).collect();
        let handles: Vec<_> = (0..4u64)
            .map(|s| std::thread::spawn(move || RngStream::new(9, s).raw_u64()))
            .collect();
        let threaded: Vec<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(serial, threaded);
    }

    #[test]
    fn normal_moments() {
        let mut r = RngStream::new(2024, 1);
        let n = 1_000_000;
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..n {
            let x = r.normal(0.0, 1.0);
            s += x;
            ss += x * x;
        }
        let mean = s / n as f64;
        let var = ss / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = RngStream::new(5, 5);
        for _ in 0..10_000 {
            let u = draw_uniform(&mut r);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
