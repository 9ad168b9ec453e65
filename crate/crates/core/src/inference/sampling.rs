//! Multinomial sampling of histograms and single events.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::distributions::{JointCounts, JointDistribution};
use crate::error::{Error, Result};

/// Deterministic generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a multinomial histogram of `n_events` from the grid part of `j`
/// by a conditional-binomial cascade: each bin takes a binomial share of
/// the events not yet placed, with probability equal to its mass relative
/// to the mass not yet visited.
pub fn sample_counts_with<R: Rng + ?Sized>(
    j: &JointDistribution<f64>,
    n_events: u64,
    rng: &mut R,
) -> Result<JointCounts> {
    let (ds, di) = j.dims();
    let probs = j.probs();
    // Suffix sums keep the conditional probabilities accurate at the tail.
    let mut remaining_mass = vec![0.0; probs.len() + 1];
    for idx in (0..probs.len()).rev() {
        remaining_mass[idx] = remaining_mass[idx + 1] + probs[idx];
    }
    if !(remaining_mass[0] > 0.0) {
        return Err(Error::InvalidData("distribution has no mass to sample".into()));
    }
    let mut counts = vec![0u64; probs.len()];
    let mut left = n_events;
    for (idx, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if p <= 0.0 {
            continue;
        }
        let q = (p / remaining_mass[idx]).min(1.0);
        let draw = if q >= 1.0 {
            left
        } else {
            Binomial::new(left, q)
                .map_err(|e| Error::InvalidData(format!("binomial draw: {e}")))?
                .sample(rng)
        };
        counts[idx] = draw;
        left -= draw;
    }
    if left > 0 {
        // Only reachable through rounding in the suffix sums; the last
        // non-empty bin absorbs the remainder.
        let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        counts[last] += left;
    }
    JointCounts::new(ds, di, counts)
}

/// Seeded histogram of `n_events` events drawn from `j`.
pub fn sample_counts(j: &JointDistribution<f64>, n_events: u64, seed: u64) -> Result<JointCounts> {
    if n_events == 0 {
        return Err(Error::invalid("n_events must be positive"));
    }
    sample_counts_with(j, n_events, &mut stream_rng(seed, 0))
}

/// Cumulative table for drawing individual `(signal, idler)` events.
#[derive(Clone, Debug)]
pub struct EventSampler {
    dim_i: usize,
    cumulative: Vec<f64>,
}

impl EventSampler {
    pub fn new(j: &JointDistribution<f64>) -> Result<Self> {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = j
            .probs()
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        if !(acc > 0.0) {
            return Err(Error::InvalidData("distribution has no mass to sample".into()));
        }
        Ok(Self {
            dim_i: j.dims().1,
            cumulative,
        })
    }

    /// One event, drawn from the distribution conditioned on the grid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        let idx = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1);
        (idx / self.dim_i, idx % self.dim_i)
    }
}
