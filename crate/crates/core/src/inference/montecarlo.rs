//! Monte-Carlo error propagation by multinomial resampling.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::sampling::{sample_counts_with, stream_rng};
use crate::distributions::{Arm, JointDistribution};
use crate::error::{Error, Result};
use crate::statistics::{
    effective_mode_number, g_mn, g_n, g_surface, herald, nonclassicality_matrix, nrf, parity,
};

/// Number of resampling trials used when none is given.
pub const DEFAULT_TRIALS: usize = 10_000;
/// Largest tolerated fraction of failed resamples.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// A scalar statistic of a joint distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statistic {
    Mean(Arm),
    Gn { arm: Arm, order: usize },
    Gmn { m: usize, n: usize },
    Nrf,
    Parity(Arm),
    HeraldedG2 { herald: Arm, h: usize },
    HeraldedParity { herald: Arm, h: usize },
    EffectiveModeNumber(Arm),
    MinEigenvalue { order: usize },
}

impl Statistic {
    pub fn evaluate(&self, j: &JointDistribution<f64>) -> Result<f64> {
        match *self {
            Statistic::Mean(arm) => Ok(j.mean(arm)),
            Statistic::Gn { arm, order } => g_n(&j.marginal(arm), order),
            Statistic::Gmn { m, n } => g_mn(j, m, n),
            Statistic::Nrf => nrf(j),
            Statistic::Parity(arm) => Ok(parity(&j.marginal(arm))),
            Statistic::HeraldedG2 { herald: arm, h } => g_n(&herald(j, arm, h)?.0, 2),
            Statistic::HeraldedParity { herald: arm, h } => Ok(parity(&herald(j, arm, h)?.0)),
            Statistic::EffectiveModeNumber(arm) => effective_mode_number(&j.marginal(arm)),
            Statistic::MinEigenvalue { order } => {
                Ok(nonclassicality_matrix(j, order)?.min_eigenvalue)
            }
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Statistic::Mean(a) => write!(f, "mean:{}", a.name()),
            Statistic::Gn { arm, order } => write!(f, "g{order}:{}", arm.name()),
            Statistic::Gmn { m, n } => write!(f, "g:{m},{n}"),
            Statistic::Nrf => write!(f, "nrf"),
            Statistic::Parity(a) => write!(f, "parity:{}", a.name()),
            Statistic::HeraldedG2 { herald, h } => write!(f, "herald-g2:{}:{h}", herald.name()),
            Statistic::HeraldedParity { herald, h } => {
                write!(f, "herald-parity:{}:{h}", herald.name())
            }
            Statistic::EffectiveModeNumber(a) => write!(f, "k:{}", a.name()),
            Statistic::MinEigenvalue { order } => write!(f, "min-eigenvalue:{order}"),
        }
    }
}

impl FromStr for Statistic {
    type Err = Error;

    /// Parses the names produced by `Display`, e.g. `g2:signal`,
    /// `g:3,4`, `herald-g2:idler:5` or `min-eigenvalue:2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown statistic '{s}'"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        let stat = match parts.as_slice() {
            ["nrf"] => Statistic::Nrf,
            ["mean", a] => Statistic::Mean(a.parse()?),
            ["parity", a] => Statistic::Parity(a.parse()?),
            ["k", a] => Statistic::EffectiveModeNumber(a.parse()?),
            ["min-eigenvalue", o] => Statistic::MinEigenvalue { order: num(o)? },
            ["herald-g2", a, h] => Statistic::HeraldedG2 { herald: a.parse()?, h: num(h)? },
            ["herald-parity", a, h] => Statistic::HeraldedParity { herald: a.parse()?, h: num(h)? },
            ["g", mn] => {
                let (m, n) = mn.split_once(',').ok_or_else(bad)?;
                Statistic::Gmn { m: num(m)?, n: num(n)? }
            }
            [g, a] if g.starts_with('g') => Statistic::Gn {
                arm: a.parse()?,
                order: num(&g[1..])?,
            },
            _ => return Err(bad()),
        };
        Ok(stat)
    }
}

/// Result of a Monte-Carlo error estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MCReport {
    pub statistic: String,
    pub point_estimate: f64,
    pub std: f64,
    pub trials: usize,
    pub n_events: u64,
    pub seed: u64,
    /// Resamples on which the statistic could not be evaluated.
    pub failures: usize,
}

/// Element-wise Monte-Carlo standard deviations of a vector statistic.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MCVectorReport {
    pub point_estimate: Vec<f64>,
    pub std: Vec<f64>,
    pub trials: usize,
    pub n_events: u64,
    pub seed: u64,
    pub failures: usize,
}

/// Streaming mean and variance.
#[derive(Clone, Debug)]
struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / c;
            *s += d * (v - *m);
        }
    }

    fn std(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| (s / denom).sqrt()).collect()
    }
}

const CHUNK: usize = 64;

/// Resamples `trials` histograms of `n_events` from `j`, evaluates
/// `statistic` on each and accumulates element-wise standard deviations.
/// Trial `t` uses the generator stream `(seed, t)` and results are reduced
/// in trial order, so the outcome does not depend on the thread count.
pub fn mc_vector<F>(
    j: &JointDistribution<f64>,
    n_events: u64,
    trials: usize,
    seed: u64,
    statistic: F,
) -> Result<MCVectorReport>
where
    F: Fn(&JointDistribution<f64>) -> Result<Vec<f64>> + Sync,
{
    if trials < 2 {
        return Err(Error::invalid("Monte-Carlo needs at least 2 trials"));
    }
    if n_events == 0 {
        return Err(Error::invalid("n_events must be positive"));
    }
    let point = statistic(j)?;
    let mut acc = Welford::new(point.len());
    let mut failures = 0;
    for start in (0..trials).step_by(CHUNK) {
        let end = (start + CHUNK).min(trials);
        let results: Vec<Result<Vec<f64>>> = (start..end)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream_rng(seed, t as u64);
                let counts = sample_counts_with(j, n_events, &mut rng)?;
                statistic(&counts.to_distribution()?)
            })
            .collect();
        for r in results {
            match r {
                Ok(v) if v.len() == point.len() && v.iter().all(|x| x.is_finite()) => acc.push(&v),
                _ => failures += 1,
            }
        }
    }
    if failures as f64 > MAX_FAILURE_FRACTION * trials as f64 || acc.count < 2 {
        return Err(Error::UnreliableMonteCarlo { failures, trials });
    }
    Ok(MCVectorReport {
        point_estimate: point,
        std: acc.std(),
        trials,
        n_events,
        seed,
        failures,
    })
}

/// Monte-Carlo standard deviation of a named statistic.
pub fn mc_std(
    j: &JointDistribution<f64>,
    n_events: u64,
    trials: usize,
    statistic: Statistic,
    seed: u64,
) -> Result<MCReport> {
    let r = mc_vector(j, n_events, trials, seed, |d| statistic.evaluate(d).map(|v| vec![v]))?;
    Ok(MCReport {
        statistic: statistic.to_string(),
        point_estimate: r.point_estimate[0],
        std: r.std[0],
        trials,
        n_events,
        seed,
        failures: r.failures,
    })
}

/// Monte-Carlo standard deviations of the `g^(m,n)` surface, row-major
/// over `1..=max_m` x `1..=max_n`.
pub fn mc_g_surface(
    j: &JointDistribution<f64>,
    n_events: u64,
    trials: usize,
    max_m: usize,
    max_n: usize,
    seed: u64,
) -> Result<MCVectorReport> {
    mc_vector(j, n_events, trials, seed, |d| Ok(g_surface(d, max_m, max_n)?.values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::tmsv_joint;

    #[test]
    fn names_round_trip() {
        let all = [
            Statistic::Mean(Arm::Idler),
            Statistic::Gn { arm: Arm::Signal, order: 2 },
            Statistic::Gmn { m: 3, n: 40 },
            Statistic::Nrf,
            Statistic::Parity(Arm::Signal),
            Statistic::HeraldedG2 { herald: Arm::Idler, h: 5 },
            Statistic::HeraldedParity { herald: Arm::Signal, h: 1 },
            Statistic::EffectiveModeNumber(Arm::Idler),
            Statistic::MinEigenvalue { order: 2 },
        ];
        for s in all {
            assert_eq!(s.to_string().parse::<Statistic>().unwrap(), s);
        }
        assert!("g:3".parse::<Statistic>().is_err());
    }

    #[test]
    fn reproducible() {
        let j = tmsv_joint(0.5, 30).unwrap();
        let a = mc_std(&j, 10_000, 20, Statistic::Nrf, 5).unwrap();
        let b = mc_std(&j, 10_000, 20, Statistic::Nrf, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.std, 0.0);
    }

    #[test]
    fn too_many_failures() {
        // A heralded outcome that is rarely populated in small samples.
        let j = tmsv_joint(0.3, 30).unwrap();
        let s = Statistic::HeraldedG2 { herald: Arm::Idler, h: 6 };
        assert!(matches!(
            mc_std(&j, 100, 50, s, 1),
            Err(Error::UnreliableMonteCarlo { .. })
        ));
    }
}
