//! Absolute efficiency estimates from twin-beam correlations.

use serde::Serialize;

use crate::distributions::JointDistribution;
use crate::error::{Error, Result};
use crate::statistics::joint_moments;

/// Efficiency estimates, with notes on violated model assumptions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KlyshkoEstimate {
    pub eta_s: f64,
    pub eta_i: f64,
    pub warnings: Vec<String>,
}

/// Estimates both efficiencies assuming a single-mode thermal source with
/// perfect photon-number correlations and binomial loss. Then
/// `<n_s> = eta_s mu` and `Cov(n_s, n_i) = eta_s eta_i (mu^2 + mu)`, so
/// `eta_i = Cov / <n_s> - <n_i>` and symmetrically for `eta_s`.
pub fn klyshko_efficiency(j: &JointDistribution<f64>) -> Result<KlyshkoEstimate> {
    let m = joint_moments(j);
    if !(m.mean_s > 0.0 && m.mean_i > 0.0) {
        return Err(Error::ZeroMean);
    }
    let eta_i = m.cov / m.mean_s - m.mean_i;
    let eta_s = m.cov / m.mean_i - m.mean_s;
    let mut warnings = Vec::new();
    for (name, v) in [("eta_s", eta_s), ("eta_i", eta_i)] {
        if v < 0.0 {
            warnings.push(format!("{name} estimate {v} is negative: data violate the single-mode model"));
        } else if v > 1.0 {
            warnings.push(format!("{name} estimate {v} exceeds 1: data violate the single-mode model"));
        }
    }
    Ok(KlyshkoEstimate {
        eta_s,
        eta_i,
        warnings,
    })
}
