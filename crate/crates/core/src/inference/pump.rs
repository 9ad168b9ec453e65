//! One-parameter fit of mean photon number against pump power.

use serde::Serialize;

use super::optimize::golden_section;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PumpFit {
    /// Gain per square root of pump power.
    pub alpha: f64,
    /// Sum of squared residuals at `alpha`.
    pub ssq: f64,
}

/// Mean photon number `sinh^2(alpha sqrt(P))`.
pub fn pump_curve(alpha: f64, power: f64) -> f64 {
    (alpha * power.sqrt()).sinh().powi(2)
}

/// Least-squares fit of `<n> = sinh^2(alpha sqrt(P))` to
/// `(pump_power, mean_photons)` points by golden-section search.
pub fn fit_pump_curve(points: &[(f64, f64)]) -> Result<PumpFit> {
    if points.len() < 2 {
        return Err(Error::InvalidData("pump curve needs at least 2 points".into()));
    }
    if points
        .iter()
        .any(|&(p, n)| !(p >= 0.0 && n >= 0.0) || !p.is_finite() || !n.is_finite())
    {
        return Err(Error::InvalidData("powers and photon numbers must be finite and >= 0".into()));
    }
    if points.iter().all(|&(p, _)| p == 0.0) {
        return Err(Error::InvalidData("all pump powers are zero".into()));
    }
    let ssq = |alpha: f64| {
        points
            .iter()
            .map(|&(p, n)| (pump_curve(alpha, p) - n).powi(2))
            .sum::<f64>()
    };
    let per_point: Vec<f64> = points
        .iter()
        .filter(|&&(p, n)| p > 0.0 && n > 0.0)
        .map(|&(p, n)| n.sqrt().asinh() / p.sqrt())
        .collect();
    let (lo, hi) = if per_point.is_empty() {
        (0.0, 1.0)
    } else {
        let lo = per_point.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = per_point.iter().copied().fold(0.0, f64::max);
        (0.5 * lo, 2.0 * hi)
    };
    let alpha = golden_section(ssq, lo, hi, 1e-14 * hi.max(1.0));
    Ok(PumpFit {
        alpha,
        ssq: ssq(alpha),
    })
}
