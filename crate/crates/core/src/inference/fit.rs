//! Weighted least-squares fit of the eight-parameter loss model.
//!
//! The model is the multimode PDC state with coherent and thermal
//! backgrounds, passed through binomial loss on each arm and restricted to
//! the grid of the measured histogram. Restriction renormalizes the model
//! over the grid, so histograms from a detector with a finite range are
//! fitted consistently.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::optimize::{nelder_mead, Minimum};
use super::sampling::stream_rng;
use crate::channels::sigma_weights;
use crate::distributions::{arm_background, pdc_diagonal, JointDistribution, ModelParams, Truncation};
use crate::error::{Error, Result};
use crate::num::CompensatedSum;
use crate::statistics::{g2, joint_moments};

/// Input-grid tail below which the PDC diagonal is cut.
const INPUT_TAIL: f64 = 1e-13;
/// Largest input grid the forward model will build.
const MAX_INPUT_DIM: usize = 1 << 13;

/// Fast evaluation of the lossy model on a fixed output grid.
#[derive(Clone, Copy, Debug)]
pub struct ForwardModel {
    dim_s: usize,
    dim_i: usize,
}

impl ForwardModel {
    pub fn new(dim_s: usize, dim_i: usize) -> Result<Self> {
        if dim_s == 0 || dim_i == 0 {
            return Err(Error::invalid("output grid must be non-empty"));
        }
        Ok(Self { dim_s, dim_i })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_s, self.dim_i)
    }

    /// Lossy model probabilities on the output grid, row-major and not
    /// renormalized; the missing mass lies outside the grid.
    ///
    /// Equals the grid part of `apply_loss(compose_state(params))` with a
    /// sufficiently large intermediate grid. Loss commutes with the
    /// background convolution, and lossy coherent or thermal light is again
    /// coherent or thermal with the mean scaled by the efficiency, so only
    /// the diagonal PDC part needs an explicit loss contraction.
    pub fn lossy_grid(&self, params: &ModelParams) -> Result<Vec<f64>> {
        params.validate()?;
        let (ds, di) = (self.dim_s, self.dim_i);
        let diag = pdc_input(params.n_pdc, params.k, ds.max(di))?;
        let din = diag.len();

        let a = rect_loss(params.eta_s, ds, din, Some(&diag));
        let b = rect_loss(params.eta_i, di, din, None);
        let q = a * b.transpose();

        let bs = arm_background(params.eta_s * params.n_alpha_s, params.eta_s * params.n_th_s, ds)?;
        let bi = arm_background(params.eta_i * params.n_alpha_i, params.eta_i * params.n_th_i, di)?;
        let ks = kernel(&bs);
        let ki = kernel(&bi);

        let mut rows = vec![0.0; ds * di];
        for k in 0..ds {
            let out = &mut rows[k * di..(k + 1) * di];
            for (l, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (b, &w) in ki.iter().enumerate().take(l + 1) {
                    acc += w * q[(k, l - b)];
                }
                *o = acc;
            }
        }
        let mut probs = vec![0.0; ds * di];
        for k in 0..ds {
            for (a_off, &w) in ks.iter().enumerate().take(k + 1) {
                let src = &rows[(k - a_off) * di..(k - a_off + 1) * di];
                for (p, &r) in probs[k * di..(k + 1) * di].iter_mut().zip(src) {
                    *p += w * r;
                }
            }
        }
        Ok(probs)
    }

    /// Model distribution conditioned on the output grid.
    pub fn predict(&self, params: &ModelParams) -> Result<JointDistribution<f64>> {
        let probs = self.lossy_grid(params)?;
        let mass: f64 = probs.iter().copied().collect::<CompensatedSum<f64>>().value();
        if !(mass > 0.0) {
            return Err(Error::invalid("model puts no mass on the grid"));
        }
        let probs = probs.into_iter().map(|p| p / mass).collect();
        JointDistribution::new(self.dim_s, self.dim_i, probs, 0.0)
    }
}

fn pdc_input(n_pdc: f64, k: f64, start: usize) -> Result<Vec<f64>> {
    let mut dim = start.max(16);
    loop {
        let diag = pdc_diagonal(n_pdc, k, Truncation::unchecked(dim))?;
        if diag.truncated_mass() <= INPUT_TAIL {
            let probs = diag.probs();
            let mut suffix = diag.truncated_mass();
            let mut len = probs.len();
            while len > start && suffix + probs[len - 1] <= INPUT_TAIL {
                suffix += probs[len - 1];
                len -= 1;
            }
            return Ok(probs[..len].to_vec());
        }
        if dim >= MAX_INPUT_DIM {
            return Err(Error::invalid(format!(
                "n_pdc = {n_pdc} needs more than {MAX_INPUT_DIM} photon numbers"
            )));
        }
        dim *= 2;
    }
}

/// `rows x cols` loss matrix, columns optionally scaled by `scale`,
/// filled along each row by `L[k][n+1] = L[k][n] (n+1)/(n+1-k) (1-eta)`.
fn rect_loss(eta: f64, rows: usize, cols: usize, scale: Option<&[f64]>) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(rows, cols);
    let r = 1.0 - eta;
    for k in 0..rows.min(cols) {
        let mut v = eta.powi(k as i32);
        for n in k..cols {
            if n > k {
                v *= (n as f64) / ((n - k) as f64) * r;
            }
            m[(k, n)] = scale.map_or(v, |s| v * s[n]);
        }
    }
    m
}

fn kernel(b: &[f64]) -> Vec<f64> {
    let len = b.iter().rposition(|&v| v > 0.0).map_or(1, |i| i + 1);
    b[..len].to_vec()
}

/// Classical fidelity `(sum sqrt(p q))^2` of two distributions on the same
/// grid.
pub fn fidelity(p: &JointDistribution<f64>, q: &JointDistribution<f64>) -> Result<f64> {
    if p.dims() != q.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            p.dims(),
            q.dims()
        )));
    }
    let s = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a * b).sqrt())
        .collect::<CompensatedSum<f64>>()
        .value();
    Ok((s * s).min(1.0))
}

/// Weighted least-squares objective against a measured histogram.
#[derive(Clone, Debug)]
pub struct Objective {
    model: ForwardModel,
    measured: Vec<f64>,
    inv_sigma: Vec<f64>,
}

impl Objective {
    pub fn new(measured: &JointDistribution<f64>) -> Result<Self> {
        let n_events = measured
            .n_events()
            .ok_or_else(|| Error::InvalidData("fit needs an event count".into()))?;
        let (ds, di) = measured.dims();
        Ok(Self {
            model: ForwardModel::new(ds, di)?,
            measured: measured.probs().to_vec(),
            inv_sigma: sigma_weights(measured.probs(), n_events)
                .into_iter()
                .map(|s| 1.0 / s)
                .collect(),
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    /// `sum ((p_meas - p_model) / sigma)^2`.
    pub fn value(&self, params: &ModelParams) -> Result<f64> {
        let model = self.model.predict(params)?;
        Ok(self
            .measured
            .iter()
            .zip(model.probs())
            .zip(&self.inv_sigma)
            .map(|((m, p), w)| ((m - p) * w).powi(2))
            .collect::<CompensatedSum<f64>>()
            .value())
    }
}

/// Unconstrained coordinates: logit of the efficiencies and square roots of
/// the photon numbers and of `K - 1`.
pub fn to_unconstrained(p: &ModelParams) -> Vec<f64> {
    let logit = |e: f64| {
        let e = e.clamp(1e-9, 1.0 - 1e-9);
        (e / (1.0 - e)).ln()
    };
    vec![
        logit(p.eta_s),
        logit(p.eta_i),
        p.n_pdc.sqrt(),
        (p.k - 1.0).max(0.0).sqrt(),
        p.n_alpha_s.sqrt(),
        p.n_alpha_i.sqrt(),
        p.n_th_s.sqrt(),
        p.n_th_i.sqrt(),
    ]
}

pub fn from_unconstrained(u: &[f64]) -> ModelParams {
    let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
    ModelParams {
        eta_s: logistic(u[0]),
        eta_i: logistic(u[1]),
        n_pdc: u[2] * u[2],
        k: 1.0 + u[3] * u[3],
        n_alpha_s: u[4] * u[4],
        n_alpha_i: u[5] * u[5],
        n_th_s: u[6] * u[6],
        n_th_i: u[7] * u[7],
    }
}

/// Starting point from the histogram's moments: efficiencies from the
/// covariance of the two arms, the PDC mean from the arm means and `K` from
/// the signal `g^(2)`.
pub fn auto_init(measured: &JointDistribution<f64>) -> ModelParams {
    let m = joint_moments(measured);
    let eta = |cov_over: f64, own: f64| {
        let e = cov_over - own;
        if e.is_finite() {
            e.clamp(0.05, 0.95)
        } else {
            0.5
        }
    };
    let eta_i = eta(m.cov / m.mean_s, m.mean_i);
    let eta_s = eta(m.cov / m.mean_i, m.mean_s);
    let n_pdc = 0.5 * (m.mean_s / eta_s + m.mean_i / eta_i);
    let k = g2(&measured.marginal(crate::distributions::Arm::Signal))
        .map(|g| if g > 1.0 { 1.0 / (g - 1.0) } else { 20.0 })
        .unwrap_or(1.5)
        .clamp(1.0, 20.0);
    ModelParams {
        eta_s,
        eta_i,
        n_pdc: if n_pdc.is_finite() { n_pdc.max(1e-3) } else { 1.0 },
        k: k.max(1.0 + 1e-4),
        n_alpha_s: 0.01 * n_pdc.max(1e-3),
        n_alpha_i: 0.01 * n_pdc.max(1e-3),
        n_th_s: 1e-4,
        n_th_i: 1e-4,
    }
}

/// Controls of [`fit_model`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FitOptions {
    /// Independent Nelder-Mead starts, the first at the initial point.
    pub starts: usize,
    pub seed: u64,
    /// Spread of the random starts in unconstrained coordinates.
    pub spread: f64,
    /// Simplex diameter at which the multistart phase stops.
    pub coarse_tol: f64,
    /// Simplex diameter required for convergence.
    pub tol: f64,
    /// Evaluation budget per start and per refinement run.
    pub max_evals: usize,
    /// Refinement restarts from the best point.
    pub max_restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 16,
            seed: 0,
            spread: 0.3,
            coarse_tol: 1e-4,
            tol: 1e-8,
            max_evals: 20_000,
            max_restarts: 30,
        }
    }
}

/// Outcome of [`fit_model`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitResult {
    pub params: ModelParams,
    /// Weighted sum of squared residuals at `params`.
    pub residual: f64,
    /// Classical fidelity of the fitted model with the data.
    pub fidelity: f64,
    /// Objective evaluations over all starts and refinements.
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub starts: usize,
}

/// Fits the lossy model to a measured histogram by multistart Nelder-Mead.
///
/// Every start runs to `coarse_tol`; the best point is then refined by
/// restarted Nelder-Mead until the simplex diameter falls below `tol`
/// without further improvement. Non-convergence is reported through
/// `converged`, never by an error.
pub fn fit_model(
    measured: &JointDistribution<f64>,
    init: Option<ModelParams>,
    options: &FitOptions,
) -> Result<FitResult> {
    let objective = Objective::new(measured)?;
    let init = match init {
        Some(p) => {
            p.validate()?;
            p
        }
        None => auto_init(measured),
    };
    let f = |u: &[f64]| objective.value(&from_unconstrained(u)).unwrap_or(f64::INFINITY);
    let u0 = to_unconstrained(&init);

    let starts = options.starts.max(1);
    let runs: Vec<Minimum> = (0..starts)
        .into_par_iter()
        .map(|s| {
            let mut x = u0.clone();
            if s > 0 {
                let mut rng = stream_rng(options.seed, s as u64);
                for v in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += options.spread * z;
                }
            }
            nelder_mead(f, &x, 0.1, options.coarse_tol, options.max_evals)
        })
        .collect();
    let mut evaluations: usize = runs.iter().map(|m| m.evaluations).sum();
    let mut best = runs
        .into_iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one start");

    let mut converged = false;
    let mut step = 1e-2;
    for _ in 0..options.max_restarts {
        let m = nelder_mead(f, &best.x, step, options.tol, options.max_evals);
        evaluations += m.evaluations;
        let improved = m.value < best.value - 1e-12 * best.value.abs().max(1e-300);
        if m.value <= best.value {
            best = m;
        }
        if best.converged && !improved {
            converged = true;
            break;
        }
        step = (step * 0.3).max(1e-5);
    }

    let params = from_unconstrained(&best.x);
    let model = objective.model().predict(&params)?;
    Ok(FitResult {
        params,
        residual: best.value,
        fidelity: fidelity(measured, &model)?,
        iterations: evaluations,
        converged,
        seed: options.seed,
        starts,
    })
}
