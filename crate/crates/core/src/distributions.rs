//! Truncated photon-number distributions of multimode down-conversion with
//! independent coherent and thermal backgrounds.
//!
//! Every constructor works on a finite grid `0..dim`. The probability that
//! falls outside the grid is recorded as `truncated_mass` and never silently
//! folded back into the grid; constructors that take a [`Truncation`] fail
//! with [`Error::TruncationOverflow`] when that mass exceeds the tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{kahan_sum, ln_factorials, CompensatedSum, Real};

/// Default bound on the probability mass left outside a truncated grid.
pub const DEFAULT_TAIL_TOL: f64 = 1e-9;

/// Schmidt modes are added until the dropped weight falls below this.
pub const SCHMIDT_CUTOFF: f64 = 1e-12;

/// One of the two down-converted beams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Signal,
    Idler,
}

impl Arm {
    pub fn other(self) -> Arm {
        match self {
            Arm::Signal => Arm::Idler,
            Arm::Idler => Arm::Signal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Signal => "signal",
            Arm::Idler => "idler",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signal" | "s" => Ok(Arm::Signal),
            "idler" | "i" => Ok(Arm::Idler),
            _ => Err(Error::invalid(format!("unknown arm '{s}'"))),
        }
    }
}

/// Grid size together with the largest acceptable out-of-grid mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truncation<T> {
    pub dim: usize,
    pub tail_tol: T,
}

impl<T: Real> Truncation<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tail_tol: T::lit(DEFAULT_TAIL_TOL),
        }
    }

    pub fn with_tail_tol(mut self, tail_tol: T) -> Self {
        self.tail_tol = tail_tol;
        self
    }

    /// A truncation that accepts any tail.
    pub fn unchecked(dim: usize) -> Self {
        Self {
            dim,
            tail_tol: T::one(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        if !(self.tail_tol >= T::zero()) {
            return Err(Error::invalid("tail tolerance must be non-negative"));
        }
        Ok(())
    }

    fn check(&self, tail: T) -> Result<()> {
        if tail > self.tail_tol {
            return Err(Error::TruncationOverflow {
                tail_mass: tail.to_f64_lossy(),
                tolerance: self.tail_tol.to_f64_lossy(),
                dim: self.dim,
            });
        }
        Ok(())
    }
}

impl<T: Real> From<usize> for Truncation<T> {
    fn from(dim: usize) -> Self {
        Self::new(dim)
    }
}

fn check_probs<T: Real>(probs: &[T], truncated_mass: T) -> Result<()> {
    if let Some(p) = probs.iter().find(|p| !(**p >= T::zero()) || !p.is_finite()) {
        return Err(Error::InvalidData(format!(
            "probabilities must be finite and non-negative, found {p}"
        )));
    }
    if !(truncated_mass >= T::zero()) || !truncated_mass.is_finite() {
        return Err(Error::InvalidData(format!(
            "truncated mass must be finite and non-negative, found {truncated_mass}"
        )));
    }
    let total = kahan_sum(probs) + truncated_mass;
    if (total - T::one()).abs() > T::norm_tol() {
        return Err(Error::InvalidData(format!(
            "probabilities sum to {total} including truncated mass, expected 1"
        )));
    }
    Ok(())
}

fn tail_of<T: Real>(probs: &[T]) -> T {
    (T::one() - kahan_sum(probs)).max(T::zero())
}

/// Photon-number distribution of a single mode on `0..dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalDistribution<T> {
    probs: Vec<T>,
    truncated_mass: T,
}

impl<T: Real> MarginalDistribution<T> {
    pub fn new(probs: Vec<T>, truncated_mass: T) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("distribution needs at least one entry"));
        }
        check_probs(&probs, truncated_mass)?;
        Ok(Self {
            probs,
            truncated_mass,
        })
    }

    /// Grid probabilities whose deficit from unit mass is the truncated tail.
    pub fn from_truncated(probs: Vec<T>) -> Result<Self> {
        let tail = tail_of(&probs);
        Self::new(probs, tail)
    }

    /// Renormalizes non-negative weights into a complete distribution.
    pub fn from_weights(weights: &[T]) -> Result<Self> {
        let total = kahan_sum(weights);
        if !(total > T::zero()) {
            return Err(Error::InvalidData("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|&w| w / total).collect(), T::zero())
    }

    /// Fock state `|n>` on a grid of size `dim > n`.
    pub fn fock(n: usize, dim: usize) -> Result<Self> {
        if n >= dim {
            return Err(Error::invalid(format!("Fock {n} does not fit dim {dim}")));
        }
        let mut probs = vec![T::zero(); dim];
        probs[n] = T::one();
        Self::new(probs, T::zero())
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn truncated_mass(&self) -> T {
        self.truncated_mass
    }

    /// Probability of `n` photons, zero beyond the grid.
    pub fn get(&self, n: usize) -> T {
        self.probs.get(n).copied().unwrap_or_else(T::zero)
    }

    pub fn mass(&self) -> T {
        kahan_sum(&self.probs)
    }

    pub fn mean(&self) -> T {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, &p)| T::from_usize_lossy(n) * p)
            .collect::<CompensatedSum<T>>()
            .value()
    }

    pub fn into_probs(self) -> Vec<T> {
        self.probs
    }
}

/// Raw two-arm histogram, signal photon number along rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointCounts {
    dim_s: usize,
    dim_i: usize,
    counts: Vec<u64>,
}

impl JointCounts {
    pub fn new(dim_s: usize, dim_i: usize, counts: Vec<u64>) -> Result<Self> {
        if dim_s == 0 || dim_i == 0 || counts.len() != dim_s * dim_i {
            return Err(Error::DimensionMismatch(format!(
                "{} counts for a {dim_s}x{dim_i} grid",
                counts.len()
            )));
        }
        Ok(Self {
            dim_s,
            dim_i,
            counts,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_s, self.dim_i)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, m: usize, n: usize) -> u64 {
        if m < self.dim_s && n < self.dim_i {
            self.counts[m * self.dim_i + n]
        } else {
            0
        }
    }

    pub fn n_events(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Relative frequencies, carrying the event count.
    pub fn to_distribution<T: Real>(&self) -> Result<JointDistribution<T>> {
        let n = self.n_events();
        if n == 0 {
            return Err(Error::InvalidData("histogram holds no events".into()));
        }
        let total = T::lit(n as f64);
        let probs = self
            .counts
            .iter()
            .map(|&c| T::lit(c as f64) / total)
            .collect();
        let mut j = JointDistribution::new(self.dim_s, self.dim_i, probs, T::zero())?;
        j.n_events = Some(n);
        Ok(j)
    }
}

/// Joint photon-number distribution over signal (rows) x idler (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution<T> {
    dim_s: usize,
    dim_i: usize,
    probs: Vec<T>,
    truncated_mass: T,
    n_events: Option<u64>,
}

impl<T: Real> JointDistribution<T> {
    /// Row-major probabilities; `probs[m * dim_i + n]` is `p(m, n)`.
    pub fn new(dim_s: usize, dim_i: usize, probs: Vec<T>, truncated_mass: T) -> Result<Self> {
        if dim_s == 0 || dim_i == 0 || probs.len() != dim_s * dim_i {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {dim_s}x{dim_i} grid",
                probs.len()
            )));
        }
        check_probs(&probs, truncated_mass)?;
        Ok(Self {
            dim_s,
            dim_i,
            probs,
            truncated_mass,
            n_events: None,
        })
    }

    pub fn from_truncated(dim_s: usize, dim_i: usize, probs: Vec<T>) -> Result<Self> {
        let tail = tail_of(&probs);
        Self::new(dim_s, dim_i, probs, tail)
    }

    /// Perfectly correlated state with `p(n, n)` taken from `diag`.
    pub fn diagonal(diag: &MarginalDistribution<T>) -> Self {
        let d = diag.dim();
        let mut probs = vec![T::zero(); d * d];
        for (n, &p) in diag.probs().iter().enumerate() {
            probs[n * d + n] = p;
        }
        Self {
            dim_s: d,
            dim_i: d,
            probs,
            truncated_mass: diag.truncated_mass(),
            n_events: None,
        }
    }

    /// Independent arms.
    pub fn product(signal: &MarginalDistribution<T>, idler: &MarginalDistribution<T>) -> Self {
        let (ds, di) = (signal.dim(), idler.dim());
        let mut probs = Vec::with_capacity(ds * di);
        for &a in signal.probs() {
            probs.extend(idler.probs().iter().map(|&b| a * b));
        }
        let tail = tail_of(&probs);
        Self {
            dim_s: ds,
            dim_i: di,
            probs,
            truncated_mass: tail,
            n_events: None,
        }
    }

    pub fn with_n_events(mut self, n_events: Option<u64>) -> Self {
        self.n_events = n_events;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_s, self.dim_i)
    }

    pub fn dim(&self, arm: Arm) -> usize {
        match arm {
            Arm::Signal => self.dim_s,
            Arm::Idler => self.dim_i,
        }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn truncated_mass(&self) -> T {
        self.truncated_mass
    }

    pub fn n_events(&self) -> Option<u64> {
        self.n_events
    }

    /// `p(m, n)`, zero outside the grid.
    pub fn get(&self, m: usize, n: usize) -> T {
        if m < self.dim_s && n < self.dim_i {
            self.probs[m * self.dim_i + n]
        } else {
            T::zero()
        }
    }

    pub fn row(&self, m: usize) -> &[T] {
        &self.probs[m * self.dim_i..(m + 1) * self.dim_i]
    }

    pub fn mass(&self) -> T {
        kahan_sum(&self.probs)
    }

    pub fn marginal(&self, arm: Arm) -> MarginalDistribution<T> {
        let probs = match arm {
            Arm::Signal => (0..self.dim_s).map(|m| kahan_sum(self.row(m))).collect(),
            Arm::Idler => {
                let mut acc = vec![CompensatedSum::new(); self.dim_i];
                for m in 0..self.dim_s {
                    for (a, &p) in acc.iter_mut().zip(self.row(m)) {
                        a.add(p);
                    }
                }
                acc.iter().map(CompensatedSum::value).collect()
            }
        };
        MarginalDistribution {
            probs,
            truncated_mass: self.truncated_mass,
        }
    }

    /// Signal and idler marginals.
    pub fn marginals(&self) -> (MarginalDistribution<T>, MarginalDistribution<T>) {
        (self.marginal(Arm::Signal), self.marginal(Arm::Idler))
    }

    pub fn mean(&self, arm: Arm) -> T {
        self.marginal(arm).mean()
    }

    /// Restricts to a detector window `0..dim_s` x `0..dim_i` and
    /// renormalizes: the result is the distribution conditioned on both
    /// photon numbers falling inside the window.
    pub fn window(&self, dim_s: usize, dim_i: usize) -> Result<Self> {
        if dim_s == 0 || dim_i == 0 || dim_s > self.dim_s || dim_i > self.dim_i {
            return Err(Error::DimensionMismatch(format!(
                "window {dim_s}x{dim_i} not inside {}x{}",
                self.dim_s, self.dim_i
            )));
        }
        let mut probs = Vec::with_capacity(dim_s * dim_i);
        for m in 0..dim_s {
            probs.extend_from_slice(&self.row(m)[..dim_i]);
        }
        let total = kahan_sum(&probs);
        if !(total > T::zero()) {
            return Err(Error::InvalidData("window holds no probability".into()));
        }
        probs.iter_mut().for_each(|p| *p = *p / total);
        Self::new(dim_s, dim_i, probs, T::zero())
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> JointDistribution<U> {
        JointDistribution {
            dim_s: self.dim_s,
            dim_i: self.dim_i,
            probs: self
                .probs
                .iter()
                .map(|p| U::lit(p.to_f64_lossy()))
                .collect(),
            truncated_mass: U::lit(self.truncated_mass.to_f64_lossy()),
            n_events: self.n_events,
        }
    }

    pub(crate) fn from_parts_unchecked(
        dim_s: usize,
        dim_i: usize,
        probs: Vec<T>,
        truncated_mass: T,
        n_events: Option<u64>,
    ) -> Self {
        debug_assert_eq!(probs.len(), dim_s * dim_i);
        Self {
            dim_s,
            dim_i,
            probs,
            truncated_mass,
            n_events,
        }
    }
}

/// Row and column sums of a joint distribution.
pub fn marginals<T: Real>(
    j: &JointDistribution<T>,
) -> (MarginalDistribution<T>, MarginalDistribution<T>) {
    j.marginals()
}

/// Schmidt coefficients of a multimode down-conversion source.
#[derive(Clone, Debug, PartialEq)]
pub struct SchmidtSpectrum<T> {
    lambdas: Vec<T>,
    gain: T,
}

impl<T: Real> SchmidtSpectrum<T> {
    pub fn lambdas(&self) -> &[T] {
        &self.lambdas
    }

    pub fn gain(&self) -> T {
        self.gain
    }

    pub fn n_modes(&self) -> usize {
        self.lambdas.len()
    }

    /// `1 / sum(lambda_k^4)`.
    pub fn effective_mode_number(&self) -> T {
        let s4 = self
            .lambdas
            .iter()
            .map(|&l| l.powi(4))
            .collect::<CompensatedSum<T>>()
            .value();
        T::one() / s4
    }

    /// Mean photon number per arm for a given gain.
    pub fn mean_photons_at(&self, gain: T) -> T {
        self.lambdas
            .iter()
            .map(|&l| (gain * l).sinh().powi(2))
            .collect::<CompensatedSum<T>>()
            .value()
    }

    /// Solves for the gain `B` that puts `n_pdc` photons in each arm, using
    /// bisection on the increasing map `B -> sum_k sinh^2(B lambda_k)`.
    pub fn with_mean_photons(mut self, n_pdc: T) -> Result<Self> {
        if !(n_pdc >= T::zero()) || !n_pdc.is_finite() {
            return Err(Error::invalid(format!("n_pdc must be >= 0, got {n_pdc}")));
        }
        if n_pdc == T::zero() {
            self.gain = T::zero();
            return Ok(self);
        }
        let mut lo = T::zero();
        let mut hi = n_pdc.sqrt().asinh() + T::one();
        while self.mean_photons_at(hi) < n_pdc {
            hi = hi + hi;
            if !hi.is_finite() {
                return Err(Error::invalid("gain bracket diverged"));
            }
        }
        for _ in 0..400 {
            let mid = (lo + hi) / T::lit(2.0);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.mean_photons_at(mid) < n_pdc {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.gain = (lo + hi) / T::lit(2.0);
        Ok(self)
    }

    /// Per-mode two-mode-squeezing amplitudes `tanh(B lambda_k)`.
    pub fn mode_amplitudes(&self) -> Vec<T> {
        self.lambdas
            .iter()
            .map(|&l| (self.gain * l).tanh())
            .collect()
    }
}

/// Exponentially decaying Schmidt spectrum `lambda_k^2 = (1-q) q^(k-1)` with
/// `q = (K-1)/(K+1)`, cut once the dropped weight is below
/// [`SCHMIDT_CUTOFF`] and renormalized.
pub fn schmidt_spectrum<T: Real>(k: T) -> Result<SchmidtSpectrum<T>> {
    let q = schmidt_ratio(k)?;
    let cutoff = T::lit(SCHMIDT_CUTOFF);
    let mut n_modes = 1;
    let mut dropped = q;
    while dropped >= cutoff {
        n_modes += 1;
        dropped = dropped * q;
    }
    schmidt_spectrum_with_modes(k, n_modes)
}

/// Same spectrum truncated to exactly `n_modes` modes.
pub fn schmidt_spectrum_with_modes<T: Real>(k: T, n_modes: usize) -> Result<SchmidtSpectrum<T>> {
    if n_modes == 0 {
        return Err(Error::invalid("need at least one Schmidt mode"));
    }
    let q = schmidt_ratio(k)?;
    let weights: Vec<T> = (0..n_modes)
        .map(|i| (T::one() - q) * q.powi(i as i32))
        .collect();
    let total = kahan_sum(&weights);
    let lambdas = weights.iter().map(|&w| (w / total).sqrt()).collect();
    Ok(SchmidtSpectrum {
        lambdas,
        gain: T::zero(),
    })
}

fn schmidt_ratio<T: Real>(k: T) -> Result<T> {
    if !(k >= T::one()) || !k.is_finite() {
        return Err(Error::invalid(format!(
            "effective mode number must be >= 1, got {k}"
        )));
    }
    Ok((k - T::one()) / (k + T::one()))
}

/// Convolves `x` in place with the geometric distribution `(1-t) t^n`,
/// truncated to the length of `x`.
fn convolve_geometric<T: Real>(x: &mut [T], t: T) {
    let a = T::one() - t;
    let mut prev = T::zero();
    for v in x.iter_mut() {
        prev = a * *v + t * prev;
        *v = prev;
    }
}

/// Discrete convolution truncated to `dim` entries.
pub fn convolve<T: Real>(a: &[T], b: &[T], dim: usize) -> Vec<T> {
    let la = trimmed_len(a);
    let lb = trimmed_len(b);
    let mut out = vec![T::zero(); dim];
    for (i, &x) in a[..la].iter().enumerate().take(dim) {
        if x == T::zero() {
            continue;
        }
        for (o, &y) in out[i..].iter_mut().zip(&b[..lb]) {
            *o = *o + x * y;
        }
    }
    out
}

fn trimmed_len<T: Real>(x: &[T]) -> usize {
    x.iter().rposition(|&v| v != T::zero()).map_or(0, |i| i + 1)
}

/// Single-mode two-mode squeezed vacuum, `p(n, n) = (1-lambda^2) lambda^(2n)`.
///
/// The grid is not tail-checked; the exact tail `lambda^(2 dim)` is recorded.
pub fn tmsv_joint<T: Real>(lambda: T, dim: usize) -> Result<JointDistribution<T>> {
    if !(lambda >= T::zero()) || !(lambda < T::one()) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1), got {lambda}")));
    }
    if dim == 0 {
        return Err(Error::invalid("dim must be at least 1"));
    }
    let l2 = lambda * lambda;
    let mut probs = vec![T::zero(); dim * dim];
    for n in 0..dim {
        probs[n * dim + n] = (T::one() - l2) * l2.powi(n as i32);
    }
    let tail = l2.powi(dim as i32);
    Ok(JointDistribution::from_parts_unchecked(dim, dim, probs, tail, None))
}

/// Photon-number distribution of either arm of the multimode PDC state,
/// i.e. the diagonal of its joint distribution.
pub fn pdc_diagonal<T: Real>(
    n_pdc: T,
    k: T,
    trunc: impl Into<Truncation<T>>,
) -> Result<MarginalDistribution<T>> {
    let trunc = trunc.into();
    trunc.validate()?;
    let spectrum = schmidt_spectrum(k)?.with_mean_photons(n_pdc)?;
    let mut diag = vec![T::zero(); trunc.dim];
    diag[0] = T::one();
    for t in spectrum.mode_amplitudes() {
        convolve_geometric(&mut diag, t * t);
    }
    let tail = tail_of(&diag);
    trunc.check(tail)?;
    Ok(MarginalDistribution {
        probs: diag,
        truncated_mass: tail,
    })
}

/// Multimode PDC joint distribution with `n_pdc` mean photons per arm and
/// effective mode number `k`. Every Schmidt mode pair is a two-mode squeezed
/// vacuum with amplitude `tanh(B lambda_k)`; their photon numbers add, so the
/// joint distribution stays diagonal.
pub fn multimode_pdc<T: Real>(
    n_pdc: T,
    k: T,
    trunc: impl Into<Truncation<T>>,
) -> Result<JointDistribution<T>> {
    Ok(JointDistribution::diagonal(&pdc_diagonal(n_pdc, k, trunc)?))
}

/// Background photon statistics added independently to each arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Coherent light.
    Poisson,
    Thermal,
}

/// Poissonian or thermal distribution with mean `mu` on `0..dim`.
pub fn background_marginal<T: Real>(
    kind: Background,
    mu: T,
    trunc: impl Into<Truncation<T>>,
) -> Result<MarginalDistribution<T>> {
    let trunc = trunc.into();
    trunc.validate()?;
    if !(mu >= T::zero()) || !mu.is_finite() {
        return Err(Error::invalid(format!("mean photon number must be >= 0, got {mu}")));
    }
    let dim = trunc.dim;
    let (probs, tail) = match kind {
        _ if mu == T::zero() => {
            let mut p = vec![T::zero(); dim];
            p[0] = T::one();
            (p, T::zero())
        }
        Background::Poisson => {
            let lf = ln_factorials::<T>(dim);
            let ln_mu = mu.ln();
            let p: Vec<T> = (0..dim)
                .map(|n| (T::from_usize_lossy(n) * ln_mu - mu - lf[n]).exp())
                .collect();
            let tail = tail_of(&p);
            (p, tail)
        }
        Background::Thermal => {
            let t = mu / (T::one() + mu);
            let mut p = vec![T::zero(); dim];
            p[0] = T::one();
            convolve_geometric(&mut p, t);
            (p, t.powi(dim as i32))
        }
    };
    trunc.check(tail)?;
    Ok(MarginalDistribution {
        probs,
        truncated_mass: tail,
    })
}

/// The eight parameters of the lossy PDC + background model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub eta_s: f64,
    pub eta_i: f64,
    /// Mean photon number per arm of the PDC component.
    pub n_pdc: f64,
    /// Effective Schmidt mode number.
    pub k: f64,
    pub n_alpha_s: f64,
    pub n_alpha_i: f64,
    pub n_th_s: f64,
    pub n_th_i: f64,
}

impl ModelParams {
    /// PDC only, no loss or background.
    pub fn pdc(n_pdc: f64, k: f64) -> Self {
        Self {
            eta_s: 1.0,
            eta_i: 1.0,
            n_pdc,
            k,
            n_alpha_s: 0.0,
            n_alpha_i: 0.0,
            n_th_s: 0.0,
            n_th_i: 0.0,
        }
    }

    pub fn with_efficiencies(mut self, eta_s: f64, eta_i: f64) -> Self {
        self.eta_s = eta_s;
        self.eta_i = eta_i;
        self
    }

    pub fn with_coherent(mut self, n_alpha_s: f64, n_alpha_i: f64) -> Self {
        self.n_alpha_s = n_alpha_s;
        self.n_alpha_i = n_alpha_i;
        self
    }

    pub fn with_thermal(mut self, n_th_s: f64, n_th_i: f64) -> Self {
        self.n_th_s = n_th_s;
        self.n_th_i = n_th_i;
        self
    }

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.eta_s,
            self.eta_i,
            self.n_pdc,
            self.k,
            self.n_alpha_s,
            self.n_alpha_i,
            self.n_th_s,
            self.n_th_i,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            eta_s: a[0],
            eta_i: a[1],
            n_pdc: a[2],
            k: a[3],
            n_alpha_s: a[4],
            n_alpha_i: a[5],
            n_th_s: a[6],
            n_th_i: a[7],
        }
    }

    pub const NAMES: [&'static str; 8] = [
        "eta_s", "eta_i", "n_pdc", "K", "n_alpha_s", "n_alpha_i", "n_th_s", "n_th_i",
    ];

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if let Some(i) = a.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("{} is not finite", Self::NAMES[i])));
        }
        for (name, eta) in [("eta_s", self.eta_s), ("eta_i", self.eta_i)] {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::invalid(format!("{name} = {eta} outside [0, 1]")));
            }
        }
        if self.k < 1.0 {
            return Err(Error::invalid(format!("K = {} below 1", self.k)));
        }
        for i in [2, 4, 5, 6, 7] {
            if a[i] < 0.0 {
                return Err(Error::invalid(format!("{} = {} is negative", Self::NAMES[i], a[i])));
            }
        }
        Ok(())
    }

    /// Mean photon numbers of the lossless state in each arm.
    pub fn mean_photons(&self) -> (f64, f64) {
        (
            self.n_pdc + self.n_alpha_s + self.n_th_s,
            self.n_pdc + self.n_alpha_i + self.n_th_i,
        )
    }
}

/// Background distribution (coherent convolved with thermal) of one arm.
pub(crate) fn arm_background<T: Real>(n_alpha: T, n_th: T, dim: usize) -> Result<Vec<T>> {
    let mut b = background_marginal(Background::Poisson, n_alpha, Truncation::unchecked(dim))?
        .into_probs();
    if n_th > T::zero() {
        convolve_geometric(&mut b, n_th / (T::one() + n_th));
    }
    Ok(b)
}

/// Lossless state of the model: PDC joint distribution convolved with the
/// product of each arm's coherent and thermal backgrounds. The efficiencies
/// in `params` are ignored.
pub fn compose_state<T: Real>(
    params: &ModelParams,
    trunc: impl Into<Truncation<T>>,
) -> Result<JointDistribution<T>> {
    params.validate()?;
    let trunc = trunc.into();
    trunc.validate()?;
    let dim = trunc.dim;
    let diag = pdc_diagonal(T::lit(params.n_pdc), T::lit(params.k), Truncation::unchecked(dim))?;
    let bs = arm_background(T::lit(params.n_alpha_s), T::lit(params.n_th_s), dim)?;
    let bi = arm_background(T::lit(params.n_alpha_i), T::lit(params.n_th_i), dim)?;
    let ls = trimmed_len(&bs);
    let li = trimmed_len(&bi);

    let mut probs = vec![T::zero(); dim * dim];
    for (k, &d) in diag.probs().iter().enumerate() {
        if d == T::zero() {
            continue;
        }
        for (dm, &a) in bs[..ls.min(dim - k)].iter().enumerate() {
            let w = d * a;
            if w == T::zero() {
                continue;
            }
            let row = &mut probs[(k + dm) * dim + k..(k + dm + 1) * dim];
            for (p, &b) in row.iter_mut().zip(&bi[..li]) {
                *p = *p + w * b;
            }
        }
    }
    let tail = tail_of(&probs);
    trunc.check(tail)?;
    Ok(JointDistribution::from_parts_unchecked(dim, dim, probs, tail, None))
}

/// Smallest grid for which [`compose_state`] of `params` leaves at most
/// `tail_tol` outside the grid.
pub fn required_dim(params: &ModelParams, tail_tol: f64) -> Result<usize> {
    params.validate()?;
    if !(tail_tol > 0.0) {
        return Err(Error::invalid("tail tolerance must be positive"));
    }
    let mut dim = 32;
    loop {
        let diag = pdc_diagonal(params.n_pdc, params.k, Truncation::unchecked(dim))?;
        let sig = convolve(
            diag.probs(),
            &arm_background(params.n_alpha_s, params.n_th_s, dim)?,
            dim,
        );
        let idl = convolve(
            diag.probs(),
            &arm_background(params.n_alpha_i, params.n_th_i, dim)?,
            dim,
        );
        let tail_s = tail_of(&sig);
        let tail_i = tail_of(&idl);
        if tail_s + tail_i <= tail_tol * 0.5 {
            // Shrink using suffix sums, which are accurate for small tails.
            let mut suffix = tail_s + tail_i;
            let mut d = dim;
            while d > 1 {
                let next = suffix + sig[d - 1] + idl[d - 1];
                if next > tail_tol * 0.5 {
                    break;
                }
                suffix = next;
                d -= 1;
            }
            return Ok(d);
        }
        if dim > 1 << 16 {
            return Err(Error::invalid("state too bright for a finite grid"));
        }
        dim *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tmsv_vacuum() {
        let j = tmsv_joint(0.0_f64, 4).unwrap();
        assert_eq!(j.get(0, 0), 1.0);
        assert_eq!(j.mass(), 1.0);
        assert_eq!(j.truncated_mass(), 0.0);
    }

    #[test]
    fn tmsv_half() {
        let j = tmsv_joint(0.5_f64, 8).unwrap();
        assert!(close(j.get(0, 0), 0.75, 1e-15));
        assert!(close(j.get(1, 1), 0.1875, 1e-15));
        assert_eq!(j.get(1, 2), 0.0);
        assert!(close(j.truncated_mass(), 0.25f64.powi(8), 1e-18));
        assert!(close(j.mass() + j.truncated_mass(), 1.0, 1e-12));
    }

    #[test]
    fn tmsv_rejects_unit_lambda() {
        assert!(matches!(tmsv_joint(1.0_f64, 4), Err(Error::InvalidParameter(_))));
        assert!(tmsv_joint(-0.1_f64, 4).is_err());
    }

    #[test]
    fn tmsv_mean_at_top_pump_power() {
        // tanh(2.9) with sinh^2(2.9) ~ 81.9 photons per arm.
        let lambda = 2.9_f64.tanh();
        let j = tmsv_joint(lambda, 6000).unwrap();
        let mean = j.mean(Arm::Signal);
        assert!(close(mean, 2.9_f64.sinh().powi(2), 1e-6));
        assert!((mean - 80.0).abs() < 3.0);
    }

    #[test]
    fn schmidt_single_mode() {
        let s = schmidt_spectrum(1.0_f64).unwrap();
        assert_eq!(s.lambdas(), &[1.0]);
    }

    #[test]
    fn schmidt_two_modes_effective_number() {
        let s = schmidt_spectrum(2.0_f64).unwrap();
        // q = 1/3; direct summation of lambda^4
        let q: f64 = 1.0 / 3.0;
        let direct: f64 = (0..200).map(|i| ((1.0 - q) * q.powi(i)).powi(2)).sum();
        assert!(close(1.0 / direct, 2.0, 1e-12));
        assert!(close(s.effective_mode_number(), 2.0, 1e-9));
        let norm: f64 = s.lambdas().iter().map(|l| l * l).sum();
        assert!(close(norm, 1.0, 1e-12));
        assert!(s.lambdas().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn schmidt_ratio_for_fitted_k() {
        let q = (1.097_f64 - 1.0) / (1.097 + 1.0);
        assert!(close(q, 0.04626, 1e-5));
        let s = schmidt_spectrum(1.097_f64).unwrap();
        assert!(close(s.lambdas()[0].powi(2), (1.0 - q) / (1.0 - q.powi(s.n_modes() as i32)), 1e-14));
        assert!(close(s.effective_mode_number(), 1.097, 1e-9));
    }

    #[test]
    fn schmidt_rejects_sub_unit_k() {
        assert!(schmidt_spectrum(0.9_f64).is_err());
    }

    #[test]
    fn single_mode_pdc_is_tmsv() {
        let a = multimode_pdc(1.0_f64 / 3.0, 1.0, 40).unwrap();
        let b = tmsv_joint(0.5_f64, 40).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!(close(*x, *y, 1e-14));
        }
    }

    #[test]
    fn pdc_mean_matches_request() {
        let j = multimode_pdc(2.5_f64, 1.3, 200).unwrap();
        assert!(close(j.mean(Arm::Signal), 2.5, 1e-8));
        assert!(close(j.mean(Arm::Idler), 2.5, 1e-8));
        let (ds, di) = j.dims();
        for m in 0..ds {
            for n in 0..di {
                if m != n {
                    assert_eq!(j.get(m, n), 0.0);
                }
            }
        }
    }

    #[test]
    fn pdc_reports_overflow() {
        match multimode_pdc(20.0_f64, 1.0, 50) {
            Err(Error::TruncationOverflow { tail_mass, dim, .. }) => {
                assert_eq!(dim, 50);
                assert!((tail_mass - (20.0f64 / 21.0).powi(50)).abs() < 1e-12);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn backgrounds() {
        let p = background_marginal(Background::Poisson, 0.0_f64, 5).unwrap();
        assert_eq!(p.probs()[0], 1.0);
        let t = background_marginal(Background::Thermal, 1.0_f64, 32).unwrap();
        assert!(close(t.probs()[0], 0.5, 1e-15));
        assert!(close(t.probs()[1], 0.25, 1e-15));
        let c = background_marginal(Background::Poisson, 0.38_f64, 30).unwrap();
        assert!(close(c.mean(), 0.38, 1e-12));
    }

    #[test]
    fn compose_without_background_is_pdc() {
        let p = ModelParams::pdc(1.2, 1.1);
        let a = compose_state::<f64>(&p, 80).unwrap();
        let b = multimode_pdc(1.2, 1.1, 80).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!(close(*x, *y, 1e-15));
        }
    }

    #[test]
    fn compose_coherent_signal_only() {
        let p = ModelParams::pdc(0.0, 1.0).with_coherent(1.0, 0.0);
        let j = compose_state::<f64>(&p, 30).unwrap();
        let pois = background_marginal(Background::Poisson, 1.0_f64, 30).unwrap();
        for m in 0..30 {
            assert!(close(j.get(m, 0), pois.probs()[m], 1e-15));
            for n in 1..30 {
                assert_eq!(j.get(m, n), 0.0);
            }
        }
    }

    #[test]
    fn marginals_of_tmsv_are_thermal() {
        let j = tmsv_joint(0.5_f64, 60).unwrap();
        let (s, i) = j.marginals();
        let mu: f64 = 1.0 / 3.0;
        for n in 0..60 {
            let thermal = mu.powi(n as i32) / (1.0 + mu).powi(n as i32 + 1);
            assert!(close(s.probs()[n], thermal, 1e-12));
            assert!(close(i.probs()[n], thermal, 1e-12));
        }
    }

    #[test]
    fn marginals_of_product_are_factors() {
        let a = MarginalDistribution::new(vec![0.2, 0.5, 0.3], 0.0).unwrap();
        let b = MarginalDistribution::new(vec![0.6, 0.4], 0.0).unwrap();
        let j = JointDistribution::product(&a, &b);
        let (s, i) = j.marginals();
        for (x, y) in s.probs().iter().zip(a.probs()) {
            assert!(close(*x, *y, 1e-15));
        }
        for (x, y) in i.probs().iter().zip(b.probs()) {
            assert!(close(*x, *y, 1e-15));
        }
    }

    #[test]
    fn required_dim_meets_tolerance() {
        let p = ModelParams::pdc(3.0, 1.1).with_coherent(0.2, 0.1).with_thermal(0.05, 0.0);
        let d = required_dim(&p, 1e-9).unwrap();
        let j = compose_state::<f64>(&p, Truncation::new(d)).unwrap();
        assert!(j.truncated_mass() <= 1e-9);
        assert!(compose_state::<f64>(&p, Truncation::new(d * 4 / 5)).is_err());
    }

    #[test]
    fn window_renormalizes() {
        let j = tmsv_joint(0.8_f64, 100).unwrap();
        let w = j.window(10, 10).unwrap();
        assert_eq!(w.truncated_mass(), 0.0);
        assert!(close(w.mass(), 1.0, 1e-14));
        assert!(close(w.get(3, 3) / w.get(2, 2), 0.64, 1e-12));
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(MarginalDistribution::new(vec![0.5, 0.6], 0.0_f64).is_err());
        assert!(MarginalDistribution::new(vec![-0.1, 1.1], 0.0_f64).is_err());
        assert!(JointDistribution::new(2, 2, vec![1.0_f64; 3], 0.0).is_err());
    }

    #[test]
    fn counts_to_distribution() {
        let c = JointCounts::new(2, 2, vec![1, 0, 0, 3]).unwrap();
        let j: JointDistribution<f64> = c.to_distribution().unwrap();
        assert_eq!(j.n_events(), Some(4));
        assert_eq!(j.get(1, 1), 0.75);
    }
}
