//! Synthetic transition-edge-sensor traces and template-overlap photon
//! counting.
//!
//! Pulses follow a phenomenological model: a fixed double-exponential
//! shape whose amplitude saturates with photon number, plus white Gaussian
//! noise. A template bank is calibrated from runs of Poissonian light; each
//! template converts the overlap of a trace with itself into a photon
//! number, and is trusted only near the mean photon number of its run.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::sampling::stream_rng;

/// Minimum traces per calibration run.
pub const MIN_TRACES_PER_RUN: usize = 10_000;
/// Number of templates in the standard bank.
pub const TEMPLATE_COUNT: usize = 20;
/// Half-width of the reliability window in units of `sqrt(mu)`.
pub const WINDOW_SIGMAS: f64 = 3.0;

/// Parameters of the synthetic detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceModel {
    /// Rise time in microseconds.
    pub rise_time: f64,
    /// Decay time in microseconds.
    pub decay_time: f64,
    pub amplitude_scale: f64,
    /// Photon number setting the scale of amplitude compression.
    pub saturation_n: f64,
    pub noise_sigma: f64,
    /// Sample interval in microseconds.
    pub dt: f64,
    /// Samples per trace.
    pub samples: usize,
}

impl TraceModel {
    /// Reference detector: single photons separate by eight noise standard
    /// deviations in overlap space.
    pub fn design() -> Self {
        let mut m = Self {
            rise_time: 0.2,
            decay_time: 1.5,
            amplitude_scale: 1.0,
            saturation_n: 60.0,
            noise_sigma: 0.0,
            dt: 0.05,
            samples: 200,
        };
        m.noise_sigma = m.amplitude(1.0) * m.shape_norm() / 8.0;
        m
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rise_time", self.rise_time),
            ("decay_time", self.decay_time),
            ("amplitude_scale", self.amplitude_scale),
            ("saturation_n", self.saturation_n),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if self.rise_time >= self.decay_time {
            return Err(Error::invalid("rise_time must be shorter than decay_time"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("traces need at least one sample"));
        }
        Ok(())
    }

    /// Pulse amplitude `A (1 - exp(-n / n_sat))`.
    pub fn amplitude(&self, n: f64) -> f64 {
        self.amplitude_scale * (1.0 - (-n / self.saturation_n).exp())
    }

    /// Unit pulse shape `exp(-t/decay) - exp(-t/rise)` at the sample times.
    pub fn shape(&self) -> Vec<f64> {
        (0..self.samples)
            .map(|i| {
                let t = i as f64 * self.dt;
                (-t / self.decay_time).exp() - (-t / self.rise_time).exp()
            })
            .collect()
    }

    fn shape_norm(&self) -> f64 {
        self.shape().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A sampled voltage pulse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub samples: Vec<f64>,
}

/// Trace of `n` photons with noise drawn from `rng`.
pub fn synth_trace_with<R: Rng + ?Sized>(n: usize, model: &TraceModel, rng: &mut R) -> Result<Trace> {
    model.validate()?;
    let a = model.amplitude(n as f64);
    let mut samples: Vec<f64> = model.shape().into_iter().map(|s| a * s).collect();
    if model.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, model.noise_sigma)
            .map_err(|e| Error::invalid(format!("noise: {e}")))?;
        for s in samples.iter_mut() {
            *s += noise.sample(rng);
        }
    }
    Ok(Trace { samples })
}

/// Seeded trace of `n` photons.
pub fn synth_trace(n: usize, model: &TraceModel, seed: u64) -> Result<Trace> {
    synth_trace_with(n, model, &mut stream_rng(seed, 0))
}

/// Traces from Poissonian light of known mean, used for calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRun {
    pub mean_photons: f64,
    pub traces: Vec<Trace>,
}

/// Simulates a calibration run of `count` traces. Trace `t` uses the
/// generator stream `(seed, t)`.
pub fn synth_run(mean_photons: f64, count: usize, model: &TraceModel, seed: u64) -> Result<CalibrationRun> {
    model.validate()?;
    if !(mean_photons > 0.0) {
        return Err(Error::invalid("calibration runs need a positive mean"));
    }
    let poisson = Poisson::new(mean_photons).map_err(|e| Error::invalid(format!("poisson: {e}")))?;
    let traces = (0..count)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let n: f64 = poisson.sample(&mut rng);
            synth_trace_with(n as usize, model, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationRun {
        mean_photons,
        traces,
    })
}

/// Run means `0.5 * 160^(i/19)` spanning 0.5 to 80 photons.
pub fn standard_run_means() -> Vec<f64> {
    (0..TEMPLATE_COUNT)
        .map(|i| 0.5 * 160f64.powf(i as f64 / (TEMPLATE_COUNT - 1) as f64))
        .collect()
}

/// Piecewise-linear, increasing map from overlap to photon number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    /// Anchor overlaps, strictly increasing.
    pub overlaps: Vec<f64>,
    /// Photon numbers at the anchors, strictly increasing.
    pub photons: Vec<f64>,
}

impl CalibrationMap {
    fn new(overlaps: Vec<f64>, photons: Vec<f64>) -> Result<Self> {
        if overlaps.len() < 2 || overlaps.len() != photons.len() {
            return Err(Error::CalibrationFailure(
                "a calibration map needs at least two distinct anchors".into(),
            ));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&overlaps) || !increasing(&photons) {
            return Err(Error::CalibrationFailure(
                "overlap and photon number are not monotonically related".into(),
            ));
        }
        Ok(Self { overlaps, photons })
    }

    /// Photon number for an overlap, extrapolating the end segments.
    pub fn eval(&self, overlap: f64) -> f64 {
        interpolate(&self.overlaps, &self.photons, overlap)
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let i = xs.partition_point(|&v| v <= x).clamp(1, n - 1);
    let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// One calibrated template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub mean_photons: f64,
    pub trace: Vec<f64>,
    pub map: CalibrationMap,
}

impl Template {
    /// Photon numbers for which this template is trusted.
    pub fn window(&self) -> (f64, f64) {
        let half = WINDOW_SIGMAS * self.mean_photons.sqrt();
        (self.mean_photons - half, self.mean_photons + half)
    }

    fn distance_to_window(&self, estimate: f64) -> f64 {
        let (lo, hi) = self.window();
        if estimate < lo {
            lo - estimate
        } else if estimate > hi {
            estimate - hi
        } else {
            0.0
        }
    }
}

/// Calibrated template bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub dt: f64,
    /// Factor applied to every template, 1 for the calibrated bank.
    pub scale: f64,
    pub templates: Vec<Template>,
}

/// `sum_t a(t) b(t) dt`.
pub fn overlap(a: &[f64], b: &[f64], dt: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * dt
}

fn poisson_pmf(mu: f64, kmax: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(kmax + 1);
    let mut v = (-mu).exp();
    for k in 0..=kmax {
        if k > 0 {
            v *= mu / k as f64;
        }
        p.push(v);
    }
    p
}

/// Calibrates one template per run, with runs in increasing order of mean.
///
/// The template is the mean trace of its run. For every photon number `k`
/// inside the run's reliability window, the overlap quantile at the
/// Poissonian level `F(k-1) + P(k)/2` becomes an anchor. The anchor's
/// photon number is read back from the empirical mid-rank distribution
/// function at that overlap through the Poissonian levels, which keeps the
/// map consistent when overlaps tie, as they do without noise.
pub fn calibrate_templates(runs: &[CalibrationRun], dt: f64) -> Result<TemplateSet> {
    if runs.is_empty() {
        return Err(Error::CalibrationFailure("no calibration runs".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    if runs.windows(2).any(|w| !(w[1].mean_photons > w[0].mean_photons)) {
        return Err(Error::CalibrationFailure(
            "run means must be strictly increasing".into(),
        ));
    }
    let templates = runs
        .iter()
        .map(|run| calibrate_one(run, dt))
        .collect::<Result<Vec<_>>>()?;
    Ok(TemplateSet {
        dt,
        scale: 1.0,
        templates,
    })
}

fn calibrate_one(run: &CalibrationRun, dt: f64) -> Result<Template> {
    let count = run.traces.len();
    if count < MIN_TRACES_PER_RUN {
        return Err(Error::CalibrationFailure(format!(
            "run at mean {} has {count} traces, need {MIN_TRACES_PER_RUN}",
            run.mean_photons
        )));
    }
    let len = run.traces[0].samples.len();
    if run.traces.iter().any(|t| t.samples.len() != len) {
        return Err(Error::DimensionMismatch("traces differ in length".into()));
    }
    let mut template = vec![0.0; len];
    for t in &run.traces {
        for (m, &s) in template.iter_mut().zip(&t.samples) {
            *m += s;
        }
    }
    template.iter_mut().for_each(|m| *m /= count as f64);

    let mut ov: Vec<f64> = run
        .traces
        .iter()
        .map(|t| overlap(&t.samples, &template, dt))
        .collect();
    ov.sort_by(f64::total_cmp);

    let mu = run.mean_photons;
    let kmax = (mu + 12.0 * mu.sqrt() + 12.0).ceil() as usize;
    let pmf = poisson_pmf(mu, kmax);
    let mut levels = Vec::with_capacity(pmf.len());
    let mut below = 0.0;
    for &p in &pmf {
        levels.push(below + p / 2.0);
        below += p;
    }
    let ks: Vec<f64> = (0..levels.len()).map(|k| k as f64).collect();
    let valid = levels.windows(2).take_while(|w| w[1] > w[0]).count() + 1;
    let (levels, ks) = (&levels[..valid], &ks[..valid]);

    let n = count as f64;
    let mid_rank = |o: f64| {
        let lt = ov.partition_point(|&v| v < o) as f64;
        let le = ov.partition_point(|&v| v <= o) as f64;
        (lt + 0.5 * (le - lt)) / n
    };
    let half = WINDOW_SIGMAS * mu.sqrt();
    let k_lo = (mu - half).ceil().max(0.0) as usize;
    let k_hi = ((mu + half).floor() as usize).min(valid - 1);
    let mut anchors: Vec<(f64, f64)> = Vec::new();
    for k in k_lo..=k_hi {
        let idx = ((levels[k] * n).floor() as usize).min(count - 1);
        let o = ov[idx];
        let photons = interpolate(levels, ks, mid_rank(o));
        if anchors.last().is_none_or(|&(lo, _)| o > lo) {
            anchors.push((o, photons));
        }
    }
    let (overlaps, photons): (Vec<f64>, Vec<f64>) = anchors.into_iter().unzip();
    let map = CalibrationMap::new(overlaps, photons).map_err(|e| {
        Error::CalibrationFailure(format!("run at mean {mu}: {e}"))
    })?;
    Ok(Template {
        mean_photons: mu,
        trace: template,
        map,
    })
}

/// Photon number assigned to a trace, with per-template diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Classification {
    pub photons: usize,
    /// Continuous estimate of the chosen template.
    pub estimate: f64,
    /// Index of the chosen template.
    pub template: usize,
    /// Estimate of every template, in bank order.
    pub per_template: Vec<f64>,
}

impl TemplateSet {
    /// Classifies a trace: among templates whose reliability window
    /// contains their own estimate, takes the estimate closest to that
    /// template's mean, preferring the lower mean on ties.
    pub fn classify(&self, trace: &Trace) -> Result<Classification> {
        if let Some(t) = self.templates.first() {
            if t.trace.len() != trace.samples.len() {
                return Err(Error::DimensionMismatch(format!(
                    "trace has {} samples, templates {}",
                    trace.samples.len(),
                    t.trace.len()
                )));
            }
        }
        let per_template: Vec<f64> = self
            .templates
            .iter()
            .map(|t| t.map.eval(self.scale * overlap(&trace.samples, &t.trace, self.dt)))
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (i, (t, &e)) in self.templates.iter().zip(&per_template).enumerate() {
            if t.distance_to_window(e) > 0.0 {
                continue;
            }
            let d = (e - t.mean_photons).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, _)) => {
                let estimate = per_template[i];
                Ok(Classification {
                    photons: estimate.round().max(0.0) as usize,
                    estimate,
                    template: i,
                    per_template,
                })
            }
            None => {
                let nearest = self
                    .templates
                    .iter()
                    .zip(&per_template)
                    .map(|(t, &e)| (t.distance_to_window(e), e))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map_or(f64::NAN, |(_, e)| e);
                Err(Error::OutOfRange {
                    nearest_estimate: nearest,
                })
            }
        }
    }

    /// Classifies many traces in parallel, preserving order.
    pub fn classify_all(&self, traces: &[Trace]) -> Vec<Result<Classification>> {
        traces.par_iter().map(|t| self.classify(t)).collect()
    }

    /// The bank with every template multiplied by `scale`.
    pub fn rescaled(&self, scale: f64) -> Result<TemplateSet> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("template scale must be positive, got {scale}")));
        }
        let mut out = self.clone();
        out.scale *= scale;
        Ok(out)
    }
}

/// Banks with all templates scaled down and up, for a worst-case band of
/// any downstream statistic.
pub fn systematic_bounds(ts: &TemplateSet, scale_lo: f64, scale_hi: f64) -> Result<(TemplateSet, TemplateSet)> {
    if !(scale_lo > 0.0 && scale_lo < 1.0 && scale_hi > 1.0) || !scale_hi.is_finite() {
        return Err(Error::invalid(format!(
            "need 0 < scale_lo < 1 < scale_hi, got {scale_lo} and {scale_hi}"
        )));
    }
    Ok((ts.rescaled(scale_lo)?, ts.rescaled(scale_hi)?))
}

/// Simulates the standard calibration runs and calibrates a bank.
pub fn calibrate_standard(model: &TraceModel, traces_per_run: usize, seed: u64) -> Result<TemplateSet> {
    let runs = standard_run_means()
        .into_iter()
        .enumerate()
        .map(|(i, mu)| synth_run(mu, traces_per_run, model, seed.wrapping_add(1 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    calibrate_templates(&runs, model.dt)
}
