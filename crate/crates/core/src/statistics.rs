//! Factorial moments, normalized correlation functions, noise reduction,
//! parity, heralding, effective mode number, moment-matrix negativity and
//! squeezing estimates.
//!
//! Moments are evaluated term by term in log space,
//! `p_k exp(ln k!/(k-n)! - s)`, where the shift `s` is chosen so that the
//! result stays near unity (for example `n ln <n>` for `g^(n)`). Summation is
//! compensated. When a distribution carries truncated mass, a moment is
//! rejected if the last 5% of its support contributes more than `1e-6` of the
//! value, since the missing tail would then matter too.

use serde::Serialize;

use crate::distributions::{Arm, JointDistribution, MarginalDistribution};
use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::num::{ln_factorials, CompensatedSum, Real};

/// Fraction of the support treated as its edge by the tail guard.
pub const EDGE_FRACTION: f64 = 0.05;
/// Largest relative contribution the edge may make to an accepted moment.
pub const EDGE_TOLERANCE: f64 = 1e-6;

fn edge_start(dim: usize) -> usize {
    let width = ((dim as f64) * EDGE_FRACTION).ceil() as usize;
    dim - width.clamp(1, dim)
}

/// `exp(ln k!/(k-order)! - shift)` for `k < dim`, zero for `k < order`.
fn falling_weights<T: Real>(ln_fact: &[T], dim: usize, order: usize, shift: T) -> Vec<T> {
    (0..dim)
        .map(|k| {
            if k < order {
                T::zero()
            } else {
                (ln_fact[k] - ln_fact[k - order] - shift).exp()
            }
        })
        .collect()
}

fn guard<T: Real>(order: usize, total: T, edge: T) -> Result<()> {
    if total == T::zero() {
        return Ok(());
    }
    let relative = (edge / total).abs();
    if relative > T::lit(EDGE_TOLERANCE) {
        return Err(Error::TruncationUnreliable {
            order,
            relative: relative.to_f64_lossy(),
        });
    }
    Ok(())
}

fn shifted_moment<T: Real>(m: &MarginalDistribution<T>, order: usize, shift: T) -> Result<T> {
    let dim = m.dim();
    let lf = ln_factorials::<T>(dim);
    let w = falling_weights(&lf, dim, order, shift);
    let cut = edge_start(dim);
    let mut total = CompensatedSum::new();
    let mut edge = CompensatedSum::new();
    for (k, (&p, &wk)) in m.probs().iter().zip(&w).enumerate() {
        let term = p * wk;
        total.add(term);
        if k >= cut {
            edge.add(term);
        }
    }
    let total = total.value();
    if m.truncated_mass() > T::zero() {
        guard(order, total, edge.value())?;
    }
    Ok(total)
}

/// `<a^dag^n a^n> = sum_k k(k-1)...(k-n+1) p_k`.
pub fn factorial_moment<T: Real>(m: &MarginalDistribution<T>, order: usize) -> Result<T> {
    shifted_moment(m, order, T::zero())
}

fn positive_mean<T: Real>(mean: T) -> Result<T> {
    if mean > T::zero() {
        Ok(mean)
    } else {
        Err(Error::ZeroMean)
    }
}

/// `g^(n) = <a^dag^n a^n> / <a^dag a>^n`.
pub fn g_n<T: Real>(m: &MarginalDistribution<T>, order: usize) -> Result<T> {
    if order == 0 {
        return Ok(m.mass());
    }
    let mean = positive_mean(m.mean())?;
    shifted_moment(m, order, T::from_usize_lossy(order) * mean.ln())
}

/// Second-order correlation `g^(2)(0)` of a single arm.
pub fn g2<T: Real>(m: &MarginalDistribution<T>) -> Result<T> {
    g_n(m, 2)
}

/// Joint factorial moment `sum_{k,l} k^(p) l^(q) p_kl exp(-shift)`, where
/// `k^(p)` is the falling factorial.
fn shifted_joint_moment<T: Real>(
    j: &JointDistribution<T>,
    p: usize,
    q: usize,
    shift: T,
) -> Result<T> {
    let (ds, di) = j.dims();
    let lf = ln_factorials::<T>(ds.max(di));
    let a = falling_weights(&lf, ds, p, shift);
    let b = falling_weights(&lf, di, q, T::zero());
    let (cs, ci) = (edge_start(ds), edge_start(di));
    let mut total = CompensatedSum::new();
    let mut edge = CompensatedSum::new();
    for (k, &ak) in a.iter().enumerate() {
        if ak == T::zero() {
            continue;
        }
        for (l, (&pkl, &bl)) in j.row(k).iter().zip(&b).enumerate() {
            let term = ak * bl * pkl;
            total.add(term);
            if k >= cs || l >= ci {
                edge.add(term);
            }
        }
    }
    let total = total.value();
    if j.truncated_mass() > T::zero() {
        guard(p + q, total, edge.value())?;
    }
    Ok(total)
}

/// Joint factorial moment `<a^dag^p a^p b^dag^q b^q>`.
pub fn joint_factorial_moment<T: Real>(j: &JointDistribution<T>, p: usize, q: usize) -> Result<T> {
    shifted_joint_moment(j, p, q, T::zero())
}

/// `g^(m,n) = <a^dag^m a^m b^dag^n b^n> / (<a^dag a>^m <b^dag b>^n)`.
pub fn g_mn<T: Real>(j: &JointDistribution<T>, m: usize, n: usize) -> Result<T> {
    let mut shift = T::zero();
    if m > 0 {
        shift = shift + T::from_usize_lossy(m) * positive_mean(j.mean(Arm::Signal))?.ln();
    }
    if n > 0 {
        shift = shift + T::from_usize_lossy(n) * positive_mean(j.mean(Arm::Idler))?.ln();
    }
    shifted_joint_moment(j, m, n, shift)
}

/// Table of `g^(m,n)` for `1 <= m <= max_m`, `1 <= n <= max_n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GSurface<T> {
    pub max_m: usize,
    pub max_n: usize,
    /// Row-major, `values[(m-1) * max_n + (n-1)]`.
    pub values: Vec<T>,
}

impl<T: Real> GSurface<T> {
    pub fn get(&self, m: usize, n: usize) -> T {
        self.values[(m - 1) * self.max_n + (n - 1)]
    }
}

/// Evaluates the whole `g^(m,n)` surface at once. Equivalent to calling
/// [`g_mn`] per cell but shares the weight tables between cells.
pub fn g_surface<T: Real>(j: &JointDistribution<T>, max_m: usize, max_n: usize) -> Result<GSurface<T>> {
    if max_m == 0 || max_n == 0 {
        return Err(Error::invalid("surface orders must be at least 1"));
    }
    let (ds, di) = j.dims();
    let ln_mu_s = positive_mean(j.mean(Arm::Signal))?.ln();
    let ln_mu_i = positive_mean(j.mean(Arm::Idler))?.ln();
    let lf = ln_factorials::<T>(ds.max(di));
    let a: Vec<Vec<T>> = (1..=max_m)
        .map(|m| falling_weights(&lf, ds, m, T::from_usize_lossy(m) * ln_mu_s))
        .collect();
    let b: Vec<Vec<T>> = (1..=max_n)
        .map(|n| falling_weights(&lf, di, n, T::from_usize_lossy(n) * ln_mu_i))
        .collect();
    let guarded = j.truncated_mass() > T::zero();
    let (cs, ci) = (edge_start(ds), edge_start(di));

    // g[k][n] = sum_l p_kl b_n(l), and the same restricted to l < ci.
    let mut g_full = vec![T::zero(); ds * max_n];
    let mut g_inner = vec![T::zero(); ds * max_n];
    for k in 0..ds {
        let row = j.row(k);
        if row.iter().all(|&p| p == T::zero()) {
            continue;
        }
        for (n, bn) in b.iter().enumerate() {
            let mut full = CompensatedSum::new();
            let mut inner = CompensatedSum::new();
            for (l, (&p, &w)) in row.iter().zip(bn).enumerate() {
                full.add(p * w);
                if l < ci {
                    inner.add(p * w);
                }
            }
            g_full[k * max_n + n] = full.value();
            g_inner[k * max_n + n] = inner.value();
        }
    }
    let mut values = Vec::with_capacity(max_m * max_n);
    for (m, am) in a.iter().enumerate() {
        for n in 0..max_n {
            let mut full = CompensatedSum::new();
            let mut inner = CompensatedSum::new();
            for (k, &w) in am.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                full.add(w * g_full[k * max_n + n]);
                if k < cs {
                    inner.add(w * g_inner[k * max_n + n]);
                }
            }
            let total = full.value();
            if guarded {
                guard(m + n + 2, total, total - inner.value())?;
            }
            values.push(total);
        }
    }
    Ok(GSurface {
        max_m,
        max_n,
        values,
    })
}

/// First and second moments of a joint distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointMoments<T> {
    pub mean_s: T,
    pub mean_i: T,
    pub var_s: T,
    pub var_i: T,
    pub cov: T,
}

pub fn joint_moments<T: Real>(j: &JointDistribution<T>) -> JointMoments<T> {
    let (ds, _) = j.dims();
    let mut s = [CompensatedSum::new(); 5];
    for k in 0..ds {
        let x = T::from_usize_lossy(k);
        for (l, &p) in j.row(k).iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            let y = T::from_usize_lossy(l);
            s[0].add(x * p);
            s[1].add(y * p);
            s[2].add(x * x * p);
            s[3].add(y * y * p);
            s[4].add(x * y * p);
        }
    }
    let v: Vec<T> = s.iter().map(CompensatedSum::value).collect();
    JointMoments {
        mean_s: v[0],
        mean_i: v[1],
        var_s: v[2] - v[0] * v[0],
        var_i: v[3] - v[1] * v[1],
        cov: v[4] - v[0] * v[1],
    }
}

/// Noise reduction factor `Var(n_s - n_i) / <n_s + n_i>`.
pub fn nrf<T: Real>(j: &JointDistribution<T>) -> Result<T> {
    let (ds, _) = j.dims();
    let mut sum = CompensatedSum::new();
    let mut d1 = CompensatedSum::new();
    let mut d2 = CompensatedSum::new();
    for k in 0..ds {
        for (l, &p) in j.row(k).iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            let d = T::from_usize_lossy(k) - T::from_usize_lossy(l);
            sum.add(T::from_usize_lossy(k + l) * p);
            d1.add(d * p);
            d2.add(d * d * p);
        }
    }
    let total = positive_mean(sum.value())?;
    let var = d2.value() - d1.value() * d1.value();
    Ok((var / total).max(T::zero()))
}

/// Parity `<(-1)^n>`.
pub fn parity<T: Real>(m: &MarginalDistribution<T>) -> T {
    m.probs()
        .iter()
        .enumerate()
        .map(|(n, &p)| if n % 2 == 0 { p } else { -p })
        .collect::<CompensatedSum<T>>()
        .value()
}

/// Distribution of the arm opposite to `herald_arm`, conditioned on `h`
/// photons in `herald_arm`, together with the probability of that outcome.
///
/// Photons of the heralded arm beyond the grid are unobserved; their
/// largest possible share, the joint truncated mass, is kept as the
/// conditional distribution's truncated mass.
pub fn herald<T: Real>(
    j: &JointDistribution<T>,
    herald_arm: Arm,
    h: usize,
) -> Result<(MarginalDistribution<T>, T)> {
    let empty = || Error::EmptyHerald {
        arm: herald_arm.name(),
        outcome: h,
    };
    if h >= j.dim(herald_arm) {
        return Err(empty());
    }
    let slice: Vec<T> = match herald_arm {
        Arm::Idler => (0..j.dim(Arm::Signal)).map(|m| j.get(m, h)).collect(),
        Arm::Signal => j.row(h).to_vec(),
    };
    let prob = slice.iter().copied().collect::<CompensatedSum<T>>().value();
    if !(prob > T::zero()) {
        return Err(empty());
    }
    let norm = prob + j.truncated_mass();
    let probs: Vec<T> = slice.iter().map(|&p| p / norm).collect();
    let tail = (T::one() - probs.iter().copied().collect::<CompensatedSum<T>>().value()).max(T::zero());
    Ok((MarginalDistribution::new(probs, tail)?, prob))
}

/// `g^(2)(0)` of the arm heralded by `h` photons in `herald_arm`.
pub fn heralded_g2<T: Real>(j: &JointDistribution<T>, herald_arm: Arm, h: usize) -> Result<T> {
    g2(&herald(j, herald_arm, h)?.0)
}

/// Parity of the arm heralded by `h` photons in `herald_arm`.
pub fn heralded_parity<T: Real>(j: &JointDistribution<T>, herald_arm: Arm, h: usize) -> Result<T> {
    Ok(parity(&herald(j, herald_arm, h)?.0))
}

/// `K = 1 / (g^(2) - 1)` of a marginal.
pub fn effective_mode_number<T: Real>(m: &MarginalDistribution<T>) -> Result<T> {
    let g = g2(m)?;
    if g <= T::one() {
        return Err(Error::UndefinedModeNumber { g2: g.to_f64_lossy() });
    }
    Ok(T::one() / (g - T::one()))
}

/// Matrix of normally ordered moments of `(n_a/2)^p (n_b/2)^q` products.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentMatrix<T> {
    pub order: usize,
    /// Exponent pairs `(p, q)` with `p + q <= order`, by total degree and
    /// then descending `p`.
    pub basis: Vec<(usize, usize)>,
    /// Row-major symmetric entries.
    pub entries: Vec<T>,
    pub min_eigenvalue: T,
}

impl<T: Real> MomentMatrix<T> {
    pub fn size(&self) -> usize {
        self.basis.len()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.entries[r * self.size() + c]
    }
}

/// Monomial basis `1, n_a, n_b, n_a^2, n_a n_b, n_b^2, ...` up to `order`.
pub fn moment_basis(order: usize) -> Vec<(usize, usize)> {
    (0..=order)
        .flat_map(|d| (0..=d).rev().map(move |p| (p, d - p)))
        .collect()
}

/// Builds the moment matrix with entries
/// `2^-(p_i+p_j+q_i+q_j) <a^dag^(p_i+p_j) a^(p_i+p_j) b^dag^(q_i+q_j) b^(q_i+q_j)>`
/// and its smallest eigenvalue; a negative eigenvalue witnesses
/// nonclassicality.
pub fn nonclassicality_matrix<T: Real>(j: &JointDistribution<T>, order: usize) -> Result<MomentMatrix<T>> {
    if order == 0 {
        return Err(Error::invalid("moment matrix order must be at least 1"));
    }
    let basis = moment_basis(order);
    let size = basis.len();
    let ln2 = T::LN_2();
    let top = 2 * order;
    let mut table = vec![T::zero(); (top + 1) * (top + 1)];
    for p in 0..=top {
        for q in 0..=top - p {
            table[p * (top + 1) + q] = if p + q == 0 {
                T::one()
            } else {
                shifted_joint_moment(j, p, q, T::from_usize_lossy(p + q) * ln2)?
            };
        }
    }
    let mut entries = vec![T::zero(); size * size];
    for (r, &(pr, qr)) in basis.iter().enumerate() {
        for (c, &(pc, qc)) in basis.iter().enumerate() {
            entries[r * size + c] = table[(pr + pc) * (top + 1) + (qr + qc)];
        }
    }
    let min_eigenvalue = min_eigenvalue(&entries, size)?;
    Ok(MomentMatrix {
        order,
        basis,
        entries,
        min_eigenvalue,
    })
}

/// Squeezing in dB for squeezing parameter `r`: the potential value
/// `-10 log10(e^(-2r))` and the value measurable at efficiency `eta`,
/// `-10 log10(eta e^(-2r) + 1 - eta)`.
pub fn squeezing_db<T: Real>(r: T, eta: T) -> Result<(T, T)> {
    if !(r >= T::zero()) || !r.is_finite() {
        return Err(Error::invalid(format!("squeezing parameter must be >= 0, got {r}")));
    }
    if !(eta >= T::zero() && eta <= T::one()) {
        return Err(Error::invalid(format!("efficiency {eta} outside [0, 1]")));
    }
    let ten = T::lit(10.0);
    let e = (-(r + r)).exp();
    let potential = -ten * e.log10();
    let measurable = -ten * (eta * e + T::one() - eta).log10();
    Ok((potential + T::zero(), measurable + T::zero()))
}
