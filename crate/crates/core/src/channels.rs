//! Binomial loss channels and their constrained inversion.

use nalgebra::{DMatrix, DVector};

use crate::distributions::{JointDistribution, MarginalDistribution};
use crate::error::{Error, Result};
use crate::num::{ln_factorials, Real};

/// Largest input grid accepted by [`invert_loss`].
pub const MAX_INVERSION_DIM: usize = 15;
/// Smallest efficiency accepted by [`invert_loss`].
pub const MIN_INVERSION_ETA: f64 = 0.3;

/// Beam-splitter loss matrix `L[k][n] = C(n,k) eta^k (1-eta)^(n-k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMatrix<T> {
    eta: T,
    dim: usize,
    entries: Vec<T>,
}

impl<T: Real> LossMatrix<T> {
    pub fn eta(&self) -> T {
        self.eta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `L[k][n]`: probability that `k` of `n` photons survive.
    pub fn get(&self, k: usize, n: usize) -> T {
        self.entries[k * self.dim + n]
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    /// Surviving-photon distribution of the Fock state `|n>`.
    pub fn column(&self, n: usize) -> Vec<T> {
        (0..=n).map(|k| self.get(k, n)).collect()
    }

    /// Applies the channel to a single-arm distribution.
    pub fn apply(&self, m: &MarginalDistribution<T>) -> Result<MarginalDistribution<T>> {
        if m.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "loss matrix dim {} vs distribution dim {}",
                self.dim,
                m.dim()
            )));
        }
        let mut out = vec![T::zero(); self.dim];
        for (n, &p) in m.probs().iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            for (k, o) in out.iter_mut().enumerate().take(n + 1) {
                *o = *o + self.get(k, n) * p;
            }
        }
        MarginalDistribution::new(out, m.truncated_mass())
    }
}

fn check_eta<T: Real>(eta: T) -> Result<()> {
    if !(eta >= T::zero() && eta <= T::one()) {
        return Err(Error::invalid(format!("efficiency {eta} outside [0, 1]")));
    }
    Ok(())
}

/// Builds the `dim x dim` loss matrix for transmission `eta`.
pub fn loss_matrix<T: Real>(eta: T, dim: usize) -> Result<LossMatrix<T>> {
    check_eta(eta)?;
    if dim == 0 {
        return Err(Error::invalid("dim must be at least 1"));
    }
    let mut entries = vec![T::zero(); dim * dim];
    if eta == T::one() || eta == T::zero() {
        for n in 0..dim {
            let k = if eta == T::one() { n } else { 0 };
            entries[k * dim + n] = T::one();
        }
    } else {
        let lf = ln_factorials::<T>(dim);
        let (le, lr) = (eta.ln(), (T::one() - eta).ln());
        for n in 0..dim {
            for k in 0..=n {
                let ln = lf[n] - lf[k] - lf[n - k]
                    + T::from_usize_lossy(k) * le
                    + T::from_usize_lossy(n - k) * lr;
                entries[k * dim + n] = ln.exp();
            }
        }
    }
    Ok(LossMatrix { eta, dim, entries })
}

/// Passes both arms through independent loss:
/// `p_out(k, l) = sum_{m,n} L_s[k][m] L_i[l][n] p_in(m, n)`.
pub fn apply_loss<T: Real>(
    j: &JointDistribution<T>,
    eta_s: T,
    eta_i: T,
) -> Result<JointDistribution<T>> {
    let (ds, di) = j.dims();
    let ls = loss_matrix(eta_s, ds)?;
    let li = loss_matrix(eta_i, di)?;

    // tmp = P L_i^T, exploiting that column n of L_i is supported on 0..=n.
    let mut tmp = vec![T::zero(); ds * di];
    for m in 0..ds {
        let row = &mut tmp[m * di..(m + 1) * di];
        for (n, &p) in j.row(m).iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            for (l, t) in row.iter_mut().enumerate().take(n + 1) {
                *t = *t + p * li.get(l, n);
            }
        }
    }
    let mut out = vec![T::zero(); ds * di];
    for k in 0..ds {
        for m in k..ds {
            let w = ls.get(k, m);
            if w == T::zero() {
                continue;
            }
            let (src, dst) = (&tmp[m * di..(m + 1) * di], &mut out[k * di..(k + 1) * di]);
            for (o, &t) in dst.iter_mut().zip(src) {
                *o = *o + w * t;
            }
        }
    }
    for p in out.iter_mut() {
        *p = p.max(T::zero());
    }
    JointDistribution::new(ds, di, out, j.truncated_mass())
}

/// Outcome of [`invert_loss`].
#[derive(Clone, Debug)]
pub struct Inversion {
    /// Estimated pre-loss distribution on `dim_in x dim_in`.
    pub state: JointDistribution<f64>,
    /// Weighted sum of squared residuals over every observed bin.
    pub residual: f64,
    /// Active-set iterations used.
    pub iterations: usize,
}

/// Weights `sigma = 1/N + sqrt(p/N)` of the weighted least-squares
/// objective shared by the loss inversion and the model fit.
pub fn sigma_weights(probs: &[f64], n_events: u64) -> Vec<f64> {
    let n = n_events as f64;
    probs.iter().map(|&p| 1.0 / n + (p / n).sqrt()).collect()
}

/// Estimates the pre-loss distribution of measured data on a
/// `dim_in x dim_in` grid by non-negative weighted least squares with a
/// unit-mass constraint.
pub fn invert_loss(
    j: &JointDistribution<f64>,
    eta_s: f64,
    eta_i: f64,
    dim_in: usize,
) -> Result<Inversion> {
    check_eta(eta_s)?;
    check_eta(eta_i)?;
    let n_events = j
        .n_events()
        .ok_or_else(|| Error::InvalidData("loss inversion needs an event count".into()))?;
    if eta_s <= MIN_INVERSION_ETA || eta_i <= MIN_INVERSION_ETA {
        return Err(Error::IllConditioned(format!(
            "efficiencies ({eta_s}, {eta_i}) must exceed {MIN_INVERSION_ETA}"
        )));
    }
    if dim_in > MAX_INVERSION_DIM {
        return Err(Error::IllConditioned(format!(
            "dim_in {dim_in} exceeds {MAX_INVERSION_DIM}"
        )));
    }
    let (ds, di) = j.dims();
    if dim_in == 0 || dim_in > ds || dim_in > di {
        return Err(Error::invalid(format!(
            "dim_in {dim_in} infeasible for a {ds}x{di} histogram"
        )));
    }

    let sigma = sigma_weights(j.probs(), n_events);
    let ls = loss_matrix(eta_s, dim_in)?;
    let li = loss_matrix(eta_i, dim_in)?;
    let nv = dim_in * dim_in;

    // Bins outside the window are unreachable from the model and only add a
    // constant to the objective.
    let mut constant = 0.0;
    for k in 0..ds {
        for l in 0..di {
            if k >= dim_in || l >= dim_in {
                let r = j.get(k, l) / sigma[k * di + l];
                constant += r * r;
            }
        }
    }

    // Rows are divided by the largest weight; the unit-mass row gets that
    // largest weight.
    let max_weight = sigma.iter().fold(0.0_f64, |a, &s| a.max(1.0 / s));
    let mass_weight = 1.0;
    let mut a = DMatrix::<f64>::zeros(nv + 1, nv);
    let mut b = DVector::<f64>::zeros(nv + 1);
    for c in 0..nv {
        a[(0, c)] = mass_weight;
    }
    b[0] = mass_weight;
    for k in 0..dim_in {
        for l in 0..dim_in {
            let row = 1 + k * dim_in + l;
            let w = 1.0 / (sigma[k * di + l] * max_weight);
            b[row] = w * j.get(k, l);
            for m in k..dim_in {
                for n in l..dim_in {
                    a[(row, m * dim_in + n)] = w * ls.get(k, m) * li.get(l, n);
                }
            }
        }
    }

    let (x, iterations) = nnls(&a, &b)?;
    let total: f64 = x.iter().sum();
    if !(total > 0.0) {
        return Err(Error::IllConditioned("inversion collapsed to zero".into()));
    }
    let probs: Vec<f64> = x.iter().map(|v| v / total).collect();

    let xv = DVector::from_column_slice(&probs);
    let fitted = &a * xv;
    let residual = constant
        + max_weight.powi(2)
            * (1..=nv)
                .map(|r| (fitted[r] - b[r]).powi(2))
                .sum::<f64>();
    let state = JointDistribution::new(dim_in, dim_in, probs, 0.0)?;
    Ok(Inversion {
        state,
        residual,
        iterations,
    })
}

const NNLS_ANGLE_TOL: f64 = 1e-12;

/// Lawson-Hanson active-set solver for `min |Ax - b|` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::DimensionMismatch(format!("{m} rows vs rhs of {}", b.len())));
    }
    let col_norms: Vec<f64> = (0..n).map(|c| a.column(c).norm()).collect();
    let max_iter = 3 * n.max(1) + 50;

    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;
    let mut w = a.transpose() * b;
    let mut rejected = vec![false; n];

    let b_norm = b.norm();
    let mut r_norm = b_norm;

    loop {
        if r_norm <= f64::EPSILON * b_norm {
            break;
        }
        // A column enters only if it is not numerically orthogonal to the
        // residual; the test is invariant under row and column scaling.
        let candidate = (0..n)
            .filter(|&i| !passive[i] && !rejected[i] && w[i] > NNLS_ANGLE_TOL * col_norms[i] * r_norm)
            .max_by(|&i, &k| w[i].total_cmp(&w[k]));
        let Some(enter) = candidate else { break };
        passive[enter] = true;

        let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let s = solve_subset(a, b, &idx)?;
        let pos = idx.iter().position(|&i| i == enter).expect("entering index is passive");
        if s[pos] <= 0.0 {
            passive[enter] = false;
            rejected[enter] = true;
            continue;
        }
        rejected.iter_mut().for_each(|r| *r = false);

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::IllConditioned(
                    "non-negative least squares did not converge".into(),
                ));
            }
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let s = solve_subset(a, b, &idx)?;
            if s.iter().all(|&v| v > 0.0) {
                for (&i, &v) in idx.iter().zip(s.iter()) {
                    x[i] = v;
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (&i, &v) in idx.iter().zip(s.iter()) {
                if v <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - v));
                }
            }
            for (&i, &v) in idx.iter().zip(s.iter()) {
                x[i] += alpha * (v - x[i]);
            }
            let floor = 8.0 * f64::EPSILON * x.amax();
            for &i in &idx {
                if x[i] <= floor {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if idx.iter().all(|&i| !passive[i]) {
                break;
            }
        }
        let r = residual(a, b, &x);
        r_norm = r.norm();
        w = a.transpose() * r;
    }
    Ok((x, iterations))
}

/// `b - Ax` accumulated in double-double arithmetic, so small residuals of
/// nearly consistent systems keep their leading digits.
fn residual(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |row, _| {
        let (mut hi, mut lo) = (b[row], 0.0);
        for (col, &xc) in x.iter().enumerate() {
            let p = -a[(row, col)] * xc;
            let p_err = (-a[(row, col)]).mul_add(xc, -p);
            let s = hi + p;
            let bv = s - hi;
            let s_err = (hi - (s - bv)) + (p - bv);
            hi = s;
            lo += s_err + p_err;
        }
        hi + lo
    })
}

fn solve_subset(a: &DMatrix<f64>, b: &DVector<f64>, idx: &[usize]) -> Result<DVector<f64>> {
    let sub = a.select_columns(idx);
    let qr = sub.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let solve = |rhs: &DVector<f64>| {
        r.solve_upper_triangular(&(q.transpose() * rhs))
            .ok_or_else(|| Error::IllConditioned("rank-deficient active set".into()))
    };
    let mut s = solve(b)?;
    for _ in 0..2 {
        s += solve(&residual(&sub, b, &s))?;
    }
    Ok(s)
}
