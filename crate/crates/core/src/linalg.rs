//! Symmetric eigenvalues by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::num::Real;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues of the symmetric `n x n` row-major matrix `a`, ascending.
///
/// Sweeps until the off-diagonal Frobenius norm drops below `1e-14` times
/// the Frobenius norm of the whole matrix.
pub fn symmetric_eigenvalues<T: Real>(a: &[T], n: usize) -> Result<Vec<T>> {
    if a.len() != n * n {
        return Err(Error::DimensionMismatch(format!(
            "{} entries for a {n}x{n} matrix",
            a.len()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("matrix has non-finite entries".into()));
    }
    let mut m = a.to_vec();
    for i in 0..n {
        for j in 0..i {
            let diff = (m[i * n + j] - m[j * n + i]).abs();
            let scale = m[i * n + j].abs().max(m[j * n + i].abs()).max(T::min_positive_value());
            if diff > T::lit(1e-12) * scale {
                return Err(Error::invalid("matrix is not symmetric"));
            }
            m[j * n + i] = m[i * n + j];
        }
    }
    let total = m.iter().map(|&v| v * v).sum::<T>().sqrt();
    let threshold = T::lit(1e-14) * total;
    for _ in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(&m, n);
        if off <= threshold {
            let mut ev: Vec<T> = (0..n).map(|i| m[i * n + i]).collect();
            ev.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
            return Ok(ev);
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut m, n, p, q);
            }
        }
    }
    Err(Error::IllConditioned("Jacobi iteration did not converge".into()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<T: Real>(a: &[T], n: usize) -> Result<T> {
    let ev = symmetric_eigenvalues(a, n)?;
    ev.first()
        .copied()
        .ok_or_else(|| Error::invalid("empty matrix"))
}

fn off_diagonal_norm<T: Real>(m: &[T], n: usize) -> T {
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s = s + m[i * n + j] * m[i * n + j];
            }
        }
    }
    s.sqrt()
}

fn rotate<T: Real>(m: &mut [T], n: usize, p: usize, q: usize) {
    let apq = m[p * n + q];
    if apq == T::zero() {
        return;
    }
    let (app, aqq) = (m[p * n + p], m[q * n + q]);
    let theta = (aqq - app) / (T::lit(2.0) * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;
    for k in 0..n {
        let (akp, akq) = (m[k * n + p], m[k * n + q]);
        m[k * n + p] = c * akp - s * akq;
        m[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (m[p * n + k], m[q * n + k]);
        m[p * n + k] = c * apk - s * aqk;
        m[q * n + k] = s * apk + c * aqk;
    }
    m[p * n + q] = T::zero();
    m[q * n + p] = T::zero();
}
