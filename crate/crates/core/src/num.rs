//! Scalar abstraction shared by the analytic modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the distribution, channel and
/// statistics code. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for the implemented types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance for normalization checks: about 1e-12 at f64 precision.
    #[inline]
    fn norm_tol() -> Self {
        Self::epsilon() * Self::lit(4500.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Neumaier compensated summation.
#[derive(Clone, Copy, Debug)]
pub struct CompensatedSum<T> {
    sum: T,
    compensation: T,
}

impl<T: Real> Default for CompensatedSum<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            compensation: T::zero(),
        }
    }

    #[inline]
    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation = self.compensation + ((self.sum - t) + x);
        } else {
            self.compensation = self.compensation + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> T {
        self.sum + self.compensation
    }
}

impl<T: Real> FromIterator<T> for CompensatedSum<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Compensated sum of a slice.
pub fn kahan_sum<T: Real>(xs: &[T]) -> T {
    xs.iter().copied().collect::<CompensatedSum<T>>().value()
}

/// `ln k!` for `k = 0..n`.
pub fn ln_factorials<T: Real>(n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    let mut acc = CompensatedSum::new();
    for k in 0..n {
        if k > 1 {
            acc.add(T::from_usize_lossy(k).ln());
        }
        out.push(acc.value());
    }
    out
}

/// `ln(k!/(k-order)!)`, or `None` when `k < order`.
#[inline]
pub fn ln_falling<T: Real>(ln_fact: &[T], k: usize, order: usize) -> Option<T> {
    (k >= order).then(|| ln_fact[k] - ln_fact[k - order])
}
