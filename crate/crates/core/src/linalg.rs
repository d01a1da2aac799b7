//! Small dense numerics shared by the solvers.

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use num_traits::ToPrimitive;

/// Solves `a x = b` by LU with partial pivoting. `None` if some pivot is at
/// most `rel_tol` times the largest entry, or the solution is not finite.
pub(crate) fn solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> Option<DVector<f64>> {
    if a.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let scale = a.amax().max(1.0);
    if (0..u.nrows()).any(|i| u[(i, i)].abs() <= rel_tol * scale) {
        return None;
    }
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Unevaluated sum `hi + lo` of two doubles (double-double arithmetic).
///
/// Used where a residual such as `f(x) - x` cancels almost completely, e.g.
/// near a critical fixed point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    /// Nearest double-double to an exact rational.
    pub fn from_ratio(r: &BigRational) -> Self {
        let hi = r.to_f64().unwrap_or(f64::NAN);
        let lo = BigRational::from_float(hi)
            .and_then(|h| (r - h).to_f64())
            .unwrap_or(0.0);
        Self { hi, lo }
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        let err = (a - (s - bb)) + (b - bb);
        Self { hi: s, lo: err }
    }

    fn quick_two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        Self { hi: s, lo: b - (s - a) }
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = Self::two_sum(self.hi, o.hi);
        let t = Self::two_sum(self.lo, o.lo);
        let s = Self::quick_two_sum(s.hi, s.lo + t.hi);
        Self::quick_two_sum(s.hi, s.lo + t.lo)
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let err = self.hi.mul_add(o.hi, -p);
        let err = err + (self.hi * o.lo + self.lo * o.hi);
        Self::quick_two_sum(p, err)
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Perron {
    pub radius: f64,
    /// Positive, normalized to max component 1.
    pub vector: DVector<f64>,
}

/// Dominant eigenpair of an irreducible nonnegative matrix.
///
/// Iterates on `a + I`, which is primitive whenever `a` is irreducible, so
/// periodic blocks converge too. The Collatz-Wielandt quotients
/// `min (Bx)_i / x_i <= rho(B) <= max (Bx)_i / x_i` bracket the radius and
/// give the stopping rule.
pub(crate) fn perron(a: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<Perron, Perron> {
    let n = a.nrows();
    let shifted = a + DMatrix::<f64>::identity(n, n);
    let mut x = DVector::from_element(n, 1.0);
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    for _ in 0..max_iter {
        let y = &shifted * &x;
        lo = f64::INFINITY;
        hi = 0.0;
        for i in 0..n {
            let q = y[i] / x[i];
            lo = f64::min(lo, q);
            hi = f64::max(hi, q);
        }
        let top = y.max();
        x = y / top;
        if hi - lo <= tol * hi {
            return Ok(Perron {
                radius: 0.5 * (lo + hi) - 1.0,
                vector: x,
            });
        }
    }
    Err(Perron {
        radius: 0.5 * (lo + hi) - 1.0,
        vector: x,
    })
}
