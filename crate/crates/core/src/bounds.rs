//! Classification of the termination-time tail into its three regimes and
//! the matching evaluable bounds.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::distribution::{exact_distribution_bpa, DistTable, SampleStats};
use crate::graph::{dependence, is_bounded_case, p_min, restrict_to_reachable};
use crate::model::{Pda, SymbolId};
use crate::moments::{expectations, moment_matrix, Expectation};
use crate::termination::{termination_probs, TerminationError, DEFAULT_AS_EPS, DEFAULT_TOL};

/// Horizons at which `P(T ≥ n)·√n` is sampled to estimate the constant of
/// the `c/√n` lower bound.
pub const C_GRID: [usize; 4] = [16, 64, 256, 1024];

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("expected a stateless model")]
    NotStateless,
    #[error("symbol `{symbol}` terminates with probability {prob}, not almost surely")]
    NotAlmostSurelyTerminating { symbol: String, prob: f64 },
    #[error(transparent)]
    Termination(#[from] TerminationError),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

/// The three tail regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    /// Termination time bounded by `2^|Γ|`.
    Bounded,
    /// Finite expectation, exponentially decaying tail.
    Exponential,
    /// Infinite expectation, polynomially decaying tail.
    Polynomial,
}

impl Case {
    pub fn number(self) -> u8 {
        match self {
            Case::Bounded => 1,
            Case::Exponential => 2,
            Case::Polynomial => 3,
        }
    }
}

impl Serialize for Case {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentialConstants {
    pub e_start: f64,
    pub e_max: f64,
    pub b: f64,
    /// The sharp bound holds for `n ≥ 2·e_start`.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolynomialConstants {
    pub d1: f64,
    pub d2: f64,
    /// The lower bound decays like `n^{-lower_exponent}`.
    pub lower_exponent: f64,
    /// `min_n P(T ≥ n)·√n` over [`C_GRID`], an estimate rather than a bound.
    pub c_estimate: Option<f64>,
    /// The upper bound holds only beyond some unknown `n₀`.
    pub n0_unknown: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub start: String,
    pub case: Case,
    pub gamma_size: usize,
    pub p_min: f64,
    pub height: usize,
    pub spectral_radius: f64,
    pub e_start: Expectation,
    pub exponential: Option<ExponentialConstants>,
    pub polynomial: Option<PolynomialConstants>,
}

/// Classifies the tail of `T_X` for `X = start` in an almost surely
/// terminating stateless model. Only symbols reachable from `start` count.
pub fn classify(model: &Pda, start: SymbolId) -> Result<TailReport, BoundsError> {
    classify_with_grid(model, start, &C_GRID)
}

/// [`classify`] with a custom grid for the `c` estimate; an empty grid skips it.
pub fn classify_with_grid(model: &Pda, start: SymbolId, c_grid: &[usize]) -> Result<TailReport, BoundsError> {
    if !model.kind().is_stateless() {
        return Err(BoundsError::NotStateless);
    }
    let sub = restrict_to_reachable(model, start);
    let sub_start = sub.start().expect("restriction sets the start").1;
    let table = termination_probs(&sub, DEFAULT_TOL)?;
    for x in sub.symbol_ids() {
        let prob = table.symbol_prob(x);
        if prob < 1.0 - DEFAULT_AS_EPS {
            return Err(BoundsError::NotAlmostSurelyTerminating {
                symbol: sub.symbol_name(x).to_string(),
                prob,
            });
        }
    }

    let gamma = sub.num_symbols();
    let pmin = p_min(&sub);
    let height = dependence(&sub).height;
    let mm = moment_matrix(&sub);
    let exp = expectations(&sub, &mm);
    let e_start = exp.get(sub_start);
    let mut report = TailReport {
        start: model.symbol_name(start).to_string(),
        case: Case::Polynomial,
        gamma_size: gamma,
        p_min: pmin,
        height,
        spectral_radius: mm.spectral_radius,
        e_start,
        exponential: None,
        polynomial: None,
    };
    if is_bounded_case(&sub, sub_start) {
        report.case = Case::Bounded;
    } else if exp.finite {
        let e = e_start.as_f64();
        report.case = Case::Exponential;
        report.exponential = Some(ExponentialConstants {
            e_start: e,
            e_max: exp.e_max.as_f64(),
            b: exp.b_constant.expect("finite table has B"),
            threshold: 2.0 * e,
        });
    } else {
        let c_estimate = (!c_grid.is_empty()).then(|| estimate_c(&sub, sub_start, c_grid));
        report.polynomial = Some(PolynomialConstants {
            d1: 18.0 * height as f64 * gamma as f64 / pmin.powi(3 * gamma as i32),
            d2: 1.0 / (2f64.powi(height as i32 + 1) - 2.0),
            lower_exponent: 0.5,
            c_estimate,
            n0_unknown: true,
        });
    }
    Ok(report)
}

fn estimate_c(model: &Pda, start: SymbolId, grid: &[usize]) -> f64 {
    let n_max = *grid.iter().max().expect("nonempty grid");
    let dist = exact_distribution_bpa(model, &[start], n_max).expect("stateless model");
    grid.iter()
        .map(|&n| dist.tail(n).expect("within horizon") * (n as f64).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// `p_min^n`, a lower bound on `P(T ≥ n)` outside the bounded case.
pub fn lower_bound_pmin(report: &TailReport, n: u64) -> Option<f64> {
    (report.case != Case::Bounded).then(|| report.p_min.powf(n as f64))
}

/// `min(1, exp((2E - n) / (2B²)))`, and `1` below the threshold `n < 2E`.
pub fn upper_bound_azuma(report: &TailReport, n: u64) -> Option<f64> {
    let c = report.exponential.as_ref()?;
    let n = n as f64;
    if n < c.threshold {
        return Some(1.0);
    }
    Some(((c.threshold - n) / (2.0 * c.b * c.b)).exp().min(1.0))
}

/// `min(1, exp(1 - n / (8 E_max²)))`.
pub fn upper_bound_azuma_loose(report: &TailReport, n: u64) -> Option<f64> {
    let c = report.exponential.as_ref()?;
    Some((1.0 - n as f64 / (8.0 * c.e_max * c.e_max)).exp().min(1.0))
}

/// `min(1, d1 / n^{d2})`, valid only for `n ≥ n₀` with `n₀` unknown.
pub fn upper_bound_poly(report: &TailReport, n: u64) -> Option<f64> {
    let c = report.polynomial.as_ref()?;
    Some((c.d1 / (n as f64).powf(c.d2)).min(1.0))
}

/// `0` from `2^|Γ|` on, `1` before.
pub fn upper_bound_bounded(report: &TailReport, n: u64) -> Option<f64> {
    (report.case == Case::Bounded).then(|| {
        let limit = 2f64.powi(report.gamma_size as i32);
        if (n as f64) >= limit {
            0.0
        } else {
            1.0
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    LowerPmin,
    UpperAzuma,
    UpperAzumaLoose,
    UpperPoly,
    UpperBounded,
}

/// A tail bound `n ↦ value in [0, 1]`, nonincreasing in `n`.
#[derive(Debug, Clone)]
pub struct BoundCurve {
    pub kind: CurveKind,
    report: TailReport,
}

impl BoundCurve {
    pub fn eval(&self, n: u64) -> f64 {
        let r = &self.report;
        match self.kind {
            CurveKind::LowerPmin => lower_bound_pmin(r, n),
            CurveKind::UpperAzuma => upper_bound_azuma(r, n),
            CurveKind::UpperAzumaLoose => upper_bound_azuma_loose(r, n),
            CurveKind::UpperPoly => upper_bound_poly(r, n),
            CurveKind::UpperBounded => upper_bound_bounded(r, n),
        }
        .expect("curve kind matches the case")
    }
}

/// The curves that apply to `report`'s case; the first upper curve is the
/// sharpest.
pub fn curves(report: &TailReport) -> Vec<BoundCurve> {
    let kinds: &[CurveKind] = match report.case {
        Case::Bounded => &[CurveKind::UpperBounded],
        Case::Exponential => &[CurveKind::LowerPmin, CurveKind::UpperAzuma, CurveKind::UpperAzumaLoose],
        Case::Polynomial => &[CurveKind::LowerPmin, CurveKind::UpperPoly],
    };
    kinds
        .iter()
        .map(|&kind| BoundCurve {
            kind,
            report: report.clone(),
        })
        .collect()
}

/// CSV with columns `n,lower,upper,exact,empirical`. Cells without a value
/// are left empty; `upper` is the sharpest upper curve.
pub fn curves_csv(report: &TailReport, grid: &[u64], exact: Option<&DistTable>, empirical: Option<&SampleStats>) -> String {
    let cs = curves(report);
    let lower = cs.iter().find(|c| c.kind == CurveKind::LowerPmin);
    let upper = cs.iter().find(|c| c.kind != CurveKind::LowerPmin);
    let mut out = String::from("n,lower,upper,exact,empirical\n");
    let cell = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
    for &n in grid {
        let ex = exact.and_then(|d| d.tail(n as usize).ok());
        let em = empirical.map(|s| s.empirical_tail(n).value);
        writeln!(
            out,
            "{n},{},{},{},{}",
            cell(lower.map(|c| c.eval(n))),
            cell(upper.map(|c| c.eval(n))),
            cell(ex),
            cell(em)
        )
        .unwrap();
    }
    out
}

/// `g_X(θ) = Σ p·exp(-θ·(N_α·u - u(X)))` with its first two derivatives.
pub fn g_function(model: &Pda, u: &[f64], x: SymbolId, theta: f64) -> (f64, f64, f64) {
    let mut g = 0.0;
    let mut g1 = 0.0;
    let mut g2 = 0.0;
    for r in model.symbol_rules(x) {
        let delta = r.rhs.iter().map(|y| u[y.0]).sum::<f64>() - u[x.0];
        let e = r.prob.value() * (-theta * delta).exp();
        g += e;
        g1 -= delta * e;
        g2 += delta * delta * e;
    }
    (g, g1, g2)
}

/// A step count `n` with `P(T ≥ n) ≤ eps` according to the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Threshold {
    Steps {
        n: u64,
        /// The polynomial bound only holds beyond an unknown `n₀`.
        n0_caveat: bool,
    },
    /// The bound never drops below `eps` within `u64`.
    Unbounded,
}

fn ceil_with_slack(x: f64) -> Option<u64> {
    let n = (x - 1e-9 * x.abs().max(1.0)).ceil().max(0.0);
    (n.is_finite() && n < u64::MAX as f64).then_some(n as u64)
}

/// Least `n` at which the case's sharp upper bound is at most `eps`.
pub fn threshold_for_epsilon(report: &TailReport, eps: f64) -> Result<Threshold, BoundsError> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(BoundsError::BadEpsilon(eps));
    }
    let steps = |n: Option<u64>, n0_caveat: bool| match n {
        Some(n) => Threshold::Steps { n, n0_caveat },
        None => Threshold::Unbounded,
    };
    Ok(match report.case {
        Case::Bounded => steps(ceil_with_slack(2f64.powi(report.gamma_size as i32)), false),
        Case::Exponential => {
            let c = report.exponential.as_ref().expect("case 2 constants");
            let x = c.threshold + 2.0 * c.b * c.b * (1.0 / eps).ln().max(0.0);
            steps(ceil_with_slack(x), false)
        }
        Case::Polynomial => {
            let c = report.polynomial.as_ref().expect("case 3 constants");
            let x = if eps >= c.d1 { 1.0 } else { (c.d1 / eps).powf(1.0 / c.d2) };
            steps(ceil_with_slack(x).map(|n| n.max(1)), true)
        }
    })
}
