//! The moment matrix `A(X, Y) = Σ p·#Y(α)`, its spectral radius, and expected
//! termination times of stateless models.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::graph::{dependence, DependenceInfo};
use crate::linalg;
use crate::model::{Pda, SymbolId, Target, Triple};
use crate::termination::TerminationTable;
use crate::transform::{terminating_part, to_bpa, TransformError};

pub const RADIUS_TOL: f64 = 1e-12;
pub const RADIUS_MAX_ITER: usize = 100_000;
/// Blocks with spectral radius at or above `1 - CRITICAL_SLACK` are critical.
pub const CRITICAL_SLACK: f64 = 1e-9;
/// Relative pivot size below which `I - A` counts as singular.
const SINGULAR_TOL: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct MomentMatrix {
    pub a: DMatrix<f64>,
    /// Largest block radius.
    pub spectral_radius: f64,
    /// Radius of each SCC, indexed like `deps.sccs`.
    pub block_radius: Vec<f64>,
    /// Dominant eigenvector of each SCC block, each block scaled to max 1.
    pub dominant_vector: Vec<f64>,
    /// False if power iteration hit its cap on some block.
    pub converged: bool,
    pub deps: DependenceInfo,
}

impl MomentMatrix {
    pub fn is_critical_block(&self, scc: usize) -> bool {
        self.block_radius[scc] >= 1.0 - CRITICAL_SLACK
    }

    /// `A` with entries between different SCCs set to zero.
    pub fn block_diagonal(&self) -> DMatrix<f64> {
        let mut b = self.a.clone();
        let of = &self.deps.scc_of;
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                if of[i] != of[j] {
                    b[(i, j)] = 0.0;
                }
            }
        }
        b
    }
}

/// Assembles `A` from the rules of a stateless model.
pub fn moment_matrix(model: &Pda) -> MomentMatrix {
    let n = model.num_symbols();
    let mut a = DMatrix::zeros(n, n);
    for r in model.rules() {
        for y in &r.rhs {
            a[(r.lhs_symbol.0, y.0)] += r.prob.value();
        }
    }
    let deps = dependence(model);
    let mut block_radius = Vec::with_capacity(deps.sccs.len());
    let mut dominant_vector = vec![1.0; n];
    let mut converged = true;
    for comp in &deps.sccs {
        if comp.len() == 1 {
            block_radius.push(a[(comp[0].0, comp[0].0)]);
            continue;
        }
        let sub = DMatrix::from_fn(comp.len(), comp.len(), |i, j| a[(comp[i].0, comp[j].0)]);
        let p = linalg::perron(&sub, RADIUS_TOL, RADIUS_MAX_ITER).unwrap_or_else(|p| {
            converged = false;
            p
        });
        block_radius.push(p.radius.max(0.0));
        for (i, x) in comp.iter().enumerate() {
            dominant_vector[x.0] = p.vector[i];
        }
    }
    let spectral_radius = block_radius.iter().copied().fold(0.0, f64::max);
    MomentMatrix {
        a,
        spectral_radius,
        block_radius,
        dominant_vector,
        converged,
        deps,
    }
}

/// An expected termination time, possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expectation {
    Finite(f64),
    Infinite,
}

impl Expectation {
    pub fn finite(self) -> Option<f64> {
        match self {
            Expectation::Finite(v) => Some(v),
            Expectation::Infinite => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Expectation::Finite(_))
    }

    /// `f64::INFINITY` for the infinite marker.
    pub fn as_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }

    fn max(self, other: Expectation) -> Expectation {
        match (self, other) {
            (Expectation::Finite(a), Expectation::Finite(b)) => Expectation::Finite(a.max(b)),
            _ => Expectation::Infinite,
        }
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Finite(v) => write!(f, "{v}"),
            Expectation::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Expectation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Expectation::Finite(v) => s.serialize_f64(*v),
            Expectation::Infinite => s.serialize_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpectationTable {
    pub values: Vec<Expectation>,
    pub e_max: Expectation,
    /// `max |1 - E[X] + Σ #Y(α)·E[Y]|` over all rules; only when every value is finite.
    pub b_constant: Option<f64>,
    pub finite: bool,
    /// Max residual of `E = 1 + A·E` over the finite part.
    pub residual: f64,
    /// Set when the radius test and the linear solve disagree.
    pub diagnostic: Option<String>,
}

impl ExpectationTable {
    pub fn get(&self, x: SymbolId) -> Expectation {
        self.values[x.0]
    }
}

/// Expected termination times `E[X]` of an almost surely terminating
/// stateless model.
///
/// Symbols in or above a critical block get the infinite marker; the rest
/// solve `(I - A) E = 1`.
pub fn expectations(model: &Pda, mm: &MomentMatrix) -> ExpectationTable {
    let n = model.num_symbols();
    let deps = &mm.deps;
    let infinite: Vec<bool> = (0..n)
        .map(|x| {
            mm.is_critical_block(deps.scc_of[x])
                || deps.reachable_from[x]
                    .iter()
                    .any(|y| mm.is_critical_block(deps.scc_of[y.0]))
        })
        .collect();
    let finite_ids: Vec<usize> = (0..n).filter(|&x| !infinite[x]).collect();
    let mut values = vec![Expectation::Infinite; n];
    let mut diagnostic = None;
    let mut residual = 0.0;

    if !finite_ids.is_empty() {
        let m = finite_ids.len();
        let sub = DMatrix::from_fn(m, m, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            delta - mm.a[(finite_ids[i], finite_ids[j])]
        });
        let ones = DVector::from_element(m, 1.0);
        match linalg::solve(&sub, &ones, SINGULAR_TOL) {
            Some(e) if e.iter().all(|v| *v >= 1.0 - 1e-9) => {
                for (i, &x) in finite_ids.iter().enumerate() {
                    values[x] = Expectation::Finite(e[i]);
                }
                residual = (&sub * &e - &ones).amax();
            }
            Some(_) => {
                diagnostic = Some("linear solve produced expectations below one; reported as infinite".into());
            }
            None => {
                diagnostic = Some("moment system is singular although no block is critical; reported as infinite".into());
            }
        }
    }

    let finite = values.iter().all(|v| v.is_finite());
    let e_max = values
        .iter()
        .copied()
        .reduce(Expectation::max)
        .unwrap_or(Expectation::Finite(0.0));
    let b_constant = finite.then(|| {
        model
            .rules()
            .iter()
            .map(|r| {
                let e = |x: SymbolId| values[x.0].as_f64();
                let pushed: f64 = r.rhs.iter().map(|y| e(*y)).sum();
                (1.0 - e(r.lhs_symbol) + pushed).abs()
            })
            .fold(0.0, f64::max)
    });
    ExpectationTable {
        values,
        e_max,
        b_constant,
        finite,
        residual,
        diagnostic,
    }
}

/// `E[T_pX | Run(pXq)]` for every triple with `[pXq] > 0`, computed on the
/// terminating part of the transformed model.
pub fn conditional_expectations(
    model: &Pda,
    table: &TerminationTable,
) -> Result<BTreeMap<Triple, Expectation>, TransformError> {
    let result = to_bpa(model, table)?;
    let bpa = terminating_part(&result);
    let mm = moment_matrix(&bpa);
    let exp = expectations(&bpa, &mm);
    Ok(result
        .symbols
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s.triple.target, Target::State(_)))
        .map(|(i, s)| (s.triple, exp.values[i]))
        .collect())
}
