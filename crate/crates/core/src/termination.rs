//! Termination probabilities `[pXq]` as the least fixed point of the
//! first-step equation system, solved by Newton's method from zero.
//!
//! Triples that are structurally unreachable are pinned to zero before the
//! numeric phase; on the remaining variables Newton iterates increase
//! monotonically to the least solution.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, Dd};
use crate::model::{pop_relation, Pda, StateId, SymbolId, Target, Triple};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 10_000;
pub const DEFAULT_AS_EPS: f64 = 1e-9;
/// Extra iterations allowed after the step size first drops below `tol`.
pub const POLISH_ITERATIONS: usize = 200;

/// Slack allowed when checking that Newton iterates never decrease.
const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct TerminationTable {
    num_states: usize,
    num_symbols: usize,
    values: Vec<f64>,
    /// Max absolute residual of the equation system at the returned values.
    pub residual: f64,
    pub iterations: usize,
    pub qualitative_zero: BTreeSet<Triple>,
    /// False if some Newton iterate decreased by more than round-off.
    pub monotone: bool,
}

impl TerminationTable {
    fn index(&self, p: StateId, x: SymbolId, q: StateId) -> usize {
        (p.0 * self.num_symbols + x.0) * self.num_states + q.0
    }

    /// `[pXq]`.
    pub fn prob(&self, p: StateId, x: SymbolId, q: StateId) -> f64 {
        self.values[self.index(p, x, q)]
    }

    /// `[pX↑] = 1 - Σ_q [pXq]`, clamped to `[0, 1]`.
    pub fn diverge(&self, p: StateId, x: SymbolId) -> f64 {
        let total: f64 = (0..self.num_states).map(|q| self.prob(p, x, StateId(q))).sum();
        (1.0 - total).clamp(0.0, 1.0)
    }

    pub fn get(&self, t: &Triple) -> f64 {
        match t.target {
            Target::State(q) => self.prob(t.p, t.x, q),
            Target::Diverge => self.diverge(t.p, t.x),
        }
    }

    /// `[X]` of a stateless model.
    pub fn symbol_prob(&self, x: SymbolId) -> f64 {
        self.prob(StateId(0), x, StateId(0))
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    /// All triples, terminating ones first, each with its probability.
    pub fn iter(&self) -> impl Iterator<Item = (Triple, f64)> + '_ {
        let heads = move || {
            (0..self.num_states).flat_map(move |p| (0..self.num_symbols).map(move |x| (StateId(p), SymbolId(x))))
        };
        let term = heads().flat_map(move |(p, x)| {
            (0..self.num_states).map(move |q| {
                let t = Triple::terminating(p, x, StateId(q));
                (t, self.get(&t))
            })
        });
        let div = heads().map(move |(p, x)| {
            let t = Triple::diverging(p, x);
            (t, self.get(&t))
        });
        term.chain(div)
    }
}

#[derive(Debug, Error)]
pub enum TerminationError {
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("Newton iteration did not converge after {} iterations (residual {:.3e})", .table.iterations, .table.residual)]
    NotConverged { table: Box<TerminationTable> },
}

/// Triples `pXq` with `[pXq] = 0`, found by boolean fixed-point iteration of
/// the same equation system.
pub fn qualitative_zero(model: &Pda) -> BTreeSet<Triple> {
    let pop = pop_relation(model);
    let mut zero = BTreeSet::new();
    for p in model.state_ids() {
        for x in model.symbol_ids() {
            for q in model.state_ids() {
                if !pop[p.0][x.0][q.0] {
                    zero.insert(Triple::terminating(p, x, q));
                }
            }
        }
    }
    zero
}

struct System<'a> {
    model: &'a Pda,
    nq: usize,
    ng: usize,
    /// Variable index of each `(p, X, q)` slot, `None` when pinned to zero.
    var_of: Vec<Option<usize>>,
    slots: Vec<(StateId, SymbolId, StateId)>,
    /// Rule probabilities per head, rounded to double-double from the exact value.
    probs: Vec<Vec<Dd>>,
}

impl<'a> System<'a> {
    fn new(model: &'a Pda, zero: &BTreeSet<Triple>) -> Self {
        let nq = model.num_states();
        let ng = model.num_symbols();
        let mut var_of = vec![None; nq * ng * nq];
        let mut slots = Vec::new();
        for p in model.state_ids() {
            for x in model.symbol_ids() {
                for q in model.state_ids() {
                    if !zero.contains(&Triple::terminating(p, x, q)) {
                        var_of[(p.0 * ng + x.0) * nq + q.0] = Some(slots.len());
                        slots.push((p, x, q));
                    }
                }
            }
        }
        let probs = model
            .state_ids()
            .flat_map(|p| model.symbol_ids().map(move |x| (p, x)))
            .map(|(p, x)| model.rules_for(p, x).map(|r| Dd::from_ratio(r.prob.exact())).collect())
            .collect();
        Self {
            model,
            nq,
            ng,
            var_of,
            slots,
            probs,
        }
    }

    fn slot(&self, p: usize, y: usize, q: usize) -> usize {
        (p * self.ng + y) * self.nq + q
    }

    fn value(&self, v: &DVector<f64>, s: usize, y: SymbolId, q: usize) -> f64 {
        self.var_of[self.slot(s, y.0, q)].map_or(0.0, |i| v[i])
    }

    /// Jacobian of the right-hand side `f` at `v`.
    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.slots.len();
        let nq = self.nq;
        let mut jac = DMatrix::zeros(n, n);
        for (i, &(p, x, q)) in self.slots.iter().enumerate() {
            for rule in self.model.rules_for(p, x) {
                let prob = rule.prob.value();
                let word = &rule.rhs;
                let k = word.len();
                // prefix[j][s]: weight of reaching state s after popping word[..j]
                let mut prefix = vec![vec![0.0; nq]; k + 1];
                prefix[0][rule.rhs_state.0] = 1.0;
                for j in 0..k {
                    for s in 0..nq {
                        let w = prefix[j][s];
                        if w != 0.0 {
                            for t in 0..nq {
                                prefix[j + 1][t] += w * self.value(v, s, word[j], t);
                            }
                        }
                    }
                }
                // suffix[j][t]: weight of ending in q after popping word[j..] from t
                let mut suffix = vec![vec![0.0; nq]; k + 1];
                suffix[k][q.0] = 1.0;
                for j in (0..k).rev() {
                    for s in 0..nq {
                        let mut acc = 0.0;
                        for t in 0..nq {
                            acc += self.value(v, s, word[j], t) * suffix[j + 1][t];
                        }
                        suffix[j][s] = acc;
                    }
                }
                for j in 0..k {
                    for s in 0..nq {
                        if prefix[j][s] == 0.0 {
                            continue;
                        }
                        for t in 0..nq {
                            if let Some(col) = self.var_of[self.slot(s, word[j].0, t)] {
                                jac[(i, col)] += prob * prefix[j][s] * suffix[j + 1][t];
                            }
                        }
                    }
                }
            }
        }
        jac
    }

    /// `f(v) - v`, accumulated in double-double so that the tiny residuals
    /// near a critical fixed point are not lost to cancellation.
    fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        let nq = self.nq;
        let mut r = DVector::zeros(self.slots.len());
        for (i, &(p, x, q)) in self.slots.iter().enumerate() {
            let mut acc = Dd::new(-v[i]);
            let probs = &self.probs[p.0 * self.ng + x.0];
            for (rule, &prob) in self.model.rules_for(p, x).zip(probs) {
                let mut cur = vec![Dd::default(); nq];
                cur[rule.rhs_state.0] = Dd::new(1.0);
                for &y in &rule.rhs {
                    let mut next = vec![Dd::default(); nq];
                    for s in 0..nq {
                        if cur[s].hi == 0.0 {
                            continue;
                        }
                        for (t, slot) in next.iter_mut().enumerate() {
                            let val = self.value(v, s, y, t);
                            if val != 0.0 {
                                *slot = slot.add(cur[s].mul(Dd::new(val)));
                            }
                        }
                    }
                    cur = next;
                }
                acc = acc.add(prob.mul(cur[q.0]));
            }
            r[i] = acc.to_f64();
        }
        r
    }

    fn table(&self, v: &DVector<f64>, residual: f64, iterations: usize, zero: BTreeSet<Triple>, monotone: bool) -> TerminationTable {
        let mut values = vec![0.0; self.nq * self.ng * self.nq];
        for (i, &(p, x, q)) in self.slots.iter().enumerate() {
            values[self.slot(p.0, x.0, q.0)] = v[i];
        }
        TerminationTable {
            num_states: self.nq,
            num_symbols: self.ng,
            values,
            residual,
            iterations,
            qualitative_zero: zero,
            monotone,
        }
    }
}

/// Least nonnegative solution of the termination equations, to within `tol`.
///
/// Once the Newton step drops below `tol` the iteration keeps going for up to
/// [`POLISH_ITERATIONS`] more steps or until it stops moving. Critical
/// symbols converge only linearly, and a symbol that sits on top of a critical
/// one inherits roughly the square root of its error, so the extra steps are
/// what lets nested critical values reach 1 in floating point.
pub fn termination_probs(model: &Pda, tol: f64) -> Result<TerminationTable, TerminationError> {
    if !(tol > 0.0) {
        return Err(TerminationError::BadTolerance(tol));
    }
    let zero = qualitative_zero(model);
    let sys = System::new(model, &zero);
    let n = sys.slots.len();
    let mut v = DVector::zeros(n);
    let mut monotone = true;
    if n == 0 {
        return Ok(sys.table(&v, 0.0, 0, zero, monotone));
    }

    let mut converged_at = None;
    let mut it = 0;
    while it < MAX_ITERATIONS {
        it += 1;
        let next = newton_step(&sys, &v);
        if next.iter().zip(v.iter()).any(|(a, b)| *a < *b - MONOTONE_SLACK) {
            monotone = false;
        }
        let moved = (&next - &v).amax();
        v = next;
        if converged_at.is_none() && moved <= tol {
            converged_at = Some(it);
        }
        if let Some(c) = converged_at {
            if moved == 0.0 || it - c >= POLISH_ITERATIONS {
                break;
            }
        }
    }
    let residual = sys.residual(&v).amax();
    let table = sys.table(&v, residual, it, zero, monotone);
    if converged_at.is_some() {
        Ok(table)
    } else {
        Err(TerminationError::NotConverged { table: Box::new(table) })
    }
}

/// One Newton step `v + (I - J)^{-1} (f(v) - v)`, clamped to `[0, 1]`.
///
/// Variables already at 1 stay there: 1 bounds the least solution, and
/// keeping them out of the linear system avoids the singular row a critical
/// symbol produces once it is reached. If the remaining system is singular
/// the step falls back to a Kleene step `f(v)`.
fn newton_step(sys: &System<'_>, v: &DVector<f64>) -> DVector<f64> {
    let active: Vec<usize> = (0..v.len()).filter(|&i| v[i] < 1.0).collect();
    let r = sys.residual(v);
    let jac = sys.jacobian(v);
    let m = active.len();
    let a = DMatrix::from_fn(m, m, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - jac[(active[i], active[j])]
    });
    let rhs = DVector::from_fn(m, |i, _| r[active[i]]);
    let step = linalg::solve(&a, &rhs, 0.0).unwrap_or(rhs);
    let mut next = v.clone();
    for (k, &i) in active.iter().enumerate() {
        next[i] = (v[i] + step[k]).clamp(0.0, 1.0);
    }
    next
}

/// Max absolute residual of the termination equations at `table`.
pub fn equation_residual(model: &Pda, table: &TerminationTable) -> f64 {
    let none = BTreeSet::new();
    let sys = System::new(model, &none);
    let v = DVector::from_iterator(
        sys.slots.len(),
        sys.slots.iter().map(|&(p, x, q)| table.prob(p, x, q)),
    );
    if v.is_empty() {
        0.0
    } else {
        sys.residual(&v).amax()
    }
}

/// Every symbol reachable from the model's start (or every symbol, when no
/// start is declared) terminates with probability at least `1 - eps`.
pub fn is_almost_surely_terminating(model: &Pda, table: &TerminationTable, eps: f64) -> bool {
    let symbols: Vec<SymbolId> = match model.start() {
        Some((_, x)) => {
            let info = crate::graph::dependence(model);
            std::iter::once(x).chain(info.reachable_from[x.0].iter().copied()).collect()
        }
        None => model.symbol_ids().collect(),
    };
    symbols.into_iter().all(|x| table.symbol_prob(x) >= 1.0 - eps)
}
