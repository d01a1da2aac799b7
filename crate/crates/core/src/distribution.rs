//! Exact termination-time distributions by dynamic programming, and a seeded
//! Monte Carlo simulator of the induced Markov chain.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Configuration, Pda, StateId, SymbolId, Target, Triple};
use crate::termination::TerminationTable;

pub const DEFAULT_STEP_CAP: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("expected a stateless model")]
    NotStateless,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("n = {n} is beyond the horizon {n_max}")]
    BeyondHorizon { n: usize, n_max: usize },
    #[error("the diverging triple has no termination-time distribution")]
    DivergingTarget,
    #[error("right-hand sides longer than two need a stateless model")]
    LongRule,
    #[error("no rule for state `{state}` and symbol `{symbol}`")]
    MissingRule { state: String, symbol: String },
    #[error("samples and step cap must be positive")]
    EmptySample,
}

/// `mass[n] = P(T = n)` for `n = 0..=n_max`, unconditioned.
///
/// For a triple subject `pXq` this is `P(Run(pXq), T = n)` and `total` is
/// `[pXq]`; otherwise `total` is one.
#[derive(Debug, Clone, Serialize)]
pub struct DistTable {
    pub subject: String,
    pub mass: Vec<f64>,
    pub n_max: usize,
    pub residual_mass: f64,
    pub total: f64,
    pub conditional: bool,
}

impl DistTable {
    fn new(subject: String, mass: Vec<f64>, total: f64, conditional: bool) -> Self {
        let n_max = mass.len() - 1;
        let residual_mass = total - mass.iter().sum::<f64>();
        Self {
            subject,
            mass,
            n_max,
            residual_mass,
            total,
            conditional,
        }
    }

    /// `P(T ≥ n)`, conditioned on termination in the target state for
    /// triple subjects.
    pub fn tail(&self, n: usize) -> Result<f64, DistError> {
        Ok(self.tail_unconditioned(n)? / self.total)
    }

    /// `total - Σ_{i<n} mass[i]`.
    pub fn tail_unconditioned(&self, n: usize) -> Result<f64, DistError> {
        if n > self.n_max + 1 {
            return Err(DistError::BeyondHorizon { n, n_max: self.n_max });
        }
        let below: f64 = self.mass[..n].iter().sum();
        Ok((self.total - below).max(0.0))
    }

    /// `mass / total`.
    pub fn conditional_mass(&self) -> Vec<f64> {
        self.mass.iter().map(|m| m / self.total).collect()
    }

    /// Columns `n,mass,cumulative,tail`, plus `conditional_mass,conditional_tail`
    /// for triple subjects. Rows run over `n = 1..=n_max`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mass,cumulative,tail");
        if self.conditional {
            out.push_str(",conditional_mass,conditional_tail");
        }
        out.push('\n');
        let mut cumulative = self.mass[0];
        for n in 1..=self.n_max {
            let tail = (self.total - cumulative).max(0.0);
            cumulative += self.mass[n];
            write!(out, "{n},{:e},{:e},{:e}", self.mass[n], cumulative, tail).unwrap();
            if self.conditional {
                write!(out, ",{:e},{:e}", self.mass[n] / self.total, tail / self.total).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Incremental suffix convolutions for one right-hand side: `c[j][m]` is the
/// probability that the word `syms[j..]` is popped in exactly `m` steps.
struct WordConv {
    syms: Vec<SymbolId>,
    c: Vec<Vec<f64>>,
}

impl WordConv {
    fn new(syms: Vec<SymbolId>) -> Self {
        let c = vec![Vec::new(); syms.len() + 1];
        Self { syms, c }
    }

    /// Appends index `m` to every suffix table, given `d[Y][i]` for `i <= m`.
    fn extend(&mut self, d: &[Vec<f64>], m: usize) {
        let k = self.syms.len();
        self.c[k].push(if m == 0 { 1.0 } else { 0.0 });
        for j in (0..k).rev() {
            let dy = &d[self.syms[j].0];
            let next = &self.c[j + 1];
            let mut acc = 0.0;
            for i in 1..=m {
                acc += dy[i] * next[m - i];
            }
            self.c[j].push(acc);
        }
    }

    fn value(&self, m: usize) -> f64 {
        self.c[0][m]
    }
}

fn symbol_distributions(model: &Pda, n_max: usize) -> (Vec<Vec<f64>>, Vec<WordConv>) {
    let ng = model.num_symbols();
    let mut d = vec![vec![0.0]; ng];
    let mut convs: Vec<WordConv> = model.rules().iter().map(|r| WordConv::new(r.rhs.clone())).collect();
    for n in 1..=n_max {
        for conv in convs.iter_mut() {
            conv.extend(&d, n - 1);
        }
        for x in d.iter_mut() {
            x.push(0.0);
        }
        for (r, conv) in model.rules().iter().zip(&convs) {
            d[r.lhs_symbol.0][n] += r.prob.value() * conv.value(n - 1);
        }
    }
    (d, convs)
}

/// Exact distribution of the termination time from the word `start` (top
/// first) in a stateless model, for `n = 0..=n_max`.
pub fn exact_distribution_bpa(model: &Pda, start: &[SymbolId], n_max: usize) -> Result<DistTable, DistError> {
    if !model.kind().is_stateless() {
        return Err(DistError::NotStateless);
    }
    if n_max == 0 {
        return Err(DistError::ZeroHorizon);
    }
    let (d, _) = symbol_distributions(model, n_max);
    let mut word = WordConv::new(start.to_vec());
    for m in 0..=n_max {
        word.extend(&d, m);
    }
    let subject = start
        .iter()
        .map(|x| model.symbol_name(*x))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(DistTable::new(subject, word.c[0].clone(), 1.0, false))
}

/// `D_pXq(n)` for every triple, `n = 0..=n_max`, indexed `[p][X][q]`.
fn triple_distributions(model: &Pda, n_max: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    let nq = model.num_states();
    let ng = model.num_symbols();
    let mut d = vec![vec![vec![vec![0.0; n_max + 1]; nq]; ng]; nq];
    for n in 1..=n_max {
        let mut next = vec![vec![vec![0.0; nq]; ng]; nq];
        for r in model.rules() {
            let (p, x, rs) = (r.lhs_state.0, r.lhs_symbol.0, r.rhs_state.0);
            let prob = r.prob.value();
            match r.rhs.as_slice() {
                [] => {
                    if n == 1 {
                        next[p][x][rs] += prob;
                    }
                }
                [y] => {
                    for q in 0..nq {
                        next[p][x][q] += prob * d[rs][y.0][q][n - 1];
                    }
                }
                [y, z] => {
                    for q in 0..nq {
                        let mut acc = 0.0;
                        for s in 0..nq {
                            let first = &d[rs][y.0][s];
                            let second = &d[s][z.0][q];
                            for i in 1..n - 1 {
                                acc += first[i] * second[n - 1 - i];
                            }
                        }
                        next[p][x][q] += prob * acc;
                    }
                }
                _ => unreachable!("checked by caller"),
            }
        }
        for p in 0..nq {
            for x in 0..ng {
                for q in 0..nq {
                    d[p][x][q][n] = next[p][x][q];
                }
            }
        }
    }
    d
}

/// Exact `D_pXq(n) = P(Run(pXq), T = n)` for `n = 0..=n_max`; the table's
/// `total` is `[pXq]` from `table`, so `tail` is conditional.
pub fn exact_distribution_pda(
    model: &Pda,
    table: &TerminationTable,
    triple: Triple,
    n_max: usize,
) -> Result<DistTable, DistError> {
    let Target::State(q) = triple.target else {
        return Err(DistError::DivergingTarget);
    };
    if n_max == 0 {
        return Err(DistError::ZeroHorizon);
    }
    if model.rules().iter().any(|r| r.rhs.len() > 2) {
        return Err(DistError::LongRule);
    }
    let d = triple_distributions(model, n_max);
    let mass = d[triple.p.0][triple.x.0][q.0].clone();
    Ok(DistTable::new(model.triple_name(&triple), mass, table.get(&triple), true))
}

/// Exact `P(T_pX = n)` over all final states, for `n = 0..=n_max`. `total` is
/// one, so `tail` counts nonterminating runs as `T = ∞`.
pub fn exact_distribution_head(model: &Pda, p: StateId, x: SymbolId, n_max: usize) -> Result<DistTable, DistError> {
    if n_max == 0 {
        return Err(DistError::ZeroHorizon);
    }
    if model.rules().iter().any(|r| r.rhs.len() > 2) {
        return Err(DistError::LongRule);
    }
    let d = triple_distributions(model, n_max);
    let mut mass = vec![0.0; n_max + 1];
    for per_q in &d[p.0][x.0] {
        for (m, v) in mass.iter_mut().zip(per_q) {
            *m += v;
        }
    }
    let subject = format!("{}{}", model.state_name(p), model.symbol_name(x));
    Ok(DistTable::new(subject, mass, 1.0, false))
}

/// How one simulated run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Terminated { state: StateId, steps: u64 },
    Censored,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStats {
    pub samples: usize,
    pub seed: u64,
    pub step_cap: u64,
    pub outcomes: Vec<Outcome>,
    /// Terminated runs per final control state.
    pub terminated_at: BTreeMap<StateId, usize>,
    pub censored: usize,
}

/// An estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    fn proportion(hits: usize, total: usize) -> Self {
        let p = hits as f64 / total as f64;
        Self {
            value: p,
            std_error: (p * (1.0 - p) / total as f64).sqrt(),
        }
    }

    /// Whether `truth` lies within `k` standard errors. A zero standard error
    /// is widened to `1/samples` so that exact agreement is not required of
    /// rare events.
    pub fn agrees_with(&self, truth: f64, k: f64, samples: usize) -> bool {
        let se = self.std_error.max(1.0 / samples as f64);
        (self.value - truth).abs() <= k * se
    }
}

impl SampleStats {
    /// Empirical `P(T ≥ n)`. Censored runs count as `T ≥ n`, which is exact
    /// for `n <= step_cap`.
    pub fn empirical_tail(&self, n: u64) -> Estimate {
        let hits = self
            .outcomes
            .iter()
            .filter(|o| match o {
                Outcome::Terminated { steps, .. } => *steps >= n,
                Outcome::Censored => true,
            })
            .count();
        Estimate::proportion(hits, self.samples)
    }

    /// Empirical `P(T = n)`.
    pub fn empirical_mass(&self, n: u64) -> Estimate {
        let hits = self
            .outcomes
            .iter()
            .filter(|o| matches!(o, Outcome::Terminated { steps, .. } if *steps == n))
            .count();
        Estimate::proportion(hits, self.samples)
    }

    /// Fraction of runs that emptied the stack in state `q`.
    pub fn terminated_in(&self, q: StateId) -> Estimate {
        Estimate::proportion(self.terminated_at.get(&q).copied().unwrap_or(0), self.samples)
    }

    /// Mean and standard error of the termination time over all runs;
    /// `None` if some run was censored.
    pub fn mean_time(&self) -> Option<Estimate> {
        let times: Vec<f64> = self
            .outcomes
            .iter()
            .map(|o| match o {
                Outcome::Terminated { steps, .. } => Some(*steps as f64),
                Outcome::Censored => None,
            })
            .collect::<Option<_>>()?;
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Some(Estimate {
            value: mean,
            std_error: (var / n).sqrt(),
        })
    }

    /// One row per observed termination time: `n,mass,cumulative,tail,tail_se`.
    pub fn to_csv(&self) -> String {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for o in &self.outcomes {
            if let Outcome::Terminated { steps, .. } = o {
                *counts.entry(*steps).or_default() += 1;
            }
        }
        let total = self.samples as f64;
        let mut out = String::from("n,mass,cumulative,tail,tail_se\n");
        let mut below = 0usize;
        for (n, c) in counts {
            let tail = Estimate::proportion(self.samples - below, self.samples);
            below += c;
            writeln!(
                out,
                "{n},{:e},{:e},{:e},{:e}",
                c as f64 / total,
                below as f64 / total,
                tail.value,
                tail.std_error
            )
            .unwrap();
        }
        out
    }
}

/// Cumulative rule probabilities of every row, for sampling.
struct Sampler<'a> {
    model: &'a Pda,
    cumulative: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    fn new(model: &'a Pda) -> Self {
        let cumulative = model
            .state_ids()
            .flat_map(|p| model.symbol_ids().map(move |x| (p, x)))
            .map(|(p, x)| {
                let mut acc = 0.0;
                model
                    .rules_for(p, x)
                    .map(|r| {
                        acc += r.prob.value();
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { model, cumulative }
    }

    fn missing(&self, p: StateId, x: SymbolId) -> DistError {
        DistError::MissingRule {
            state: self.model.state_name(p).to_string(),
            symbol: self.model.symbol_name(x).to_string(),
        }
    }

    /// Rewrites the top of `stack` (top at the end) in state `state`.
    fn step(&self, rng: &mut ChaCha8Rng, state: &mut StateId, stack: &mut Vec<SymbolId>) -> Result<(), DistError> {
        let x = *stack.last().expect("nonempty stack");
        let row = self.model.row(*state, x);
        let cum = &self.cumulative[state.0 * self.model.num_symbols() + x.0];
        if row.is_empty() {
            return Err(self.missing(*state, x));
        }
        let u: f64 = rng.random::<f64>() * cum[cum.len() - 1];
        let k = cum.iter().position(|c| u < *c).unwrap_or(cum.len() - 1);
        let rule = &self.model.rules()[row[k]];
        stack.pop();
        stack.extend(rule.rhs.iter().rev());
        *state = rule.rhs_state;
        Ok(())
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn initial_stack(c: &Configuration) -> Vec<SymbolId> {
    c.stack.iter().rev().copied().collect()
}

/// Simulates `samples` independent runs from `start`, each until the stack
/// empties or `step_cap` steps have been taken.
///
/// Sample `i` draws from ChaCha8 seeded with `seed` on stream `i`, so results
/// do not depend on thread scheduling.
pub fn simulate(
    model: &Pda,
    start: &Configuration,
    samples: usize,
    step_cap: u64,
    seed: u64,
) -> Result<SampleStats, DistError> {
    if samples == 0 || step_cap == 0 {
        return Err(DistError::EmptySample);
    }
    let sampler = Sampler::new(model);
    let outcomes = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let mut state = start.state;
            let mut stack = initial_stack(start);
            let mut steps = 0u64;
            while !stack.is_empty() {
                if steps == step_cap {
                    return Ok(Outcome::Censored);
                }
                sampler.step(&mut rng, &mut state, &mut stack)?;
                steps += 1;
            }
            Ok(Outcome::Terminated { state, steps })
        })
        .collect::<Result<Vec<_>, DistError>>()?;
    let mut terminated_at = BTreeMap::new();
    let mut censored = 0;
    for o in &outcomes {
        match o {
            Outcome::Terminated { state, .. } => *terminated_at.entry(*state).or_default() += 1,
            Outcome::Censored => censored += 1,
        }
    }
    Ok(SampleStats {
        samples,
        seed,
        step_cap,
        outcomes,
        terminated_at,
        censored,
    })
}

/// Head `(state, top symbol)` of a configuration; `None` once the stack is empty.
pub type Head = Option<(StateId, SymbolId)>;

/// Counts of the head at steps `0..=steps` over `samples` runs. Each run
/// starts from one of `starts`, chosen with the given weights.
pub fn head_counts(
    model: &Pda,
    starts: &[(Configuration, f64)],
    steps: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<BTreeMap<Head, usize>>, DistError> {
    if samples == 0 || starts.is_empty() {
        return Err(DistError::EmptySample);
    }
    let sampler = Sampler::new(model);
    let weight: f64 = starts.iter().map(|s| s.1).sum();
    let traces = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let pick = rng.random::<f64>() * weight;
            let mut acc = 0.0;
            let start = starts
                .iter()
                .find(|(_, w)| {
                    acc += w;
                    pick < acc
                })
                .unwrap_or(&starts[starts.len() - 1]);
            let mut state = start.0.state;
            let mut stack = initial_stack(&start.0);
            let mut trace = Vec::with_capacity(steps + 1);
            for k in 0..=steps {
                trace.push(stack.last().map(|x| (state, *x)));
                if k < steps && !stack.is_empty() {
                    sampler.step(&mut rng, &mut state, &mut stack)?;
                }
            }
            Ok(trace)
        })
        .collect::<Result<Vec<Vec<Head>>, DistError>>()?;
    let mut counts = vec![BTreeMap::new(); steps + 1];
    for trace in traces {
        for (k, h) in trace.into_iter().enumerate() {
            *counts[k].entry(h).or_default() += 1;
        }
    }
    Ok(counts)
}
