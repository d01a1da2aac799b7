//! From a pPDA to an equivalent stateless model over triple symbols `⟨pXq⟩`
//! and `⟨pX↑⟩`, plus the cone vector and the contraction that makes a pBPA
//! `u`-progressive.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::graph::restrict_to_symbols;
use crate::model::{ModelKind, Pda, Prob, Rule, StateId, SymbolId, Target, Triple};
use crate::moments::moment_matrix;
use crate::termination::TerminationTable;

/// Triples with probability below this are treated as zero and get no symbol.
pub const OMIT_BELOW: f64 = 1e-12;
/// Row tolerance attached to the transformed model.
pub const ROW_TOLERANCE: f64 = 1e-9;
/// Largest equation residual accepted from the termination table.
pub const MAX_TABLE_RESIDUAL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("termination table residual {0:.3e} is too large to transform")]
    TableResidual(f64),
    #[error("rule {rule} has more than two symbols on its right-hand side")]
    LongRule { rule: usize },
    #[error("expected a stateless model")]
    NotStateless,
    #[error("symbol `{0}` has no derivation to the empty word")]
    NoDerivation(String),
    #[error("moment matrix block has spectral radius {0} > 1")]
    Supercritical(f64),
    #[error("power iteration did not converge")]
    PowerIteration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TripleSymbol {
    pub triple: Triple,
    /// `p.X.q` or `p.X.up`, used in the text format.
    pub name: String,
    /// `⟨pXq⟩` or `⟨pX↑⟩`.
    pub display: String,
}

/// Where a rule of the transformed model comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RuleProvenance {
    /// Indices of the originating rules; several for a grouped `⟨pX↑⟩ -> ⟨qY↑⟩`.
    pub sources: Vec<usize>,
    /// The intermediate state `s` of a split `⟨rYs⟩⟨sZ·⟩`.
    pub via: Option<StateId>,
}

#[derive(Debug, Clone)]
pub struct TransformResult {
    pub bpa: Pda,
    /// Symbol metadata, indexed by `SymbolId`; terminating symbols come first.
    pub symbols: Vec<TripleSymbol>,
    /// Parallel to `bpa.rules()`.
    pub provenance: Vec<RuleProvenance>,
    pub used_table: TerminationTable,
    pub num_terminating: usize,
    index: BTreeMap<Triple, SymbolId>,
}

impl TransformResult {
    pub fn symbol_of(&self, t: &Triple) -> Option<SymbolId> {
        self.index.get(t).copied()
    }

    pub fn triple_of(&self, x: SymbolId) -> Triple {
        self.symbols[x.0].triple
    }
}

/// Builds the stateless model `Δ•`.
pub fn to_bpa(model: &Pda, table: &TerminationTable) -> Result<TransformResult, TransformError> {
    if table.residual > MAX_TABLE_RESIDUAL {
        return Err(TransformError::TableResidual(table.residual));
    }
    if let Some(rule) = model.rules().iter().position(|r| r.rhs.len() > 2) {
        return Err(TransformError::LongRule { rule });
    }

    let mut symbols = Vec::new();
    let mut index = BTreeMap::new();
    let mut add = |t: Triple, symbols: &mut Vec<TripleSymbol>| {
        let (p, x) = (model.state_name(t.p), model.symbol_name(t.x));
        let name = match t.target {
            Target::State(q) => format!("{p}.{x}.{}", model.state_name(q)),
            Target::Diverge => format!("{p}.{x}.up"),
        };
        index.insert(t, SymbolId(symbols.len()));
        symbols.push(TripleSymbol {
            triple: t,
            name,
            display: format!("⟨{}⟩", model.triple_name(&t)),
        });
    };
    for p in model.state_ids() {
        for x in model.symbol_ids() {
            for q in model.state_ids() {
                if table.prob(p, x, q) >= OMIT_BELOW {
                    add(Triple::terminating(p, x, q), &mut symbols);
                }
            }
        }
    }
    let num_terminating = symbols.len();
    for p in model.state_ids() {
        for x in model.symbol_ids() {
            // Heads without rules are outside the model.
            if table.diverge(p, x) >= OMIT_BELOW && !model.row(p, x).is_empty() {
                add(Triple::diverging(p, x), &mut symbols);
            }
        }
    }

    let mut rules = Vec::new();
    let mut provenance = Vec::new();
    let mut push = |lhs: SymbolId, rhs: Vec<SymbolId>, value: f64, sources: Vec<usize>, via: Option<StateId>| {
        rules.push(Rule {
            lhs_state: StateId(0),
            lhs_symbol: lhs,
            rhs_state: StateId(0),
            rhs,
            prob: Prob::from_f64(value.min(1.0)).expect("positive rule probability"),
        });
        provenance.push(RuleProvenance { sources, via });
    };

    for (sym, ts) in symbols.iter().enumerate() {
        let lhs = SymbolId(sym);
        let Triple { p, x, target } = ts.triple;
        let denom = table.get(&ts.triple);
        match target {
            Target::State(q) => {
                for &i in model.row(p, x) {
                    let r = &model.rules()[i];
                    let xr = r.prob.value();
                    match r.rhs.as_slice() {
                        [] if r.rhs_state == q => push(lhs, vec![], xr / denom, vec![i], None),
                        [] => {}
                        [y] => {
                            if let Some(a) = index.get(&Triple::terminating(r.rhs_state, *y, q)) {
                                let y = xr * table.prob(r.rhs_state, *y, q);
                                push(lhs, vec![*a], y / denom, vec![i], None);
                            }
                        }
                        [y, z] => {
                            for s in model.state_ids() {
                                let first = index.get(&Triple::terminating(r.rhs_state, *y, s));
                                let second = index.get(&Triple::terminating(s, *z, q));
                                if let (Some(a), Some(b)) = (first, second) {
                                    let w = xr * table.prob(r.rhs_state, *y, s) * table.prob(s, *z, q);
                                    push(lhs, vec![*a, *b], w / denom, vec![i], Some(s));
                                }
                            }
                        }
                        _ => unreachable!("long rules rejected above"),
                    }
                }
            }
            Target::Diverge => {
                for &i in model.row(p, x) {
                    let r = &model.rules()[i];
                    if let [y, z] = r.rhs.as_slice() {
                        for s in model.state_ids() {
                            let first = index.get(&Triple::terminating(r.rhs_state, *y, s));
                            let second = index.get(&Triple::diverging(s, *z));
                            if let (Some(a), Some(b)) = (first, second) {
                                let w = r.prob.value() * table.prob(r.rhs_state, *y, s) * table.diverge(s, *z);
                                push(lhs, vec![*a, *b], w / denom, vec![i], Some(s));
                            }
                        }
                    }
                }
                // Rules pX -> qYβ grouped by their head qY.
                let mut heads: Vec<((StateId, SymbolId), Vec<usize>)> = Vec::new();
                for &i in model.row(p, x) {
                    let r = &model.rules()[i];
                    if let Some(&y) = r.rhs.first() {
                        let head = (r.rhs_state, y);
                        match heads.iter_mut().find(|(h, _)| *h == head) {
                            Some((_, v)) => v.push(i),
                            None => heads.push((head, vec![i])),
                        }
                    }
                }
                for ((q, y), sources) in heads {
                    if let Some(a) = index.get(&Triple::diverging(q, y)) {
                        let total: f64 = sources.iter().map(|&i| model.rules()[i].prob.value()).sum();
                        let w = table.diverge(q, y) * total;
                        push(lhs, vec![*a], w / denom, sources, None);
                    }
                }
            }
        }
    }

    let alphabet = symbols.iter().map(|s| s.name.clone()).collect();
    let bpa = Pda::new_bpa(ModelKind::Bpa, alphabet, rules).with_row_tolerance(ROW_TOLERANCE);
    Ok(TransformResult {
        bpa,
        symbols,
        provenance,
        used_table: table.clone(),
        num_terminating,
        index,
    })
}

/// The sub-model over the terminating symbols `⟨pXq⟩`. Symbol ids are the
/// same as in `result.bpa`.
pub fn terminating_part(result: &TransformResult) -> Pda {
    let keep = (0..result.num_terminating).map(SymbolId).collect();
    restrict_to_symbols(&result.bpa, &keep, None)
}

/// A positive weight vector `u` with `A·u ≤ u` on every SCC block of the
/// moment matrix, each block scaled to maximum 1.
///
/// Entries of `A` between different SCCs are ignored: a critical block that
/// calls another critical block (as in `X2 -> X2 X2 | X1`) admits no positive
/// `u` with `A·u ≤ u` on the full matrix.
pub fn cone_vector(model: &Pda) -> Result<Vec<f64>, TransformError> {
    if !model.kind().is_stateless() {
        return Err(TransformError::NotStateless);
    }
    let mm = moment_matrix(model);
    if !mm.converged {
        return Err(TransformError::PowerIteration);
    }
    if mm.spectral_radius > 1.0 + 1e-9 {
        return Err(TransformError::Supercritical(mm.spectral_radius));
    }
    Ok(mm.dominant_vector)
}

/// `N_α·u`.
pub fn word_weight(word: &[SymbolId], u: &[f64]) -> f64 {
    word.iter().map(|y| u[y.0]).sum()
}

fn u_min(u: &[f64]) -> f64 {
    u.iter().copied().fold(f64::INFINITY, f64::min)
}

fn progressive_rule(x: SymbolId, word: &[SymbolId], u: &[f64], margin: f64) -> bool {
    (u[x.0] - word_weight(word, u)).abs() >= margin
}

/// Every symbol has a rule changing the `u`-weight by at least `u_min / 2`.
pub fn is_u_progressive(model: &Pda, u: &[f64]) -> bool {
    let margin = u_min(u) / 2.0;
    model
        .symbol_ids()
        .all(|x| model.symbol_rules(x).any(|r| progressive_rule(x, &r.rhs, u, margin)))
}

/// One step of a derivation sequence: rule `rule` of the model, whose
/// right-hand side contains the next symbol at position `pos`.
#[derive(Debug, Clone, Copy)]
struct Step {
    rule: usize,
    pos: usize,
}

/// Shortest derivation sequence from each symbol to the empty word, as rule
/// indices; ties go to the earliest rule and the earliest occurrence.
fn shortest_chains(model: &Pda) -> Vec<Option<Vec<Step>>> {
    let n = model.num_symbols();
    let mut dist: Vec<Option<usize>> = vec![None; n];
    for x in model.symbol_ids() {
        if model.symbol_rules(x).any(|r| r.rhs.is_empty()) {
            dist[x.0] = Some(1);
        }
    }
    let mut d = 1;
    loop {
        let mut changed = false;
        for x in model.symbol_ids() {
            if dist[x.0].is_none()
                && model
                    .symbol_rules(x)
                    .any(|r| r.rhs.iter().any(|y| dist[y.0] == Some(d)))
            {
                dist[x.0] = Some(d + 1);
                changed = true;
            }
        }
        if !changed {
            break;
        }
        d += 1;
    }

    (0..n)
        .map(|x0| {
            let mut chain = Vec::new();
            let mut x = SymbolId(x0);
            let mut dx = dist[x0]?;
            while dx > 1 {
                let (rule, pos) = model
                    .row(StateId(0), x)
                    .iter()
                    .find_map(|&i| {
                        let r = &model.rules()[i];
                        r.rhs.iter().position(|y| dist[y.0] == Some(dx - 1)).map(|pos| (i, pos))
                    })
                    .expect("distance has a witness");
                chain.push(Step { rule, pos });
                x = model.rules()[rule].rhs[pos];
                dx -= 1;
            }
            let rule = *model
                .row(StateId(0), x)
                .iter()
                .find(|&&i| model.rules()[i].rhs.is_empty())
                .expect("distance one means an empty rule");
            chain.push(Step { rule, pos: 0 });
            Some(chain)
        })
        .collect()
}

/// Word induced by a derivation sequence.
fn induced_word(model: &Pda, chain: &[Step]) -> Vec<SymbolId> {
    let rules = model.rules();
    let mut word = rules[chain[0].rule].rhs.clone();
    let mut offset = 0;
    for k in 1..chain.len() {
        let at = offset + chain[k - 1].pos;
        let repl = &rules[chain[k].rule].rhs;
        word.splice(at..at + 1, repl.iter().copied());
        offset = at;
    }
    word
}

/// The contraction of a derivation sequence: a list of rules for its first
/// symbol, as `(probability, word)` pairs.
fn contraction(model: &Pda, chain: &[Step]) -> Vec<(Prob, Vec<SymbolId>)> {
    let rules = model.rules();
    let first = &rules[chain[0].rule];
    if chain.len() == 1 {
        return vec![(first.prob.clone(), first.rhs.clone())];
    }
    let pos = chain[0].pos;
    let x2 = first.rhs[pos];
    let inner = contraction(model, &chain[1..]);
    let mut delta2 = Vec::new();
    for &i in model.row(StateId(0), x2) {
        if i == chain[1].rule {
            delta2.extend(inner.iter().cloned());
        } else {
            delta2.push((rules[i].prob.clone(), rules[i].rhs.clone()));
        }
    }
    delta2
        .into_iter()
        .map(|(q, beta)| {
            let mut word = first.rhs[..pos].to_vec();
            word.extend(beta);
            word.extend_from_slice(&first.rhs[pos + 1..]);
            (first.prob.mul(&q), word)
        })
        .collect()
}

/// Replaces, for every symbol that is not yet `u`-progressive, the first rule
/// of a shortest derivation sequence to the empty word by its contraction.
///
/// The result is a relaxed pBPA that is `u`-progressive, at least as fast as
/// `model` and at most `|Γ|` times faster.
pub fn make_u_progressive(model: &Pda, u: &[f64]) -> Result<Pda, TransformError> {
    if !model.kind().is_stateless() {
        return Err(TransformError::NotStateless);
    }
    let margin = u_min(u) / 2.0;
    let chains = shortest_chains(model);
    let mut rules: Vec<Rule> = Vec::new();
    for x in model.symbol_ids() {
        let row: Vec<&Rule> = model.symbol_rules(x).collect();
        if row.iter().any(|r| progressive_rule(x, &r.rhs, u, margin)) {
            rules.extend(row.into_iter().cloned());
            continue;
        }
        let chain = chains[x.0]
            .as_ref()
            .ok_or_else(|| TransformError::NoDerivation(model.symbol_name(x).to_string()))?;
        let full = induced_word(model, chain);
        let chosen = if progressive_rule(x, &full, u, margin) || chain.len() == 1 {
            &chain[..]
        } else {
            &chain[..chain.len() - 1]
        };
        let replaced = chosen[0].rule;
        let mut new_row: Vec<(Prob, Vec<SymbolId>)> = Vec::new();
        let mut merge = |prob: Prob, word: Vec<SymbolId>| match new_row.iter_mut().find(|(_, w)| *w == word) {
            Some((p, _)) => *p = p.add(&prob).expect("row mass stays at most one"),
            None => new_row.push((prob, word)),
        };
        for &i in model.row(StateId(0), x) {
            if i == replaced {
                for (p, w) in contraction(model, chosen) {
                    merge(p, w);
                }
            } else {
                let r = &model.rules()[i];
                merge(r.prob.clone(), r.rhs.clone());
            }
        }
        rules.extend(new_row.into_iter().map(|(prob, rhs)| Rule {
            lhs_state: StateId(0),
            lhs_symbol: x,
            rhs_state: StateId(0),
            rhs,
            prob,
        }));
    }
    Ok(Pda::new_bpa(ModelKind::RelaxedBpa, model.alphabet().to_vec(), rules)
        .with_start(model.start())
        .with_row_tolerance(model.row_tolerance()))
}
