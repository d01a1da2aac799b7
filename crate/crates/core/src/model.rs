//! Probabilistic pushdown automata: the data model, the text format and
//! one-step semantics.
//!
//! Probabilities are kept as exact rationals so that the "every row sums to
//! one" check is exact for hand-written models. Numeric code reads the cached
//! `f64` through [`Prob::value`].
//!
//! The text format is line oriented:
//!
//! ```text
//! # comment
//! pda                      # or: bpa, relaxed-bpa
//! states: p q              # omitted for bpa
//! alphabet: X Y
//! start: p X               # optional; "start: X" for bpa
//! tolerance: 1e-9          # optional; rows may miss 1 by this much
//! rule: p X -> p : 1/4     # empty word = pop
//! rule: p X -> p X X : 1/4
//! rule: p X -> q Y : 1/2
//! ```

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a control state within its [`Pda`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId(pub usize);

/// Index of a stack symbol within its [`Pda`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ProbOrigin {
    Exact,
    Float,
}

/// A rule probability in `(0, 1]`.
///
/// Constructed either from an exact rational (parsed models) or from a float
/// (models produced numerically, e.g. by the pBPA transformation). Equality
/// compares the exact value.
#[derive(Debug, Clone)]
pub struct Prob {
    exact: BigRational,
    value: f64,
    origin: ProbOrigin,
}

impl Prob {
    pub fn from_ratio(exact: BigRational) -> Option<Self> {
        if !exact.is_positive() || exact > BigRational::one() {
            return None;
        }
        let value = exact.to_f64()?;
        Some(Self {
            exact,
            value,
            origin: ProbOrigin::Exact,
        })
    }

    pub fn from_integers(numer: i64, denom: i64) -> Option<Self> {
        if denom == 0 {
            return None;
        }
        Self::from_ratio(BigRational::new(numer.into(), denom.into()))
    }

    pub fn from_f64(value: f64) -> Option<Self> {
        if !(value > 0.0 && value <= 1.0) {
            return None;
        }
        let exact = BigRational::from_float(value)?;
        Some(Self {
            exact,
            value,
            origin: ProbOrigin::Float,
        })
    }

    pub fn one() -> Self {
        Self::from_ratio(BigRational::one()).expect("one is a probability")
    }

    pub fn exact(&self) -> &BigRational {
        &self.exact
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_exact(&self) -> bool {
        self.origin == ProbOrigin::Exact
    }

    /// Product of two probabilities; exact if both are exact.
    pub fn mul(&self, other: &Prob) -> Prob {
        match (self.origin, other.origin) {
            (ProbOrigin::Exact, ProbOrigin::Exact) => {
                Prob::from_ratio(&self.exact * &other.exact).expect("product stays in (0,1]")
            }
            _ => Prob::from_f64(self.value * other.value).expect("product stays in (0,1]"),
        }
    }

    /// Sum of two probabilities of disjoint events; exact if both are exact.
    /// Float sums are clamped to 1 to absorb round-off.
    pub fn add(&self, other: &Prob) -> Option<Prob> {
        match (self.origin, other.origin) {
            (ProbOrigin::Exact, ProbOrigin::Exact) => Prob::from_ratio(&self.exact + &other.exact),
            _ => {
                let v = self.value + other.value;
                (v <= 1.0 + 1e-12).then(|| Prob::from_f64(v.min(1.0)).expect("positive"))
            }
        }
    }
}

impl PartialEq for Prob {
    fn eq(&self, other: &Self) -> bool {
        self.exact == other.exact
    }
}

impl Eq for Prob {}

impl fmt::Display for Prob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.origin {
            ProbOrigin::Exact if self.exact.is_integer() => write!(f, "{}", self.exact.numer()),
            ProbOrigin::Exact => write!(f, "{}/{}", self.exact.numer(), self.exact.denom()),
            ProbOrigin::Float => write!(f, "{}", self.value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Pda,
    Bpa,
    RelaxedBpa,
}

impl ModelKind {
    pub fn keyword(self) -> &'static str {
        match self {
            ModelKind::Pda => "pda",
            ModelKind::Bpa => "bpa",
            ModelKind::RelaxedBpa => "relaxed-bpa",
        }
    }

    pub fn is_stateless(self) -> bool {
        !matches!(self, ModelKind::Pda)
    }
}

/// `pX -> q alpha` with probability `prob`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub lhs_state: StateId,
    pub lhs_symbol: SymbolId,
    pub rhs_state: StateId,
    pub rhs: Vec<SymbolId>,
    pub prob: Prob,
}

/// A configuration: control state plus stack word, top first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    pub state: StateId,
    pub stack: Vec<SymbolId>,
}

impl Configuration {
    pub fn new(state: StateId, stack: Vec<SymbolId>) -> Self {
        Self { state, stack }
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    State(StateId),
    Diverge,
}

/// `pXq` or `pX↑`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub p: StateId,
    pub x: SymbolId,
    pub target: Target,
}

impl Triple {
    pub fn terminating(p: StateId, x: SymbolId, q: StateId) -> Self {
        Self {
            p,
            x,
            target: Target::State(q),
        }
    }

    pub fn diverging(p: StateId, x: SymbolId) -> Self {
        Self {
            p,
            x,
            target: Target::Diverge,
        }
    }
}

/// A rule-level defect found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("row ({state}, {symbol}) sums to {sum}, expected 1")]
    RowSum {
        state: String,
        symbol: String,
        sum: String,
    },
    #[error("rule {rule} has a right-hand side of length {len} (at most 2 allowed for {kind})")]
    RhsTooLong { rule: usize, len: usize, kind: &'static str },
    #[error("row ({state}, {symbol}) has no rules but is reachable")]
    MissingRow { state: String, symbol: String },
    #[error("a {kind} model must have exactly one control state, found {count}")]
    StateCount { kind: &'static str, count: usize },
    #[error("rule {rule} duplicates rule {first}")]
    DuplicateRule { rule: usize, first: usize },
    #[error("rule {rule} refers to an undeclared state or symbol")]
    DanglingIndex { rule: usize },
}

/// A probabilistic pushdown automaton (`kind = Pda`) or one of its stateless
/// variants.
#[derive(Debug, Clone)]
pub struct Pda {
    kind: ModelKind,
    states: Vec<String>,
    alphabet: Vec<String>,
    rules: Vec<Rule>,
    start: Option<(StateId, SymbolId)>,
    row_tolerance: f64,
    rows: Vec<Vec<usize>>,
}

impl PartialEq for Pda {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.states == other.states
            && self.alphabet == other.alphabet
            && self.rules == other.rules
            && self.start == other.start
    }
}

pub const BPA_STATE: &str = "p";

impl Pda {
    /// Assembles a model without validating it. Out-of-range indices are
    /// reported by [`validate`] rather than here.
    pub fn new(kind: ModelKind, states: Vec<String>, alphabet: Vec<String>, rules: Vec<Rule>) -> Self {
        let mut rows = vec![Vec::new(); states.len() * alphabet.len()];
        for (i, r) in rules.iter().enumerate() {
            if r.lhs_state.0 < states.len() && r.lhs_symbol.0 < alphabet.len() {
                rows[r.lhs_state.0 * alphabet.len() + r.lhs_symbol.0].push(i);
            }
        }
        Self {
            kind,
            states,
            alphabet,
            rules,
            start: None,
            row_tolerance: 0.0,
            rows,
        }
    }

    /// A stateless model over `alphabet`; every rule uses `StateId(0)`.
    pub fn new_bpa(kind: ModelKind, alphabet: Vec<String>, rules: Vec<Rule>) -> Self {
        debug_assert!(kind.is_stateless());
        Self::new(kind, vec![BPA_STATE.to_string()], alphabet, rules)
    }

    pub fn with_start(mut self, start: Option<(StateId, SymbolId)>) -> Self {
        self.start = start;
        self
    }

    pub fn with_row_tolerance(mut self, tol: f64) -> Self {
        self.row_tolerance = tol;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn start(&self) -> Option<(StateId, SymbolId)> {
        self.start
    }

    pub fn row_tolerance(&self) -> f64 {
        self.row_tolerance
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_symbols(&self) -> usize {
        self.alphabet.len()
    }

    pub fn state_ids(&self) -> impl Iterator<Item = StateId> {
        (0..self.states.len()).map(StateId)
    }

    pub fn symbol_ids(&self) -> impl Iterator<Item = SymbolId> {
        (0..self.alphabet.len()).map(SymbolId)
    }

    pub fn state_id(&self, name: &str) -> Option<StateId> {
        self.states.iter().position(|s| s == name).map(StateId)
    }

    pub fn symbol_id(&self, name: &str) -> Option<SymbolId> {
        self.alphabet.iter().position(|s| s == name).map(SymbolId)
    }

    pub fn state_name(&self, id: StateId) -> &str {
        &self.states[id.0]
    }

    pub fn symbol_name(&self, id: SymbolId) -> &str {
        &self.alphabet[id.0]
    }

    /// Indices (into [`Pda::rules`]) of the rules with left-hand side `pX`.
    pub fn row(&self, p: StateId, x: SymbolId) -> &[usize] {
        &self.rows[p.0 * self.alphabet.len() + x.0]
    }

    pub fn rules_for(&self, p: StateId, x: SymbolId) -> impl Iterator<Item = &Rule> + '_ {
        self.row(p, x).iter().map(move |&i| &self.rules[i])
    }

    /// Rules of symbol `x` in a stateless model.
    pub fn symbol_rules(&self, x: SymbolId) -> impl Iterator<Item = &Rule> + '_ {
        self.rules_for(StateId(0), x)
    }

    pub fn triple_name(&self, t: &Triple) -> String {
        match t.target {
            Target::State(q) => format!(
                "{}{}{}",
                self.state_name(t.p),
                self.symbol_name(t.x),
                self.state_name(q)
            ),
            Target::Diverge => format!("{}{}↑", self.state_name(t.p), self.symbol_name(t.x)),
        }
    }

    /// Parses `"p.X"` (pda) or `"X"` (stateless) into a head pair.
    pub fn parse_head(&self, spec: &str) -> Option<(StateId, SymbolId)> {
        if self.kind.is_stateless() {
            if let Some(x) = self.symbol_id(spec) {
                return Some((StateId(0), x));
            }
        }
        let (p, x) = spec.split_once('.')?;
        Some((self.state_id(p)?, self.symbol_id(x)?))
    }

    pub fn min_rule_probability(&self) -> f64 {
        self.rules
            .iter()
            .map(|r| r.prob.value())
            .fold(f64::INFINITY, f64::min)
            .min(1.0)
    }
}

/// Structural pop relation: `can_pop[p][X][q]` iff `pX` can reach `qε` with
/// positive probability. Computed as the least fixed point over booleans.
pub(crate) fn pop_relation(model: &Pda) -> Vec<Vec<Vec<bool>>> {
    let nq = model.num_states();
    let ng = model.num_symbols();
    let mut pop = vec![vec![vec![false; nq]; ng]; nq];
    loop {
        let mut changed = false;
        for p in model.state_ids() {
            for x in model.symbol_ids() {
                for rule in model.rules_for(p, x) {
                    let reach = word_pop_targets(&pop, rule.rhs_state, &rule.rhs, nq);
                    for q in 0..nq {
                        if reach[q] && !pop[p.0][x.0][q] {
                            pop[p.0][x.0][q] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return pop;
        }
    }
}

/// States in which `r alpha` can empty its stack, given a pop relation.
fn word_pop_targets(pop: &[Vec<Vec<bool>>], r: StateId, word: &[SymbolId], nq: usize) -> Vec<bool> {
    let mut current = vec![false; nq];
    current[r.0] = true;
    for y in word {
        let mut next = vec![false; nq];
        for s in 0..nq {
            if current[s] {
                for q in 0..nq {
                    next[q] |= pop[s][y.0][q];
                }
            }
        }
        current = next;
    }
    current
}

/// Head pairs `(p, X)` that occur on top of the stack in some configuration
/// reachable from `start`.
pub(crate) fn reachable_heads(model: &Pda, start: (StateId, SymbolId)) -> BTreeSet<(StateId, SymbolId)> {
    let nq = model.num_states();
    let pop = pop_relation(model);
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([start]);
    seen.insert(start);
    while let Some((p, x)) = queue.pop_front() {
        for rule in model.rules_for(p, x) {
            let mut current = vec![false; nq];
            current[rule.rhs_state.0] = true;
            for y in &rule.rhs {
                for s in 0..nq {
                    if current[s] && seen.insert((StateId(s), *y)) {
                        queue.push_back((StateId(s), *y));
                    }
                }
                let mut next = vec![false; nq];
                for s in 0..nq {
                    if current[s] {
                        for q in 0..nq {
                            next[q] |= pop[s][y.0][q];
                        }
                    }
                }
                current = next;
            }
        }
    }
    seen
}

/// Checks every model invariant; the empty list means the model is valid.
pub fn validate(model: &Pda) -> Vec<Violation> {
    validate_with_start(model, model.start())
}

/// Like [`validate`], but rows without rules are only reported when they are
/// reachable from `start` (or always, when `start` is `None`).
pub fn validate_with_start(model: &Pda, start: Option<(StateId, SymbolId)>) -> Vec<Violation> {
    let mut out = Vec::new();
    let nq = model.num_states();
    let ng = model.num_symbols();

    if model.kind().is_stateless() && nq != 1 {
        out.push(Violation::StateCount {
            kind: model.kind().keyword(),
            count: nq,
        });
    }

    let mut dangling = false;
    for (i, r) in model.rules().iter().enumerate() {
        let ok = r.lhs_state.0 < nq
            && r.rhs_state.0 < nq
            && r.lhs_symbol.0 < ng
            && r.rhs.iter().all(|y| y.0 < ng);
        if !ok {
            out.push(Violation::DanglingIndex { rule: i });
            dangling = true;
            continue;
        }
        if model.kind() != ModelKind::RelaxedBpa && r.rhs.len() > 2 {
            out.push(Violation::RhsTooLong {
                rule: i,
                len: r.rhs.len(),
                kind: model.kind().keyword(),
            });
        }
    }
    if dangling {
        return out;
    }

    let mut seen: Vec<(&Rule, usize)> = Vec::new();
    for (i, r) in model.rules().iter().enumerate() {
        if let Some(&(_, first)) = seen.iter().find(|(s, _)| {
            s.lhs_state == r.lhs_state
                && s.lhs_symbol == r.lhs_symbol
                && s.rhs_state == r.rhs_state
                && s.rhs == r.rhs
        }) {
            out.push(Violation::DuplicateRule { rule: i, first });
        } else {
            seen.push((r, i));
        }
    }

    let required: Option<BTreeSet<(StateId, SymbolId)>> = start.map(|s| reachable_heads(model, s));
    for p in model.state_ids() {
        for x in model.symbol_ids() {
            let row = model.row(p, x);
            if row.is_empty() {
                let needed = required.as_ref().is_none_or(|set| set.contains(&(p, x)));
                if needed {
                    out.push(Violation::MissingRow {
                        state: model.state_name(p).to_string(),
                        symbol: model.symbol_name(x).to_string(),
                    });
                }
                continue;
            }
            if let Some(sum) = row_sum_defect(model, row) {
                out.push(Violation::RowSum {
                    state: model.state_name(p).to_string(),
                    symbol: model.symbol_name(x).to_string(),
                    sum,
                });
            }
        }
    }
    out
}

fn row_sum_defect(model: &Pda, row: &[usize]) -> Option<String> {
    if model.row_tolerance() > 0.0 {
        let sum: f64 = row.iter().map(|&i| model.rules()[i].prob.value()).sum();
        ((sum - 1.0).abs() > model.row_tolerance()).then(|| format!("{sum}"))
    } else {
        let sum = row
            .iter()
            .fold(BigRational::zero(), |acc, &i| acc + model.rules()[i].prob.exact());
        (!sum.is_one()).then(|| {
            if sum.is_integer() {
                sum.numer().to_string()
            } else {
                format!("{}/{}", sum.numer(), sum.denom())
            }
        })
    }
}

#[derive(Debug, Error)]
#[error("no rule for ({state}, {symbol})")]
pub struct StepError {
    pub state: String,
    pub symbol: String,
}

/// One-step successor distribution of `c` in the induced Markov chain.
pub fn step_distribution(model: &Pda, c: &Configuration) -> Result<Vec<(Configuration, Prob)>, StepError> {
    let Some((&top, rest)) = c.stack.split_first() else {
        return Ok(vec![(c.clone(), Prob::one())]);
    };
    let row = model.row(c.state, top);
    if row.is_empty() {
        return Err(StepError {
            state: model.state_name(c.state).to_string(),
            symbol: model.symbol_name(top).to_string(),
        });
    }
    Ok(row
        .iter()
        .map(|&i| {
            let r = &model.rules()[i];
            let mut stack = r.rhs.clone();
            stack.extend_from_slice(rest);
            (Configuration::new(r.rhs_state, stack), r.prob.clone())
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("{0}")]
    Syntax(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("bad probability `{0}`")]
    BadProbability(String),
    #[error("duplicate rule (first defined on line {first})")]
    DuplicateRule { first: usize },
    #[error("duplicate declaration of `{0}`")]
    DuplicateName(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}, column {column}: {kind}")]
    At {
        line: usize,
        column: usize,
        kind: ParseErrorKind,
    },
    #[error("invalid model: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

const RESERVED: [&str; 3] = ["->", ":", "#"];

fn check_name(tok: &str, line: usize, column: usize) -> Result<(), ParseError> {
    if tok.is_empty() || RESERVED.iter().any(|r| tok.contains(r)) {
        return Err(ParseError::At {
            line,
            column,
            kind: ParseErrorKind::Syntax(format!("invalid name `{tok}`")),
        });
    }
    Ok(())
}

/// Parses `a/b`, an integer, or a decimal literal (optionally with exponent)
/// into the exact rational it denotes.
pub fn parse_rational(text: &str) -> Option<BigRational> {
    if let Some((n, d)) = text.split_once('/') {
        let n: BigInt = n.trim().parse().ok()?;
        let d: BigInt = d.trim().parse().ok()?;
        if d.is_zero() {
            return None;
        }
        return Some(BigRational::new(n, d));
    }
    let (mantissa, exp) = match text.find(['e', 'E']) {
        Some(i) => (&text[..i], text[i + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let digits_ok = |s: &str| s.chars().all(|c| c.is_ascii_digit());
    let int_digits = int_part.strip_prefix('+').unwrap_or(int_part);
    if !digits_ok(int_digits) || !digits_ok(frac_part) {
        return None;
    }
    let all: String = format!("{int_digits}{frac_part}");
    let numer: BigInt = if all.is_empty() { BigInt::zero() } else { all.parse().ok()? };
    let scale = exp - frac_part.len() as i32;
    let ten = BigInt::from(10);
    Some(if scale >= 0 {
        BigRational::from_integer(numer * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(numer, num_traits::pow(ten, (-scale) as usize))
    })
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let mut items = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    items.push((s, &text[s..i]));
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            items.push((s, &text[s..]));
        }
        Self { items }
    }
}

/// Parses and validates a model in the text format.
pub fn parse_model(text: &str) -> Result<Pda, ParseError> {
    let mut kind: Option<ModelKind> = None;
    let mut states: Vec<String> = Vec::new();
    let mut alphabet: Vec<String> = Vec::new();
    let mut start_spec: Option<(usize, Vec<(usize, String)>)> = None;
    let mut tolerance = 0.0;
    let mut raw_rules: Vec<(usize, Vec<(usize, &str)>)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let err = |column: usize, kind: ParseErrorKind| ParseError::At {
            line: line_no,
            column: column + 1,
            kind,
        };
        let tokens = Tokens::new(content).items;
        let (col0, head) = tokens[0];

        if kind.is_none() {
            kind = Some(match head {
                "pda" => ModelKind::Pda,
                "bpa" => ModelKind::Bpa,
                "relaxed-bpa" => ModelKind::RelaxedBpa,
                other => {
                    return Err(err(
                        col0,
                        ParseErrorKind::Syntax(format!("expected `pda`, `bpa` or `relaxed-bpa`, found `{other}`")),
                    ))
                }
            });
            if tokens.len() > 1 {
                return Err(err(tokens[1].0, ParseErrorKind::Syntax("unexpected token after model kind".into())));
            }
            continue;
        }

        let rest = &tokens[1..];
        match head {
            "states:" | "alphabet:" => {
                let target = if head == "states:" { &mut states } else { &mut alphabet };
                for &(c, name) in rest {
                    check_name(name, line_no, c + 1)?;
                    if target.iter().any(|n| n == name) {
                        return Err(err(c, ParseErrorKind::DuplicateName(name.to_string())));
                    }
                    target.push(name.to_string());
                }
            }
            "start:" => {
                start_spec = Some((line_no, rest.iter().map(|&(c, s)| (c, s.to_string())).collect()));
            }
            "tolerance:" => {
                let [(c, t)] = rest else {
                    return Err(err(col0, ParseErrorKind::Syntax("expected one tolerance value".into())));
                };
                tolerance = t
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v >= 0.0 && v.is_finite())
                    .ok_or_else(|| err(*c, ParseErrorKind::Syntax(format!("bad tolerance `{t}`"))))?;
            }
            "rule:" => raw_rules.push((line_no, rest.to_vec())),
            other => {
                return Err(err(col0, ParseErrorKind::Syntax(format!("unknown directive `{other}`"))));
            }
        }
    }

    let kind = kind.ok_or(ParseError::At {
        line: 1,
        column: 1,
        kind: ParseErrorKind::Syntax("empty model".into()),
    })?;
    if kind.is_stateless() {
        states = vec![BPA_STATE.to_string()];
    }

    let lookup_state = |name: &str, line: usize, col: usize| -> Result<StateId, ParseError> {
        states
            .iter()
            .position(|s| s == name)
            .map(StateId)
            .ok_or_else(|| ParseError::At {
                line,
                column: col + 1,
                kind: ParseErrorKind::UnknownState(name.to_string()),
            })
    };
    let lookup_symbol = |name: &str, line: usize, col: usize| -> Result<SymbolId, ParseError> {
        alphabet
            .iter()
            .position(|s| s == name)
            .map(SymbolId)
            .ok_or_else(|| ParseError::At {
                line,
                column: col + 1,
                kind: ParseErrorKind::UnknownSymbol(name.to_string()),
            })
    };

    let mut rules = Vec::new();
    let mut rule_lines: Vec<usize> = Vec::new();
    for (line, toks) in &raw_rules {
        let line = *line;
        let syntax = |col: usize, msg: &str| ParseError::At {
            line,
            column: col + 1,
            kind: ParseErrorKind::Syntax(msg.to_string()),
        };
        let end_col = toks.last().map(|t| t.0).unwrap_or(0);
        let arrow = toks
            .iter()
            .position(|t| t.1 == "->")
            .ok_or_else(|| syntax(end_col, "expected `->`"))?;
        let colon = toks
            .iter()
            .rposition(|t| t.1 == ":")
            .ok_or_else(|| syntax(end_col, "expected `: probability`"))?;
        if colon < arrow || colon + 2 != toks.len() {
            return Err(syntax(toks[colon.min(toks.len() - 1)].0, "expected exactly one probability after `:`"));
        }
        let lhs = &toks[..arrow];
        let rhs = &toks[arrow + 1..colon];
        let (prob_col, prob_text) = toks[colon + 1];

        let (lhs_state, lhs_symbol, rhs_state, word) = if kind.is_stateless() {
            let [(c, x)] = lhs else {
                return Err(syntax(toks[0].0, "expected `X ->`"));
            };
            (StateId(0), lookup_symbol(x, line, *c)?, StateId(0), rhs)
        } else {
            let [(cp, p), (cx, x)] = lhs else {
                return Err(syntax(toks[0].0, "expected `p X ->`"));
            };
            let Some(((cq, q), word)) = rhs.split_first() else {
                return Err(syntax(toks[arrow].0, "expected a target state after `->`"));
            };
            (
                lookup_state(p, line, *cp)?,
                lookup_symbol(x, line, *cx)?,
                lookup_state(q, line, *cq)?,
                word,
            )
        };
        let rhs_word = word
            .iter()
            .map(|&(c, y)| lookup_symbol(y, line, c))
            .collect::<Result<Vec<_>, _>>()?;
        let prob = parse_rational(prob_text)
            .and_then(Prob::from_ratio)
            .ok_or_else(|| ParseError::At {
                line,
                column: prob_col + 1,
                kind: ParseErrorKind::BadProbability(prob_text.to_string()),
            })?;
        let rule = Rule {
            lhs_state,
            lhs_symbol,
            rhs_state,
            rhs: rhs_word,
            prob,
        };
        if let Some(j) = rules.iter().position(|r: &Rule| {
            r.lhs_state == rule.lhs_state
                && r.lhs_symbol == rule.lhs_symbol
                && r.rhs_state == rule.rhs_state
                && r.rhs == rule.rhs
        }) {
            return Err(ParseError::At {
                line,
                column: toks[0].0 + 1,
                kind: ParseErrorKind::DuplicateRule { first: rule_lines[j] },
            });
        }
        rules.push(rule);
        rule_lines.push(line);
    }

    let start = match start_spec {
        None => None,
        Some((line, toks)) => Some(match (kind.is_stateless(), toks.as_slice()) {
            (true, [(c, x)]) => (StateId(0), lookup_symbol(x, line, *c)?),
            (false, [(cp, p), (cx, x)]) => (lookup_state(p, line, *cp)?, lookup_symbol(x, line, *cx)?),
            _ => {
                return Err(ParseError::At {
                    line,
                    column: 1,
                    kind: ParseErrorKind::Syntax("malformed start".into()),
                })
            }
        }),
    };

    let model = Pda::new(kind, states, alphabet, rules)
        .with_start(start)
        .with_row_tolerance(tolerance);
    let violations = validate(&model);
    if violations.is_empty() {
        Ok(model)
    } else {
        Err(ParseError::Invalid(violations))
    }
}

/// Writes `model` in the text format accepted by [`parse_model`].
pub fn serialize(model: &Pda) -> String {
    let mut out = String::new();
    out.push_str(model.kind().keyword());
    out.push('\n');
    if !model.kind().is_stateless() {
        out.push_str("states:");
        for s in model.states() {
            out.push(' ');
            out.push_str(s);
        }
        out.push('\n');
    }
    out.push_str("alphabet:");
    for x in model.alphabet() {
        out.push(' ');
        out.push_str(x);
    }
    out.push('\n');
    if let Some((p, x)) = model.start() {
        if model.kind().is_stateless() {
            out.push_str(&format!("start: {}\n", model.symbol_name(x)));
        } else {
            out.push_str(&format!("start: {} {}\n", model.state_name(p), model.symbol_name(x)));
        }
    }
    if model.row_tolerance() > 0.0 {
        out.push_str(&format!("tolerance: {:e}\n", model.row_tolerance()));
    }
    for r in model.rules() {
        out.push_str("rule:");
        if !model.kind().is_stateless() {
            out.push(' ');
            out.push_str(model.state_name(r.lhs_state));
        }
        out.push(' ');
        out.push_str(model.symbol_name(r.lhs_symbol));
        out.push_str(" ->");
        if !model.kind().is_stateless() {
            out.push(' ');
            out.push_str(model.state_name(r.rhs_state));
        }
        for y in &r.rhs {
            out.push(' ');
            out.push_str(model.symbol_name(*y));
        }
        out.push_str(&format!(" : {}\n", r.prob));
    }
    out
}
