//! The `pptail` command line: parse, analyze, transform, bound, simulate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use pptail::bounds::{classify, curves_csv, threshold_for_epsilon, BoundsError, TailReport, Threshold};
use pptail::distribution::{
    exact_distribution_bpa, exact_distribution_head, exact_distribution_pda, simulate, DistError, DEFAULT_STEP_CAP,
};
use pptail::moments::{expectations, moment_matrix, Expectation};
use pptail::termination::{
    is_almost_surely_terminating, termination_probs, TerminationError, TerminationTable, DEFAULT_AS_EPS, DEFAULT_TOL,
};
use pptail::transform::{terminating_part, to_bpa, TransformError, TransformResult};
use pptail::{parse_model, serialize, Configuration, ParseError, Pda, StateId, SymbolId, Target, Triple};

/// Exact tails are added to bound curves up to this horizon.
pub const EXACT_HORIZON: u64 = 1 << 16;

#[derive(Debug, Parser)]
#[command(name = "pptail", version, about = "Termination-time analysis for probabilistic pushdown automata")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Termination probabilities, transformation, expectations and tail classes.
    Analyze(AnalyzeArgs),
    /// Write the stateless model over triple symbols.
    Transform(TransformArgs),
    /// Exact termination-time distribution as CSV.
    Dist(DistArgs),
    /// Monte Carlo termination times as CSV.
    Simulate(SimulateArgs),
    /// Tail-bound curves as CSV and the step threshold for `--eps`.
    Bounds(BoundsArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub model: PathBuf,
    /// Start head, `p.X` or `X` for stateless models. Defaults to the model's start.
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub start: Option<String>,
    /// Final control state to condition on, or `none`.
    #[arg(long, default_value = "none")]
    pub target: String,
    #[arg(long, default_value_t = 100)]
    pub nmax: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Steps after which a run is censored.
    #[arg(long, default_value_t = DEFAULT_STEP_CAP)]
    pub cap: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256,512,1024")]
    pub grid: Vec<u64>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", .path.display())]
    Parse { path: PathBuf, source: ParseError },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Termination(#[from] TerminationError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl CliError {
    /// 1 for I/O, 2 for invalid input, 3 for numeric non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Termination(TerminationError::NotConverged { .. })
            | CliError::Bounds(BoundsError::Termination(TerminationError::NotConverged { .. }))
            | CliError::Transform(TransformError::TableResidual(_) | TransformError::PowerIteration) => 3,
            _ => 2,
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Analyze(a) => {
            let report = analyze(&load(&a.model)?, a.start.as_deref(), a.tol, &file_name(&a.model))?;
            emit(a.json.as_deref(), &(report_json(&report) + "\n"))
        }
        Command::Transform(a) => emit(a.out.as_deref(), &transform(&load(&a.model)?)?),
        Command::Dist(a) => emit(a.csv.as_deref(), &dist(&load(&a.model)?, a.start.as_deref(), &a.target, a.nmax)?),
        Command::Simulate(a) => {
            let model = load(&a.model)?;
            let (csv, summary) = simulate_csv(&model, a.start.as_deref(), a.samples, a.seed, a.cap)?;
            emit(a.csv.as_deref(), &csv)?;
            note(a.csv.is_some(), &summary);
            Ok(())
        }
        Command::Bounds(a) => {
            let model = load(&a.model)?;
            let (csv, lines) = bounds(&model, a.start.as_deref(), a.eps, &a.grid)?;
            emit(a.csv.as_deref(), &csv)?;
            for line in lines {
                note(a.csv.is_some(), &line);
            }
            Ok(())
        }
    }
}

/// Summaries go to standard output when the data went to a file.
fn note(data_in_file: bool, line: &str) {
    if data_in_file {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn load(path: &Path) -> Result<Pda, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_model(&text).map_err(|source| CliError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn resolve_start(model: &Pda, spec: Option<&str>) -> Result<(StateId, SymbolId), CliError> {
    match spec {
        Some(s) => model
            .parse_head(s)
            .ok_or_else(|| CliError::Usage(format!("unknown start `{s}`"))),
        None => model
            .start()
            .ok_or_else(|| CliError::Usage("the model declares no start; pass --start".into())),
    }
}

fn head_key(model: &Pda, p: StateId, x: SymbolId) -> String {
    if model.kind().is_stateless() {
        model.symbol_name(x).to_string()
    } else {
        format!("{}.{}", model.state_name(p), model.symbol_name(x))
    }
}

/// Report key for a triple: `p.X.q` / `p.X.up`, or `X` / `X.up` when stateless.
pub fn key(model: &Pda, t: &Triple) -> String {
    let head = head_key(model, t.p, t.x);
    match t.target {
        Target::Diverge => format!("{head}.up"),
        Target::State(_) if model.kind().is_stateless() => head,
        Target::State(q) => format!("{head}.{}", model.state_name(q)),
    }
}

/// A stateless model and symbol whose termination time is classified.
struct Subject {
    key: String,
    model: Pda,
    symbol: SymbolId,
}

/// Almost surely terminating stateless models are classified as they are;
/// everything else through the terminating part of the transformed model.
fn classify_directly(model: &Pda, table: &TerminationTable) -> bool {
    model.kind().is_stateless() && is_almost_surely_terminating(model, table, DEFAULT_AS_EPS)
}

fn subjects(model: &Pda, start: (StateId, SymbolId), table: &TerminationTable, res: &TransformResult) -> Vec<Subject> {
    if classify_directly(model, table) {
        return vec![Subject {
            key: model.symbol_name(start.1).to_string(),
            model: model.clone(),
            symbol: start.1,
        }];
    }
    let part = terminating_part(res);
    model
        .state_ids()
        .map(|q| Triple::terminating(start.0, start.1, q))
        .filter_map(|t| {
            let symbol = res.symbol_of(&t)?;
            (symbol.0 < res.num_terminating).then(|| Subject {
                key: key(model, &t),
                model: part.clone(),
                symbol,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct ModelSummary {
    pub file: String,
    pub kind: &'static str,
    pub states: usize,
    pub symbols: usize,
    pub rules: usize,
}

#[derive(Debug, Serialize)]
pub struct TerminationDigest {
    pub iterations: usize,
    pub residual: f64,
    /// Nonzero termination and divergence probabilities.
    pub probabilities: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
pub struct TransformSummary {
    pub symbols: usize,
    pub terminating: usize,
    pub rules: usize,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub model: ModelSummary,
    pub start: String,
    pub termination: TerminationDigest,
    pub transform: TransformSummary,
    /// Conditional expectations `E[pXq]`, or `E[X]` for almost surely
    /// terminating stateless models.
    pub expectations: BTreeMap<String, Expectation>,
    pub tails: Vec<TailReport>,
    pub curve_files: Vec<String>,
    pub timings_ms: BTreeMap<&'static str, f64>,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn analyze(model: &Pda, start: Option<&str>, tol: f64, file: &str) -> Result<AnalysisReport, CliError> {
    let start = resolve_start(model, start)?;
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let table = termination_probs(model, tol)?;
    timings.insert("termination", elapsed_ms(t));
    let probabilities = table
        .iter()
        .filter(|(_, v)| *v > 0.0)
        .map(|(t, v)| (key(model, &t), v))
        .collect();

    let t = Instant::now();
    let res = to_bpa(model, &table)?;
    timings.insert("transform", elapsed_ms(t));

    let t = Instant::now();
    let subjects = subjects(model, start, &table, &res);
    let expectations = if classify_directly(model, &table) {
        let exp = expectations(model, &moment_matrix(model));
        model
            .symbol_ids()
            .map(|x| (model.symbol_name(x).to_string(), exp.get(x)))
            .collect()
    } else {
        let part = terminating_part(&res);
        let exp = expectations(&part, &moment_matrix(&part));
        res.symbols[..res.num_terminating]
            .iter()
            .enumerate()
            .map(|(i, s)| (key(model, &s.triple), exp.values[i]))
            .collect()
    };
    timings.insert("moments", elapsed_ms(t));

    let t = Instant::now();
    let tails = subjects
        .iter()
        .map(|s| {
            let mut r = classify(&s.model, s.symbol)?;
            r.start = s.key.clone();
            Ok(r)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    timings.insert("bounds", elapsed_ms(t));

    Ok(AnalysisReport {
        tool: "pptail",
        version: env!("CARGO_PKG_VERSION"),
        model: ModelSummary {
            file: file.to_string(),
            kind: model.kind().keyword(),
            states: model.num_states(),
            symbols: model.num_symbols(),
            rules: model.rules().len(),
        },
        start: head_key(model, start.0, start.1),
        termination: TerminationDigest {
            iterations: table.iterations,
            residual: table.residual,
            probabilities,
        },
        transform: TransformSummary {
            symbols: res.bpa.num_symbols(),
            terminating: res.num_terminating,
            rules: res.bpa.rules().len(),
        },
        expectations,
        tails,
        curve_files: Vec::new(),
        timings_ms: timings,
    })
}

/// Rounds every float to 12 significant digits.
fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            let r: f64 = format!("{x:.11e}").parse().expect("formatted float");
            *v = serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number);
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Pretty JSON with floats at 12 significant digits and `∞` as `"inf"`.
pub fn report_json(report: &AnalysisReport) -> String {
    let mut v = serde_json::to_value(report).expect("report serializes");
    round_floats(&mut v);
    serde_json::to_string_pretty(&v).expect("value serializes")
}

pub fn transform(model: &Pda) -> Result<String, CliError> {
    let table = termination_probs(model, DEFAULT_TOL)?;
    Ok(serialize(&to_bpa(model, &table)?.bpa))
}

pub fn dist(model: &Pda, start: Option<&str>, target: &str, n_max: usize) -> Result<String, CliError> {
    let (p, x) = resolve_start(model, start)?;
    let table = if model.kind().is_stateless() {
        if target != "none" && model.state_id(target).is_none() {
            return Err(CliError::Usage(format!("unknown target `{target}`")));
        }
        exact_distribution_bpa(model, &[x], n_max)?
    } else if target == "none" {
        exact_distribution_head(model, p, x, n_max)?
    } else {
        let q = model
            .state_id(target)
            .ok_or_else(|| CliError::Usage(format!("unknown target `{target}`")))?;
        let probs = termination_probs(model, DEFAULT_TOL)?;
        let triple = Triple::terminating(p, x, q);
        if probs.get(&triple) <= 0.0 {
            return Err(CliError::Usage(format!(
                "{} terminates with probability 0",
                model.triple_name(&triple)
            )));
        }
        exact_distribution_pda(model, &probs, triple, n_max)?
    };
    Ok(table.to_csv())
}

/// CSV of the sample and a one-line summary.
pub fn simulate_csv(
    model: &Pda,
    start: Option<&str>,
    samples: usize,
    seed: u64,
    cap: u64,
) -> Result<(String, String), CliError> {
    let (p, x) = resolve_start(model, start)?;
    let stats = simulate(model, &Configuration::new(p, vec![x]), samples, cap, seed)?;
    let mut summary = format!("samples {samples}, seed {seed}, censored {}", stats.censored);
    for (q, n) in &stats.terminated_at {
        summary.push_str(&format!(", ended in {} {n}", model.state_name(*q)));
    }
    Ok((stats.to_csv(), summary))
}

/// Curve CSV (with a leading `subject` column when there are several) and
/// one threshold line per subject.
pub fn bounds(model: &Pda, start: Option<&str>, eps: f64, grid: &[u64]) -> Result<(String, Vec<String>), CliError> {
    let head = resolve_start(model, start)?;
    if grid.is_empty() || grid.contains(&0) {
        return Err(CliError::Usage("grid points must be positive".into()));
    }
    let table = termination_probs(model, DEFAULT_TOL)?;
    let res = to_bpa(model, &table)?;
    let subjects = subjects(model, head, &table, &res);
    if subjects.is_empty() {
        return Err(CliError::Usage("the start never terminates".into()));
    }
    let several = subjects.len() > 1;
    let horizon = *grid.iter().max().expect("nonempty grid");
    let mut csv = String::new();
    let mut lines = Vec::new();
    for s in &subjects {
        let report = classify(&s.model, s.symbol)?;
        let exact = (horizon <= EXACT_HORIZON)
            .then(|| exact_distribution_bpa(&s.model, &[s.symbol], horizon as usize))
            .transpose()?;
        let part = curves_csv(&report, grid, exact.as_ref(), None);
        let mut rows = part.lines();
        let header = rows.next().expect("header row");
        if csv.is_empty() {
            csv.push_str(if several { "subject," } else { "" });
            csv.push_str(header);
            csv.push('\n');
        }
        for row in rows {
            if several {
                csv.push_str(&s.key);
                csv.push(',');
            }
            csv.push_str(row);
            csv.push('\n');
        }
        let threshold = match threshold_for_epsilon(&report, eps)? {
            Threshold::Steps { n, n0_caveat: false } => format!("threshold {n}"),
            Threshold::Steps { n, n0_caveat: true } => format!("threshold {n} (valid only beyond an unknown n0)"),
            Threshold::Unbounded => "threshold unbounded".to_string(),
        };
        lines.push(format!("{}: case {}, eps {eps}, {threshold}", s.key, report.case.number()));
    }
    Ok((csv, lines))
}
