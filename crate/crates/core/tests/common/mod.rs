#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use pptail::{parse_model, step_distribution, Configuration, Pda, StateId, SymbolId};

pub fn models_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

pub fn load(name: &str) -> Pda {
    let text = std::fs::read_to_string(models_dir().join(name)).unwrap();
    parse_model(&text).unwrap()
}

pub fn bpa(text: &str) -> Pda {
    parse_model(&format!("bpa\n{text}")).unwrap()
}

pub fn ab(a: (i64, i64), b: (i64, i64)) -> Pda {
    parse_model(&format!(
        "pda\nstates: p q\nalphabet: X\n\
         rule: p X -> q X X : {}/{}\nrule: p X -> q : {}/{}\n\
         rule: q X -> p X X : {}/{}\nrule: q X -> p : {}/{}\n",
        a.0,
        a.1,
        a.1 - a.0,
        a.1,
        b.0,
        b.1,
        b.1 - b.0,
        b.1
    ))
    .unwrap()
}

pub const SUBCRITICAL: &str = "alphabet: X\nrule: X -> : 3/4\nrule: X -> X X : 1/4\n";

/// Brute-force oracle: pushes the full distribution over configurations
/// through the one-step semantics. `result[q][n]` is the probability of
/// reaching `qε` for the first time after exactly `n` steps.
pub fn propagate(model: &Pda, start: Configuration, n_max: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; n_max + 1]; model.num_states()];
    let mut current: HashMap<Configuration, f64> = HashMap::from([(start, 1.0)]);
    for n in 1..=n_max {
        let mut next: HashMap<Configuration, f64> = HashMap::new();
        for (c, w) in current {
            if c.is_empty() {
                continue;
            }
            for (succ, p) in step_distribution(model, &c).unwrap() {
                let mass = w * p.value();
                if succ.is_empty() {
                    out[succ.state.0][n] += mass;
                } else {
                    *next.entry(succ).or_default() += mass;
                }
            }
        }
        current = next;
    }
    out
}

pub fn config(p: usize, stack: &[usize]) -> Configuration {
    Configuration::new(StateId(p), stack.iter().map(|&x| SymbolId(x)).collect())
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}
