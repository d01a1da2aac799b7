//! Acceptance gate: one line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use pptail::bounds::{classify, classify_with_grid, g_function, Case};
use pptail::distribution::{exact_distribution_bpa, exact_distribution_pda, head_counts, Head};
use pptail::graph::{dependence, p_min, restrict_to_reachable};
use pptail::moments::{moment_matrix, Expectation};
use pptail::termination::{termination_probs, DEFAULT_TOL};
use pptail::transform::{cone_vector, is_u_progressive, make_u_progressive, terminating_part, to_bpa};
use pptail::{parse_model, Configuration, Pda, StateId, SymbolId, Triple};
use pptail_cli::{analyze, load};

const EXPECTATION_TOL: f64 = 1e-5;
const PROBABILITY_TOL: f64 = 1e-10;
const TRANSFER_TOL: f64 = 1e-9;
const TRANSFER_HORIZON: usize = 30;
const HEAD_STEPS: usize = 20;
const HEAD_SAMPLES: usize = 100_000;
const STD_ERRORS: f64 = 4.0;
const SANDWICH_SLACK: f64 = 1e-12;
const SANDWICH_HORIZON: usize = 400;
const SQRT_BAND: (f64, f64) = (0.3, 1.0);
const SLOPE_SLACK: f64 = 0.1;
const RADIUS_TOL: f64 = 1e-9;
const CONE_TOL: f64 = 1e-9;
const SPEED_HORIZON: usize = 40;
const FD_REL_TOL: f64 = 1e-6;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn models_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn model(name: &str) -> Pda {
    load(&models_dir().join(name)).expect("bundled model loads")
}

fn bpa(text: &str) -> Pda {
    parse_model(&format!("bpa\n{text}")).expect("inline model parses")
}

fn ab(a: (i64, i64), b: (i64, i64)) -> Pda {
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
    .expect("ab model parses")
}

fn terminating(name: &str) -> Pda {
    let m = model(name);
    let t = termination_probs(&m, DEFAULT_TOL).expect("converges");
    terminating_part(&to_bpa(&m, &t).expect("transforms"))
}

const SUBCRITICAL: &str = "alphabet: X\nrule: X -> : 3/4\nrule: X -> X X : 1/4\n";

fn tree_expectations() -> Check {
    let report = analyze(&model("tree.ppda"), Some("q.A"), DEFAULT_TOL, "tree.ppda").map_err(|e| e.to_string())?;
    let expected = [
        ("q.A.r0", 7.155113),
        ("q.A.r1", 7.172218),
        ("q.O.r0", 7.172218),
        ("q.O.r1", 7.155113),
        ("r0.A.r0", 1.0),
        ("r1.A.r0", 8.172218),
        ("r1.A.r1", 8.155113),
        ("r1.O.r1", 1.0),
        ("r0.O.r1", 8.172218),
        ("r0.O.r0", 8.155113),
    ];
    ensure!(report.expectations.len() == 10, "{} expectations", report.expectations.len());
    let mut worst: f64 = 0.0;
    for (k, e) in expected {
        let Some(Expectation::Finite(v)) = report.expectations.get(k) else {
            return Err(format!("{k} missing or infinite"));
        };
        worst = worst.max((v - e).abs());
        ensure!((v - e).abs() <= EXPECTATION_TOL, "{k}: {v} vs {e}");
    }
    let case2 = report.tails.iter().filter(|t| t.case == Case::Exponential).count();
    ensure!(case2 == 2, "expected case 2 for both q.A triples");
    Ok(format!("10 values, max error {worst:.1e}"))
}

fn symbolic_probabilities() -> Check {
    let grid = [(11, 20), (3, 5), (3, 4), (9, 10)];
    let (p, q, x) = (StateId(0), StateId(1), SymbolId(0));
    let mut worst: f64 = 0.0;
    for a in grid {
        for b in grid {
            let t = termination_probs(&ab(a, b), DEFAULT_TOL).map_err(|e| e.to_string())?;
            let (af, bf) = (a.0 as f64 / a.1 as f64, b.0 as f64 / b.1 as f64);
            let errors = [
                t.prob(p, x, q) - (1.0 - af) / bf,
                t.prob(q, x, p) - (1.0 - bf) / af,
                t.prob(p, x, p),
                t.prob(q, x, q),
            ];
            for e in errors {
                worst = worst.max(e.abs());
            }
            ensure!(worst <= PROBABILITY_TOL, "a = {af}, b = {bf}: error {worst:e}");
        }
    }
    Ok(format!("16 grid points, max error {worst:.1e}"))
}

fn transfer() -> Check {
    let mut worst: f64 = 0.0;
    let mut triples = 0;
    for name in ["tree.ppda", "ab.ppda", "intro.ppda"] {
        let m = model(name);
        let t = termination_probs(&m, DEFAULT_TOL).map_err(|e| e.to_string())?;
        let res = to_bpa(&m, &t).map_err(|e| e.to_string())?;
        let part = terminating_part(&res);
        for (i, sym) in res.symbols[..res.num_terminating].iter().enumerate() {
            let lhs = exact_distribution_pda(&m, &t, sym.triple, TRANSFER_HORIZON).map_err(|e| e.to_string())?;
            let rhs = exact_distribution_bpa(&part, &[SymbolId(i)], TRANSFER_HORIZON).map_err(|e| e.to_string())?;
            for (n, (a, b)) in lhs.conditional_mass().iter().zip(&rhs.mass).enumerate() {
                worst = worst.max((a - b).abs());
                ensure!((a - b).abs() <= TRANSFER_TOL, "{name} {} n = {n}: {a} vs {b}", sym.display);
            }
            triples += 1;
        }
    }
    Ok(format!("{triples} triples, n <= {TRANSFER_HORIZON}, max error {worst:.1e}"))
}

fn frequencies(counts: &BTreeMap<Head, usize>, map: impl Fn(Head) -> Head) -> BTreeMap<Head, f64> {
    let total: usize = counts.values().sum();
    let mut out = BTreeMap::new();
    for (h, c) in counts {
        *out.entry(map(*h)).or_default() += *c as f64 / total as f64;
    }
    out
}

fn projection() -> Check {
    let m = model("ab.ppda");
    let (p, x) = m.start().expect("start");
    let t = termination_probs(&m, DEFAULT_TOL).map_err(|e| e.to_string())?;
    ensure!(t.diverge(p, x) > 0.0, "start terminates almost surely");
    let res = to_bpa(&m, &t).map_err(|e| e.to_string())?;
    let mut starts = Vec::new();
    let targets = m.state_ids().map(|q| Triple::terminating(p, x, q)).chain([Triple::diverging(p, x)]);
    for triple in targets {
        if let Some(sym) = res.symbol_of(&triple) {
            starts.push((Configuration::new(StateId(0), vec![sym]), t.get(&triple)));
        }
    }
    let original = head_counts(&m, &[(Configuration::new(p, vec![x]), 1.0)], HEAD_STEPS, HEAD_SAMPLES, 1)
        .map_err(|e| e.to_string())?;
    let transformed = head_counts(&res.bpa, &starts, HEAD_STEPS, HEAD_SAMPLES, 2).map_err(|e| e.to_string())?;
    let project = |h: Head| {
        h.map(|(_, sym)| {
            let tr = res.triple_of(sym);
            (tr.p, tr.x)
        })
    };
    let n = HEAD_SAMPLES as f64;
    let mut worst: f64 = 0.0;
    for k in 0..=HEAD_STEPS {
        let a = frequencies(&original[k], |h| h);
        let b = frequencies(&transformed[k], project);
        for head in a.keys().chain(b.keys()) {
            let (fa, fb) = (a.get(head).copied().unwrap_or(0.0), b.get(head).copied().unwrap_or(0.0));
            let se = ((fa * (1.0 - fa) + fb * (1.0 - fb)) / n).sqrt().max(1.0 / n);
            worst = worst.max((fa - fb).abs() / se);
            ensure!((fa - fb).abs() <= STD_ERRORS * se, "step {k} head {head:?}: {fa} vs {fb}");
        }
    }
    Ok(format!("k <= {HEAD_STEPS}, {HEAD_SAMPLES} samples, max deviation {worst:.2} SE"))
}

fn exponential_sandwich() -> Check {
    let mut subjects = vec![("subcritical".to_string(), bpa(SUBCRITICAL), SymbolId(0))];
    let part = terminating("tree.ppda");
    for x in part.symbol_ids() {
        subjects.push((part.symbol_name(x).to_string(), part.clone(), x));
    }
    let mut checked = 0;
    for (name, m, x) in subjects {
        let report = classify(&m, x).map_err(|e| e.to_string())?;
        if report.case == Case::Bounded {
            continue;
        }
        ensure!(report.case == Case::Exponential, "{name}: case {}", report.case.number());
        let c = report.exponential.clone().expect("case 2 constants");
        let d = exact_distribution_bpa(&m, &[x], SANDWICH_HORIZON).map_err(|e| e.to_string())?;
        for n in (c.threshold.ceil() as usize)..=SANDWICH_HORIZON {
            let tail = d.tail(n).map_err(|e| e.to_string())?;
            let lower = report.p_min.powi(n as i32);
            let upper = ((c.threshold - n as f64) / (2.0 * c.b * c.b)).exp();
            ensure!(lower <= tail && tail <= upper + SANDWICH_SLACK, "{name} n = {n}: {lower} <= {tail} <= {upper}");
        }
        checked += 1;
    }
    Ok(format!("{checked} starts, 2E <= n <= {SANDWICH_HORIZON}"))
}

fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

fn polynomial_tails() -> Check {
    let m = model("delta1.bpa");
    let d = exact_distribution_bpa(&m, &[SymbolId(0)], 4096).map_err(|e| e.to_string())?;
    let mut scaled = Vec::new();
    for k in [4, 6, 8, 10, 12] {
        let n = 1usize << k;
        let tail = d.tail(n).map_err(|e| e.to_string())?;
        let s = tail * (n as f64).sqrt();
        ensure!(SQRT_BAND.0 <= s && s <= SQRT_BAND.1, "delta1 n = {n}: tail·√n = {s}");
        scaled.push(format!("{s:.3}"));
    }
    for n in 1..=4096 {
        let tail = d.tail(n).map_err(|e| e.to_string())?;
        ensure!(tail <= 144.0 / (n as f64).sqrt(), "delta1 n = {n}: {tail} > 144/√n");
    }
    let mut slopes = Vec::new();
    for h in [2i32, 3] {
        let m = model(&format!("delta{h}.bpa"));
        let top = SymbolId(h as usize - 1);
        let report = classify_with_grid(&m, top, &[]).map_err(|e| e.to_string())?;
        let d2 = report.polynomial.as_ref().expect("case 3 constants").d2;
        let d = exact_distribution_bpa(&m, &[top], 1 << 12).map_err(|e| e.to_string())?;
        let points: Vec<(f64, f64)> = (6..=12)
            .map(|k| 1usize << k)
            .map(|n| (n as f64, d.tail(n).expect("within horizon")))
            .collect();
        let slope = log_log_slope(&points);
        let (lo, hi) = (-1.0 / 2f64.powi(h) - SLOPE_SLACK, -d2 + SLOPE_SLACK);
        ensure!(lo <= slope && slope <= hi, "delta{h}: slope {slope} not in [{lo}, {hi}]");
        slopes.push(format!("h={h} {slope:.3}"));
    }
    Ok(format!("tail·√n = [{}], slopes {}", scaled.join(", "), slopes.join(", ")))
}

fn classification() -> Check {
    let m = model("acyclic.bpa");
    let report = classify(&m, SymbolId(0)).map_err(|e| e.to_string())?;
    ensure!(report.case == Case::Bounded, "acyclic: case {}", report.case.number());
    let limit = 1usize << report.gamma_size;
    let d = exact_distribution_bpa(&m, &[SymbolId(0)], 4 * limit).map_err(|e| e.to_string())?;
    ensure!(d.mass[limit..].iter().all(|&v| v == 0.0), "acyclic: mass beyond 2^|Γ|");

    let mut subcritical = vec![("subcritical".to_string(), bpa(SUBCRITICAL), SymbolId(0))];
    let part = terminating("ab.ppda");
    for x in part.symbol_ids() {
        subcritical.push((part.symbol_name(x).to_string(), part.clone(), x));
    }
    for (name, m, x) in subcritical {
        let r = classify(&m, x).map_err(|e| e.to_string())?;
        ensure!(r.case == Case::Exponential, "{name}: case {}", r.case.number());
    }
    for h in 1..=4 {
        let m = model(&format!("delta{h}.bpa"));
        let start = m.start().expect("start").1;
        let r = classify_with_grid(&m, start, &[]).map_err(|e| e.to_string())?;
        ensure!(r.case == Case::Polynomial, "delta{h}: case {}", r.case.number());
        ensure!((r.spectral_radius - 1.0).abs() <= RADIUS_TOL, "delta{h}: ρ = {}", r.spectral_radius);
    }
    Ok("acyclic case 1, subcritical case 2, delta1..4 case 3".into())
}

fn apply(a: &nalgebra::DMatrix<f64>, u: &[f64]) -> Vec<f64> {
    (0..u.len()).map(|i| (0..u.len()).map(|j| a[(i, j)] * u[j]).sum()).collect()
}

fn appendix() -> Check {
    let mut all: Vec<(String, Pda)> = ["acyclic", "subcritical", "delta1", "delta2", "delta3", "delta4"]
        .iter()
        .map(|n| (n.to_string(), model(&format!("{n}.bpa"))))
        .collect();
    for n in ["tree.ppda", "ab.ppda", "intro.ppda"] {
        all.push((n.to_string(), terminating(n)));
    }
    all.push((
        "relay".into(),
        bpa("alphabet: X Y\nrule: X -> Y : 1\nrule: Y -> X X : 1/2\nrule: Y -> : 1/2\n"),
    ));

    for (name, m) in &all {
        let u = cone_vector(m).map_err(|e| e.to_string())?;
        let (lo, hi) = u.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        ensure!(lo > 0.0, "{name}: u not positive");
        let bound = p_min(m).powi(m.num_symbols() as i32);
        ensure!(lo / hi >= bound - CONE_TOL, "{name}: u_min/u_max = {} < {bound}", lo / hi);
        for (x, au) in apply(&moment_matrix(m).block_diagonal(), &u).iter().enumerate() {
            ensure!(*au <= u[x] + CONE_TOL, "{name}: (A·u)[{x}] = {au} > {}", u[x]);
        }
    }

    let mut bottom = Vec::new();
    for (name, m) in &all {
        for x in m.symbol_ids() {
            let sub = restrict_to_reachable(m, x);
            if dependence(&sub).scc_dag_edges.is_empty() {
                bottom.push((format!("{name} from {}", m.symbol_name(x)), sub));
            }
        }
    }
    for (name, m) in &bottom {
        let u = cone_vector(m).map_err(|e| e.to_string())?;
        let out = make_u_progressive(m, &u).map_err(|e| e.to_string())?;
        ensure!(is_u_progressive(&out, &u), "{name}: not u-progressive");
        let bound = p_min(m).powi(m.num_symbols() as i32);
        ensure!(out.min_rule_probability() >= bound - 1e-12, "{name}: p_min' below p_min^|Γ|");
        let au = apply(&moment_matrix(m).a, &u);
        let a2u = apply(&moment_matrix(&out).a, &u);
        for i in 0..u.len() {
            ensure!(a2u[i] <= u[i] + CONE_TOL, "{name}: A'·u > u at {i}");
            if (au[i] - u[i]).abs() <= 1e-12 {
                ensure!((a2u[i] - u[i]).abs() <= CONE_TOL, "{name}: A'·u = u not preserved at {i}");
            }
        }
        let gamma = m.num_symbols();
        for x in m.symbol_ids() {
            let d = exact_distribution_bpa(m, &[x], SPEED_HORIZON + 1).map_err(|e| e.to_string())?;
            let d2 = exact_distribution_bpa(&out, &[x], SPEED_HORIZON + 1).map_err(|e| e.to_string())?;
            for a in 1..=SPEED_HORIZON {
                let slow = d.tail(a).expect("within horizon");
                let fast = d2.tail(a).expect("within horizon");
                let fast_scaled = d2.tail(a.div_ceil(gamma)).expect("within horizon");
                ensure!(fast <= slow + 1e-12 && slow <= fast_scaled + 1e-12, "{name}: speed sandwich at a = {a}");
            }
        }
        let u_min = lo_of(&u);
        let pmin = out.min_rule_probability();
        for x in out.symbol_ids() {
            let (g0, g0p, g0pp) = g_function(&out, &u, x, 0.0);
            ensure!((g0 - 1.0).abs() <= 1e-12 && g0p >= -1e-12, "{name}: g(0), g'(0)");
            ensure!(g0pp >= pmin * u_min * u_min / 4.0 - 1e-12, "{name}: g''(0) too small");
            for theta in [0.01, 0.1, 0.5, 1.0] {
                let (g, g1, g2) = g_function(&out, &u, x, theta);
                ensure!(g > 1.0 && g1 > g0p && g2 > 0.0, "{name}: g at θ = {theta}");
                let h = 1e-5;
                let (gp, g1p, _) = g_function(&out, &u, x, theta + h);
                let (gm, g1m, _) = g_function(&out, &u, x, theta - h);
                let fd1 = (gp - gm) / (2.0 * h);
                let fd2 = (g1p - g1m) / (2.0 * h);
                ensure!((fd1 - g1).abs() <= FD_REL_TOL * g1.abs().max(1.0), "{name}: g' {fd1} vs {g1}");
                ensure!((fd2 - g2).abs() <= FD_REL_TOL * g2.abs().max(1.0), "{name}: g'' {fd2} vs {g2}");
            }
        }
    }
    Ok(format!("{} models for the cone, {} bottom restrictions for the rest", all.len(), bottom.len()))
}

fn lo_of(u: &[f64]) -> f64 {
    u.iter().copied().fold(f64::INFINITY, f64::min)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = models_dir().join("delta1.bpa");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_pptail"))
            .arg("simulate")
            .arg(&model)
            .args(["--start", "X", "--samples", "20000", "--seed", "2024", "--cap", "100000", "--csv"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(status.status.success(), "simulate exited with {}", status.status);
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure!(outputs[0] == outputs[1], "CSV files differ");
    Ok(format!("{} identical bytes", outputs[0].len()))
}

/// Name, runtime limit and check.
type Criterion = (&'static str, Duration, fn() -> Check);

fn main() {
    let criteria: [Criterion; 9] = [
        ("tree expectations", Duration::from_secs(1), tree_expectations),
        ("symbolic termination probabilities", Duration::from_secs(1), symbolic_probabilities),
        ("transformation preserves distributions", Duration::from_secs(5), transfer),
        ("head-pair projection", Duration::from_secs(30), projection),
        ("case-2 sandwich", Duration::from_secs(5), exponential_sandwich),
        ("case-3 polynomial tails", Duration::from_secs(60), polynomial_tails),
        ("case classification", Duration::from_secs(5), classification),
        ("appendix properties", Duration::from_secs(10), appendix),
        ("simulation determinism", Duration::from_secs(30), determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= *limit => (true, d),
            Ok(d) => (false, format!("{d}; took {took:.2?}, limit {limit:?}")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {}: {} [{}] {} ({took:.2?})",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            name,
            detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
