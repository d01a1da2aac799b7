mod common;

use common::{ab, config, load, propagate};
use pptail::distribution::{exact_distribution_bpa, exact_distribution_pda};
use pptail::moments::{conditional_expectations, Expectation};
use pptail::termination::{termination_probs, DEFAULT_TOL};
use pptail::transform::{terminating_part, to_bpa};
use pptail::{parse_model, serialize, validate, Pda, StateId, SymbolId, Target, Triple};
use proptest::prelude::*;

fn row_sums_ok(m: &Pda) {
    for x in m.symbol_ids() {
        let total: f64 = m.symbol_rules(x).map(|r| r.prob.value()).sum();
        assert!((total - 1.0).abs() <= 1e-9, "{}: {total}", m.symbol_name(x));
    }
}

/// Conditional pPDA distribution against the terminating part of Δ•.
fn check_distribution_transfer(m: &Pda, n_max: usize, tol: f64) {
    let t = termination_probs(m, DEFAULT_TOL).unwrap();
    let res = to_bpa(m, &t).unwrap();
    let part = terminating_part(&res);
    for (i, sym) in res.symbols[..res.num_terminating].iter().enumerate() {
        let pda = exact_distribution_pda(m, &t, sym.triple, n_max).unwrap();
        let bpa = exact_distribution_bpa(&part, &[SymbolId(i)], n_max).unwrap();
        for (n, (a, b)) in pda.conditional_mass().iter().zip(&bpa.mass).enumerate() {
            assert!((a - b).abs() <= tol, "{}: n = {n}: {a} vs {b}", sym.display);
        }
    }
}

#[test]
fn distributions_transfer_on_bundled_models() {
    for name in ["tree.ppda", "ab.ppda", "intro.ppda"] {
        check_distribution_transfer(&load(name), 30, 1e-9);
    }
}

#[test]
fn pda_dynamic_programme_matches_propagation() {
    let m = load("tree.ppda");
    let t = termination_probs(&m, DEFAULT_TOL).unwrap();
    let brute = propagate(&m, config(0, &[0]), 18);
    for q in [1, 2] {
        let d = exact_distribution_pda(&m, &t, Triple::terminating(StateId(0), SymbolId(0), StateId(q)), 18).unwrap();
        for n in 0..=18 {
            assert!((d.mass[n] - brute[q][n]).abs() < 1e-15);
        }
    }
}

#[test]
fn tree_expectation_table() {
    let m = load("tree.ppda");
    let t = termination_probs(&m, DEFAULT_TOL).unwrap();
    let ce = conditional_expectations(&m, &t).unwrap();
    let expected = [
        ("q", "A", "r0", 7.155113),
        ("q", "A", "r1", 7.172218),
        ("q", "O", "r0", 7.172218),
        ("q", "O", "r1", 7.155113),
        ("r0", "A", "r0", 1.0),
        ("r1", "A", "r0", 8.172218),
        ("r1", "A", "r1", 8.155113),
        ("r1", "O", "r1", 1.0),
        ("r0", "O", "r1", 8.172218),
        ("r0", "O", "r0", 8.155113),
    ];
    assert_eq!(ce.len(), expected.len());
    for (p, x, q, e) in expected {
        let triple = Triple::terminating(m.state_id(p).unwrap(), m.symbol_id(x).unwrap(), m.state_id(q).unwrap());
        let Expectation::Finite(v) = ce[&triple] else {
            panic!("{p}{x}{q} infinite")
        };
        assert!((v - e).abs() < 1e-5, "{p}{x}{q}: {v} vs {e}");
    }
}

#[test]
fn tree_transformed_alphabet() {
    let m = load("tree.ppda");
    let t = termination_probs(&m, DEFAULT_TOL).unwrap();
    let res = to_bpa(&m, &t).unwrap();
    assert_eq!(res.num_terminating, 10);
    // Every (state, symbol) pair of the tree terminates almost surely except
    // r0A/r1O, which pop at once; none diverges.
    assert!(res.symbols[10..].iter().all(|s| s.triple.target == Target::Diverge));
    row_sums_ok(&res.bpa);
    assert!(validate(&res.bpa).is_empty());
    assert_eq!(res.provenance.len(), res.bpa.rules().len());
}

#[test]
fn ab_probabilities_for_grid() {
    for (a, b) in [((11, 20), (9, 10)), ((3, 4), (3, 5))] {
        let m = ab(a, b);
        let t = termination_probs(&m, DEFAULT_TOL).unwrap();
        let res = to_bpa(&m, &t).unwrap();
        let (af, bf) = (a.0 as f64 / a.1 as f64, b.0 as f64 / b.1 as f64);
        let name = |x: SymbolId| res.bpa.symbol_name(x).to_string();
        for r in res.bpa.rules() {
            let lhs = name(r.lhs_symbol);
            let rhs: Vec<String> = r.rhs.iter().map(|y| name(*y)).collect();
            let expected = match (lhs.as_str(), rhs.len()) {
                ("p.X.q" | "p.X.up", 2) => 1.0 - bf,
                ("p.X.q" | "p.X.up", _) => bf,
                ("q.X.p" | "q.X.up", 2) => 1.0 - af,
                _ => af,
            };
            assert!((r.prob.value() - expected).abs() < 1e-9, "{lhs} -> {rhs:?}");
        }
        assert_eq!(res.bpa.rules().len(), 8);
        row_sums_ok(&res.bpa);
    }
}

#[test]
fn terminating_symbols_terminate() {
    for name in ["tree.ppda", "ab.ppda", "intro.ppda"] {
        let m = load(name);
        let t = termination_probs(&m, DEFAULT_TOL).unwrap();
        let part = terminating_part(&to_bpa(&m, &t).unwrap());
        let tt = termination_probs(&part, DEFAULT_TOL).unwrap();
        for x in part.symbol_ids() {
            assert!(tt.symbol_prob(x) > 1.0 - 1e-9, "{name}");
        }
    }
}

#[test]
fn transformed_models_round_trip() {
    for name in ["tree.ppda", "ab.ppda", "intro.ppda"] {
        let m = load(name);
        let t = termination_probs(&m, DEFAULT_TOL).unwrap();
        let res = to_bpa(&m, &t).unwrap();
        let back = parse_model(&serialize(&res.bpa)).unwrap();
        assert_eq!(back.alphabet(), res.bpa.alphabet());
        assert_eq!(back.rules().len(), res.bpa.rules().len());
        for (a, b) in back.rules().iter().zip(res.bpa.rules()) {
            assert_eq!((a.lhs_symbol, &a.rhs), (b.lhs_symbol, &b.rhs));
            assert!((a.prob.value() - b.prob.value()).abs() <= 1e-12);
        }
    }
}

fn arb_pda() -> impl Strategy<Value = Pda> {
    // Two states, two symbols, two or three rules per head with random
    // right-hand sides and weights.
    let rule = (0usize..2, prop::collection::vec(0usize..2, 0..=2), 1u32..5);
    prop::collection::vec(prop::collection::vec(rule, 2..=3), 4).prop_filter_map("duplicate rules", |rows| {
        let mut text = String::from("pda\nstates: p q\nalphabet: X Y\n");
        let names = ["X", "Y"];
        let states = ["p", "q"];
        for (head, row) in rows.iter().enumerate() {
            let total: u32 = row.iter().map(|r| r.2).sum();
            let mut seen = Vec::new();
            for (q, word, w) in row {
                if seen.contains(&(q, word)) {
                    return None;
                }
                seen.push((q, word));
                let word: Vec<&str> = word.iter().map(|&y| names[y]).collect();
                text.push_str(&format!(
                    "rule: {} {} -> {} {} : {w}/{total}\n",
                    states[head / 2],
                    names[head % 2],
                    states[*q],
                    word.join(" ")
                ));
            }
        }
        parse_model(&text).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transfer_holds_on_random_models(m in arb_pda()) {
        let t = termination_probs(&m, DEFAULT_TOL).unwrap();
        let res = to_bpa(&m, &t).unwrap();
        let part = terminating_part(&res);
        for (i, sym) in res.symbols[..res.num_terminating].iter().enumerate() {
            let total = t.get(&sym.triple);
            prop_assume!(total > 1e-6);
            let pda = exact_distribution_pda(&m, &t, sym.triple, 14).unwrap();
            let bpa = exact_distribution_bpa(&part, &[SymbolId(i)], 14).unwrap();
            for (a, b) in pda.conditional_mass().iter().zip(&bpa.mass) {
                prop_assert!((a - b).abs() <= 1e-8);
            }
        }
        for x in res.bpa.symbol_ids() {
            let total: f64 = res.bpa.symbol_rules(x).map(|r| r.prob.value()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9, "{}: {total}", res.bpa.symbol_name(x));
        }
    }
}
