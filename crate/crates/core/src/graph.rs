//! The dependence relation between stack symbols and its SCC structure.

use std::collections::BTreeSet;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::Serialize;

use crate::model::{reachable_heads, Pda, StateId, SymbolId};

#[derive(Debug, Clone, Serialize)]
pub struct DependenceInfo {
    /// `direct_edges[X]`: symbols occurring in some right-hand side of `X`.
    pub direct_edges: Vec<BTreeSet<SymbolId>>,
    /// SCCs in reverse topological order: bottom SCCs come first.
    pub sccs: Vec<Vec<SymbolId>>,
    pub scc_of: Vec<usize>,
    pub scc_dag_edges: BTreeSet<(usize, usize)>,
    /// Longest top-to-bottom path in the SCC DAG, counted in edges, plus one.
    pub height: usize,
    /// `reachable_from[X]`: every `Y` that `X` depends on (one or more steps).
    pub reachable_from: Vec<BTreeSet<SymbolId>>,
}

impl DependenceInfo {
    pub fn depends_on(&self, x: SymbolId, y: SymbolId) -> bool {
        self.reachable_from[x.0].contains(&y)
    }

    /// Whether some symbol depends on itself.
    pub fn has_cycle(&self) -> bool {
        self.reachable_from
            .iter()
            .enumerate()
            .any(|(x, reach)| reach.contains(&SymbolId(x)))
    }
}

/// Dependence relation over symbols. For multi-state models the control
/// states are ignored; callers normally transform to a pBPA first.
pub fn dependence(model: &Pda) -> DependenceInfo {
    let n = model.num_symbols();
    let mut direct_edges = vec![BTreeSet::new(); n];
    for r in model.rules() {
        direct_edges[r.lhs_symbol.0].extend(r.rhs.iter().copied());
    }

    let mut graph = DiGraph::<(), ()>::with_capacity(n, 0);
    let nodes: Vec<NodeIndex> = (0..n).map(|_| graph.add_node(())).collect();
    for (x, ys) in direct_edges.iter().enumerate() {
        for y in ys {
            graph.add_edge(nodes[x], nodes[y.0], ());
        }
    }
    let sccs: Vec<Vec<SymbolId>> = tarjan_scc(&graph)
        .into_iter()
        .map(|c| {
            let mut c: Vec<SymbolId> = c.into_iter().map(|i| SymbolId(i.index())).collect();
            c.sort();
            c
        })
        .collect();
    let mut scc_of = vec![0; n];
    for (i, c) in sccs.iter().enumerate() {
        for x in c {
            scc_of[x.0] = i;
        }
    }
    let mut scc_dag_edges = BTreeSet::new();
    for (x, ys) in direct_edges.iter().enumerate() {
        for y in ys {
            if scc_of[x] != scc_of[y.0] {
                scc_dag_edges.insert((scc_of[x], scc_of[y.0]));
            }
        }
    }

    // Reverse topological order: every edge goes from a later SCC to an
    // earlier one, so a forward sweep sees successors first.
    let mut longest = vec![0usize; sccs.len()];
    for i in 0..sccs.len() {
        longest[i] = scc_dag_edges
            .iter()
            .filter(|(from, _)| *from == i)
            .map(|(_, to)| longest[*to] + 1)
            .max()
            .unwrap_or(0);
    }
    let height = longest.iter().max().map_or(0, |l| l + 1);

    let mut reachable_from = vec![BTreeSet::new(); n];
    for (i, comp) in sccs.iter().enumerate() {
        let mut reach = BTreeSet::new();
        let cyclic = comp.len() > 1 || direct_edges[comp[0].0].contains(&comp[0]);
        if cyclic {
            reach.extend(comp.iter().copied());
        }
        for x in comp {
            for y in &direct_edges[x.0] {
                if scc_of[y.0] != i {
                    reach.insert(*y);
                    reach.extend(reachable_from[y.0].iter().copied());
                }
            }
        }
        for x in comp {
            reachable_from[x.0] = reach.clone();
        }
    }

    DependenceInfo {
        direct_edges,
        sccs,
        scc_of,
        scc_dag_edges,
        height,
        reachable_from,
    }
}

/// The sub-model over `start` and every symbol `start` depends on. Rows are
/// copied unchanged; symbols keep their relative order.
pub fn restrict_to_reachable(model: &Pda, start: SymbolId) -> Pda {
    let info = dependence(model);
    let mut keep: BTreeSet<SymbolId> = info.reachable_from[start.0].clone();
    keep.insert(start);
    restrict_to_symbols(model, &keep, Some(start))
}

pub(crate) fn restrict_to_symbols(model: &Pda, keep: &BTreeSet<SymbolId>, start: Option<SymbolId>) -> Pda {
    let mut renumber = vec![None; model.num_symbols()];
    let mut alphabet = Vec::new();
    for x in keep {
        renumber[x.0] = Some(SymbolId(alphabet.len()));
        alphabet.push(model.symbol_name(*x).to_string());
    }
    let rules = model
        .rules()
        .iter()
        .filter(|r| keep.contains(&r.lhs_symbol))
        .map(|r| {
            let mut r = r.clone();
            r.lhs_symbol = renumber[r.lhs_symbol.0].expect("kept");
            r.rhs = r
                .rhs
                .iter()
                .map(|y| renumber[y.0].expect("right-hand sides of kept symbols are kept"))
                .collect();
            r
        })
        .collect();
    Pda::new(model.kind(), model.states().to_vec(), alphabet, rules)
        .with_start(start.map(|s| (StateId(0), renumber[s.0].expect("start is kept"))))
        .with_row_tolerance(model.row_tolerance())
}

/// Least rule probability; restricted to rows reachable from the model's
/// start when one is declared.
pub fn p_min(model: &Pda) -> f64 {
    match model.start() {
        None => model.min_rule_probability(),
        Some(start) => reachable_heads(model, start)
            .into_iter()
            .flat_map(|(p, x)| model.rules_for(p, x))
            .map(|r| r.prob.value())
            .fold(1.0, f64::min),
    }
}

/// Structural bounded-termination test: the dependence relation restricted
/// to the symbols reachable from `start` is acyclic. Then every derivation
/// tree has depth at most `|Γ|`, hence fewer than `2^|Γ|` internal nodes.
pub fn is_bounded_case(model: &Pda, start: SymbolId) -> bool {
    let info = dependence(model);
    let mut relevant = info.reachable_from[start.0].clone();
    relevant.insert(start);
    relevant.iter().all(|x| !info.depends_on(*x, *x))
}
