//! Termination-time analysis for probabilistic pushdown automata (pPDA).
//!
//! The pipeline: parse a model ([`model`]), compute termination
//! probabilities by Newton iteration ([`termination`]), turn the pPDA into an
//! equivalent stateless pBPA ([`transform`]), compute expected termination
//! times ([`moments`]) and classify the tail of the termination time into one
//! of three regimes with explicit bound curves ([`bounds`]). Everything can
//! be cross-checked against exact distributions and a seeded simulator
//! ([`distribution`]).

pub mod bounds;
pub mod distribution;
pub mod graph;
mod linalg;
pub mod model;
pub mod moments;
pub mod termination;
pub mod transform;

pub use model::{
    parse_model, serialize, step_distribution, validate, Configuration, ModelKind, ParseError, Pda, Prob, Rule,
    StateId, SymbolId, Target, Triple, Violation,
};
