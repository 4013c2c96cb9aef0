//! Tabular risk-averse policy gradient with expected conditional risk measures.
//!
//! The ECRM objective is rewritten as a risk-neutral MDP over `(s, η)`
//! states and `(a, η')` actions ([`risk::build_augmented`]); [`exact`] then
//! evaluates two-part policies and their gradients in closed form,
//! [`optim`] runs the exact-gradient methods and [`reinforce`] the sampled one.

// Index loops mirror the tensor formulas; negated comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exact;
pub mod mdp;
pub mod optim;
pub mod policy;
pub mod reinforce;
pub mod risk;
pub mod table;
pub mod verify;

pub use error::{Error, Result};
pub use mdp::{RngStream, TabularMdp};
pub use policy::{ParamKind, PolicyProbabilities, TwoPartPolicy};
pub use risk::{AugmentedMdp, RiskSpec};
pub use table::Table;
