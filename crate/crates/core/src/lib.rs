//! Task allocation across local terminals, small cells and a macro cell by
//! parallel consensus ADMM, with an exhaustive oracle for small instances.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod global;
pub mod linalg;
pub mod local;
pub mod num;
pub mod oracle;
pub mod rounding;
pub mod scenario;

pub use error::{Error, Result};
pub use num::Real;

pub type ScenarioF64 = scenario::Scenario<f64>;
pub type PlacementF64 = cost::Placement<f64>;
pub type SplitAllocationF64 = cost::SplitAllocation<f64>;
pub type UtilityWeightsF64 = cost::UtilityWeights<f64>;
pub type SolverConfigF64 = admm::SolverConfig<f64>;
pub type RunOutcomeF64 = admm::RunOutcome<f64>;
pub type OracleResultF64 = oracle::OracleResult<f64>;
