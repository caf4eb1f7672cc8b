//! Scenario harness: wires the simulated chain, the light client, channels,
//! the loan contract and the staker pool together, drives actor strategies
//! over a virtual clock and checks the resulting payoffs.

use thiserror::Error;

use crate::commitments::Hash256;

pub mod report;
mod runner;
pub mod scenario;
pub mod suites;

pub use report::{verify_report, FinalState, Format, Payout, Record, Report};
pub use runner::{run_scenario, BORROWER, LENDER};
pub use scenario::{
    Action, ActionKind, EpochSpec, Expectation, GenesisSpec, LoanSpec, PoolBorrowerSpec, PoolSpec, PricePoint,
    Scenario, StakerSpec, Strategy,
};
pub use suites::{premise_holds, rationality, run_suite, spv_demo, Rationality, SUITES};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("{step} failed: {message}")]
    Protocol { step: String, message: String },
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("report digest {claimed} does not match recomputed {actual}")]
    DigestMismatch { claimed: Hash256, actual: Hash256 },
    #[error("{} expectation(s) failed: {}", .0.len(), .0.join("; "))]
    ExpectationFailed(Vec<String>),
    #[error("unknown suite {0}")]
    UnknownSuite(String),
}
