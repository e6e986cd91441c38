//! Hirschfeld-Gebelein-Rényi maximal correlation: a neural estimator for
//! sample batches and an exact oracle for finite discrete pairs.

mod estimator;
pub mod jacobi;
mod oracle;

pub use estimator::{held_out_hgr, FitProtocol, HgrConfig, HgrEstimator, MIN_BATCH};
pub use oracle::{hgr_oracle, monotonicity_check, DiscreteJoint, Joint3, MonotonicityOutcome};
