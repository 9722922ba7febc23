//! Independent oracles and the named invariant checks.

pub mod gradcheck;
pub mod instances;
mod naive;
mod suite;

pub use naive::naive_interpconv;
pub use suite::{
    checks, report_csv, run_invariant_suite, Check, CheckReport, Status, SuiteOptions,
    REPORT_HEADER,
};
