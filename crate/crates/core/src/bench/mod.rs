// SPDX-License-Identifier: Apache-2.0

//! Benchmark scenarios, statistics and report files.

pub mod report;
pub mod scenario;
pub mod stats;

pub use report::{emit_report, ReportError};
pub use scenario::{run_scenario, RunFailure, RunOutcome, Scenario};
pub use stats::{SampleSet, Stats, StatsError};
