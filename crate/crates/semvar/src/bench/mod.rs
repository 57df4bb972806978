//! Benchmark harness: synthetic workloads, the virtual-time driver, metrics
//! and reports.

pub mod checks;
pub mod corpus;
pub mod driver;
pub mod metrics;
pub mod report;
pub mod workload;

pub use driver::{parse_policy, policy_name, run_experiment, RunOutput};
pub use metrics::MetricsReport;
pub use workload::{generate_workload, InvalidSpec, WorkloadKind, WorkloadSpec};
