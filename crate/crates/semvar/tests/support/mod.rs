pub mod invariants;
pub mod sched_oracle;
