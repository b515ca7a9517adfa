pub mod checks;
pub mod graph;
pub mod metrics;
pub mod workload;
pub mod flowpath;
pub mod feeopt;
pub mod oracle;
pub mod protocol;
pub mod router;
pub mod simnet;
