//! Task streams, training loops, baselines, metrics and throughput measurement.

pub mod data;
pub mod metrics;
pub mod objectives;
pub mod stream;
pub mod train;
pub mod run;
pub mod bench;
pub mod report;
pub mod gradcheck;
pub mod checks;
