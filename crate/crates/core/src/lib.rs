//! Deterministic discrete-event simulator of operator migration in
//! distributed stream processing.

pub mod algorithms;
pub mod cli;
pub mod decision;
pub mod metrics;
pub mod protocol;
pub mod scenario;
pub mod simnet;
pub mod statemgmt;
pub mod streamcore;
pub mod workload;
