//! Trace-driven, cycle-driven simulator for clustered GPU L1/L2 cache
//! hierarchies.
//!
//! The simulator models four L1 organizations over the same cluster of
//! cores (private, remote-sharing, decoupled-sharing, and a shared design
//! with an aggregated tag array), a banked sector L1 data array with MSHRs,
//! intra-cluster and cores-to-L2 crossbars with flit-level occupancy, and a
//! partitioned L2 backed by a fixed-latency memory. Runs are deterministic:
//! identical (config, trace, seed) triples produce byte-identical reports.

pub mod arch;
pub mod core;
pub mod engine;
pub mod l1cache;
pub mod l2mem;
pub mod noc;
pub mod report;
pub mod tagarray;
pub mod workload;

pub use crate::arch::Architecture;
pub use crate::core::{decode_address, AddressParts, CacheGeometry, MemRequest, SimConfig};
pub use crate::engine::{run, RunOptions, RunResult};
pub use crate::report::SimReport;
pub use crate::workload::TraceRecord;
