//! Verification harness for `oobheap`: trace replay against a shadow
//! oracle, stress workloads and security scenarios.

pub mod fill;
pub mod gen;
pub mod oracle;
pub mod replay;
pub mod report;
pub mod security;
pub mod stress;
pub mod trace;
