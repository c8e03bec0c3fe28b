//! Shared by the per-topic test targets and the acceptance report.
#![allow(dead_code)]

pub mod checks;
pub mod grad;
