//! HyperAdapt: patient-conditioned low-rank parameter adaptation on
//! desk-scale backbones, with subgroup performance and fairness reporting.

pub mod adapter;
pub mod attributes;
pub mod backbone;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod tensor;
pub mod train;
