//! Command-line host for the VA-π pipeline: configuration, dataset and
//! checkpoint formats, stage orchestration, evaluation reports and the
//! comparison table.

// Config guards like `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod metrics;
pub mod pipeline;
pub mod report;
