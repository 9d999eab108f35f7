//! Config-driven pipeline around the `nirom` reduced order models.
//!
//! A single JSON document describes the input data, the POD truncation, one
//! block per latent engine and the prediction grid. Each stage reads and
//! writes fixed file names inside the output directory so the stages can be
//! run one at a time or chained with [`pipeline::cmd_run`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{PipelineConfig, DEFAULT_OUT_DIR, OUT_DIR_ENV};
pub use error::{CliError, CliResult};
pub use pipeline::{
    cmd_compare, cmd_decompose, cmd_fit, cmd_generate, cmd_predict, cmd_report, cmd_run, Context, Method,
};
