//! Pipeline orchestration for the `lung-detr` command: a synthetic corpus
//! generator, the shared configuration and one function per subcommand.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod synth;
