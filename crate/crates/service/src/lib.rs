//! Command-line and live-service shell around `polswitch-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod protocol;
pub mod serve;
