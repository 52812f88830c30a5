//! Reproducible experiment harness for nonlinear ICA by generalized
//! contrastive learning: configuration, single runs, segment sweeps and
//! identifiability checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod sweep;
pub mod theory;
