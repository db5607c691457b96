//! Mean-survival network meta-analysis engine.
//!
//! Per-arm survival curves are extrapolated with models anchored to a
//! projected general-population cohort, integrated to mean survival time
//! (MST), differenced into life-years gained (LYG) and synthesized across a
//! treatment network with a power-likelihood random-effects model. The
//! posterior then feeds Bayes-rule, LaEV, GRADE-style and cost-effectiveness
//! decisions.

pub mod data_io;
pub mod decision;
pub mod error;
pub mod inference;
pub mod mortality;
pub mod mst;
pub mod nma;
pub mod pipeline;
pub mod plot;
pub mod simharness;
pub mod survmodels;

pub use error::{Error, Result};
