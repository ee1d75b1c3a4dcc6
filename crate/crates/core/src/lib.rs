// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod io;
pub mod kinematics;
pub mod pipeline;
pub mod report;
pub mod seqmodel;
pub mod training;
pub mod wavegen;

pub use error::{Error, ErrorKind, Result};
