#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod error;
pub mod commands;
pub mod config;
pub mod fluctuations;
pub mod io;
pub mod linalg;
pub mod meanfield;
pub mod model;
pub mod simulator;

pub use error::{Error, Result};
