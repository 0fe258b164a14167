//! Fault classification pipeline for multichannel vibration series.

pub mod config;
pub mod dataset;
pub mod eda;
pub mod ensemble;
mod error;
pub mod eval;
pub mod io;
pub mod linear;
pub mod minirocket;
pub mod models;
pub mod synthgen;

pub use error::{Error, Result};
