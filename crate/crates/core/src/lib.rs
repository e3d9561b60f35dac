#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod config;
pub mod error;
pub mod eval;
pub mod mesh;
pub mod model;
pub mod numeric;
pub mod sim;
pub mod sparse;
pub mod spde;
pub mod trajectory;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
