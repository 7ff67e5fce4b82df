pub mod attention;
pub mod controller;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod parallel;
pub mod rng;
pub mod simworld;
pub mod uncertainty;

pub use error::{Error, Result};
