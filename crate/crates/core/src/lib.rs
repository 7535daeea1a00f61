//! Sound lower bounds for `c^T softmax(s)` over score boxes, and a verifier for
//! single-block patch-attention classifiers built on them.

pub mod attention;
pub mod baseline;
pub mod certified;
pub mod error;
pub mod exec;
pub mod harness;
pub mod interval;
pub mod linalg;
pub mod model;
pub mod selfcheck;
pub mod solver;
pub mod suffix;

pub use error::{Error, Result};
