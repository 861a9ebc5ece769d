//! Sketchy empirical natural gradient (SENG) optimization on a minimal
//! neural-network core.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curvature;
pub mod direction;
pub mod distributed;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod net;
pub mod optimizer;
mod par;
pub mod sketch;

pub use error::{Result, SengError};
