//! Data attribution for bilevel meta-learning.
//!
//! This crate trains a proximal meta-learning objective exactly at both
//! levels, then answers "what would the meta parameter look like without this
//! task / this data point?" in closed form instead of retraining: task-level
//! and instance-level influence estimates built from total gradients and total
//! Hessians, with interchangeable inverse-curvature backends (exact dense,
//! truncated Neumann series, eigenvalue-corrected Kronecker factorization).
//! A retraining oracle is included so every estimate can be validated against
//! ground truth at desk scale.
//!
//! See the guide under `book/` for a narrative walk-through; the
//! `acceptance` integration test runs the full verification suite.

pub mod bilevel;
pub mod ihvp;
pub mod influence;
pub mod error;
pub mod linalg;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
