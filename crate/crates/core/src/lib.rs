//! Data-driven synthesis of ellipsoidal safe sets and linear safe controllers
//! for control-affine systems `ẋ = Ax + Bu + d(x)` with an unknown nonlinearity.

use openblas_src as _;

pub mod convex;
pub mod error;
pub mod gp;
pub mod gp_bound;
pub mod linalg;
pub mod lipschitz;
pub mod runtime;
pub mod safe_set;
pub mod scenarios;
pub mod shape;
pub mod system_model;

pub use error::{Error, Result};
