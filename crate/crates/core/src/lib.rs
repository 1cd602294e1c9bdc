//! Design and certification of state estimators for nonlinear descriptor
//! systems `E ẋ = A x + B_L f_L + B_M f_M`, `y = C x + h(u)`.
//!
//! The crate is organised bottom-up: [`subspace`] and [`pencil`] provide the
//! Wong-sequence machinery, [`expr`] turns nonlinearities into data, [`model`]
//! holds the system and its augmentation, [`synth`] checks the LMI conditions,
//! [`lmi`] searches for certificates and [`sim`] runs plant and estimator.

pub mod corpus;
pub mod error;
pub mod expr;
pub mod linalg;
pub mod lmi;
pub mod model;
pub mod pencil;
pub mod reduced;
pub mod sim;
pub mod subspace;
pub mod synth;

pub use error::{Error, Result};
