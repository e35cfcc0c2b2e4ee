//! Recurrent xi-vector inference stack: three layers of diagonal Gaussian
//! inference that separate a static speaker latent from dynamic content.
// Range checks are written as `!(x > lo)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gauss;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod params;
pub mod reference;
pub mod tensor;
pub mod trainer;
pub mod transition;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
