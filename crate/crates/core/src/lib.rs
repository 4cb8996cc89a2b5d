pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod grad_suite;
pub mod gradcheck;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod quality;
pub mod rng;
pub mod stde;
pub mod synthetic;
pub mod tct;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
