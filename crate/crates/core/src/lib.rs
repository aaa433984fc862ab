#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Gradients, Precision, Tape, Var};
pub use tensor::Tensor;
