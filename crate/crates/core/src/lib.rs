//! Dual-path adversarial lifting for online test-time adaptation.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod lifting;
pub mod losses;
mod math;
pub mod optim;
pub mod smoothness;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
