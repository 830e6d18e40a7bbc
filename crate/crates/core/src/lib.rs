#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod math;
pub mod matrix;
pub mod model;
pub mod probe;
pub mod rng;
pub mod syntax;
pub mod tape;
pub mod tokenizer;
pub mod trainer;

pub use error::Error;
pub use matrix::Matrix;
