//! Motion-magnitude-prior guided video deblurring.
//!
//! The pipeline synthesises blurry frames and motion-magnitude maps from sharp
//! sequences ([`datagen`], [`flow`]), learns the map with a compact regressor
//! ([`mmpnet`]) and uses it to guide a recurrent deblurring network
//! ([`mmprnn`]) trained with [`losses`] by [`trainer`] and scored by [`evalsuite`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evalsuite;
pub mod flow;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod mmpnet;
pub mod model;
pub mod mmprnn;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
