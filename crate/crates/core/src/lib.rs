//! Desk-scale RNN-Transducer workbench: exact lattice loss, additive and
//! multiplicative joint networks, LSTM encoders and prediction networks,
//! the training-recipe augmentations, alignment-length synchronous beam
//! search, LM fusion and n-best model combination.

pub mod augment;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod joint;
pub mod lattice;
pub mod model;
pub mod numerics;
pub mod seq;
pub mod training;
pub mod workbench;

pub use error::{Error, Result};
