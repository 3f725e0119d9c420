//! Neural meme-caption toolkit: corpus preprocessing, a from-scratch
//! LSTM encoder-decoder with optional attention, training by
//! backpropagation through time, beam-search generation, and evaluation.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod images;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
