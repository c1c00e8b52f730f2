//! A desk-scale multimodal model that aligns visual and textual embeddings
//! structurally: image patches become probabilistic tokens over a visual
//! vocabulary, and each token selects a mixture of rows from a learnable
//! visual embedding table, mirroring how text tokens index a text table.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tensor`]).

pub mod assemble;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod connector;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod llm;
pub mod model;
pub mod optim;
pub mod params;
pub mod patch;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
