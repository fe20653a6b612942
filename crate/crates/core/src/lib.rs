//! Desk-scale multi-modal fusion transformer for remote-sensing visual
//! question answering.
//!
//! The pipeline: random constrained boxes are cut from a multispectral image
//! and bicubically resized ([`box_extractor`]), pushed through a frozen
//! convolutional encoder and a trainable projection ([`encoder`]), fused with
//! the tokenized question ([`text`]) by a stack of self-attention layers
//! ([`fusion`]) and classified over a restricted answer vocabulary
//! ([`answer_head`]). [`dataset`] generates synthetic scenes with a
//! scene-graph oracle, [`train`] fits and evaluates the model.

pub mod answer_head;
pub mod box_extractor;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamId, ParamStore, Tensor, Var};
