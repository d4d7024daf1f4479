//! Multi-modal molecular property prediction: a graph isomorphism network
//! over parsed SMILES, fused with chemist-knowledge token embeddings through a
//! gated cross-attention block.
//!
//! The numeric core ([`numkit`], [`model`]) is generic over the float type;
//! the aliases below fix it to `f64`, which is what the pipeline trains with.

pub mod chem;
pub mod knowledge;
pub mod model;
pub mod numkit;
pub mod pipeline;

pub type Tensor64 = numkit::Tensor<f64>;
pub type Tensor32 = numkit::Tensor<f32>;
pub type Tape64 = numkit::Tape<f64>;
pub type ParamStore64 = numkit::ParamStore<f64>;

pub type Network64 = model::Network<f64>;
pub type Network32 = model::Network<f32>;
