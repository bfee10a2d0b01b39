//! Dynamic knowledge-context selection and embedding for a toy
//! knowledge-enhanced language model.
//!
//! Pipeline: a knowledge graph ([`kg`]) supplies K-hop raw contexts around
//! each entity mention; fixed TransE vectors ([`transe`]) seed a
//! text-conditioned graph attention network ([`sgnn`]); its per-mention
//! embeddings are fused with Transformer token states ([`text`], [`fusion`])
//! and trained with masked-token and entity-alignment objectives
//! ([`pretrain`]) before task fine-tuning ([`tasks`]).

pub mod artifacts;
pub mod config;
pub mod error;
pub mod fusion;
pub mod kg;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod sgnn;
pub mod synth;
pub mod tasks;
pub mod text;
pub mod transe;

pub use error::{Error, Result};
