//! Multi-modal object re-identification built around a frozen, prompted ViT
//! encoder, a parallel feed-forward adapter and selective state space
//! aggregation across modalities.

#![allow(clippy::needless_range_loop)]

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mamba_agg;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod param;
pub mod pfa;
pub mod retrieval;
pub mod srp;
pub mod ssm;
pub mod tape;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use param::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{DType, Tensor};
