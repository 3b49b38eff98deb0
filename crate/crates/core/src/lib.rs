// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod item_encoder;
pub mod model;
pub mod numeric;
pub mod pretrain;
pub mod scope;
pub mod seq_encoder;
pub mod trainer;

pub use error::{Error, Result};
