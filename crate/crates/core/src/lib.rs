//! Non-uniform quantization of neural networks by uniform noise injection.
//!
//! - [`dist`]: Gaussian and empirical CDF/quantile models, normality statistic
//! - [`quant`]: uniform, k-quantile and Lloyd-Max scalar quantizers
//! - [`nn`]: a small reverse-mode network kernel (conv, dense, pooling, batch norm, SGD)
//! - [`noise`]: noise-injection training transforms and activation calibration
//! - [`sched`]: gradual block-wise quantization schedule with restarts
//! - [`bops`]: bit-operation complexity and model-size accounting
//! - [`qmodel`]: a network with per-layer quantization state
//! - [`qinfer`]: integer lookup-table inference
//! - [`container`], [`data`], [`config`], [`models`]: file formats, datasets, experiment configs

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod bops;
pub mod config;
pub mod container;
pub mod data;
pub mod dist;
pub mod error;
pub mod models;
pub mod nn;
pub mod noise;
pub mod par;
pub mod qinfer;
pub mod qmodel;
pub mod quant;
pub mod rng;
pub mod sched;

pub use dist::{DistKind, DistModel};
pub use error::{Error, Result};
pub use quant::{Domain, QuantizerSpec};
