//! Data-free knowledge distillation with a retention-aware meta student
//! update, exact second-order gradients, and two replay schemes.
//!
//! Layering, bottom up:
//! - [`autodiff`]: higher-order-capable tape; gradients are graph nodes.
//! - [`param`]: flat parameter vectors with a named layout.
//! - [`nets`]: generator / VAE encoder / classifier construction and forward.
//! - [`losses`]: distillation, divergence and prior objectives.
//! - [`meta`]: the inner-step student update, Hessian-vector products and
//!   the gradient-alignment / Taylor diagnostics.
//! - [`replay`]: FIFO memory bank and VAE generative replay.
//! - [`engine`]: teacher pretraining and the alternating distillation loop.
//! - [`metrics`], [`config`], [`ckpt`], [`verify`]: evaluation protocol,
//!   experiment configuration, checkpoint container, self-check suites.

pub mod autodiff;
pub mod check;
pub mod ckpt;
pub mod config;
pub mod data;
pub mod engine;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod param;
pub mod replay;
pub mod rng;
pub mod verify;

mod error;
pub use error::{Error, Result};
