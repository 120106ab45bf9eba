//! Per-channel operation search for small convolutional networks.
//!
//! Every searchable layer averages several masked candidate operations
//! (convolution, batch norm, activation). Each output channel of each
//! operation carries a two-parameter gate that is binary in the forward pass
//! and backpropagates through the softmax probability of its "on" logit.
//! A differentiable resource regularizer (parameters, FLOPs or an affine
//! latency model) pushes gates closed, and [`compile`] turns the surviving
//! mask pattern into a pruned standalone network.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! the experiment-directory pipeline live in the `gatenas` companion crate.
//!
//! Module map:
//!
//! - [`tensor`], [`kernels`], [`graph`], [`params`], [`optim`]: dense
//!   tensors, forward/backward kernels, the reverse-mode tape and optimizers.
//! - [`gating`]: gate pairs, gate vectors and the differentiable channel counts.
//! - [`network`]: the searchable supernet and its construction from presets.
//! - [`compile`]: the pruned architecture extracted from gate decisions.
//! - [`resource`]: cost functions, latency fitting and the regularizer.
//! - [`train`]: the pretrain / search / fine-tune state machine.
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod compile;
pub mod data;
mod error;
pub mod gating;
pub mod graph;
pub mod kernels;
pub mod network;
pub mod optim;
pub mod params;
pub mod resource;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
