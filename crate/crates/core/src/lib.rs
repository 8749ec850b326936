//! Scaled conservative distributional Q-learning for multi-task offline RL,
//! sized to run on a desk.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tensors, a reverse-mode tape, Adam, gradient checking.
//! - [`distributional`]: the categorical return machinery (support,
//!   projection, cross-entropy TD).
//! - [`qnet`]: encoder with group norm and learned spatial embedding,
//!   layer-normed trunk, optional feature normalization, one head per task.
//! - [`losses`]: CQL + TD (MSE or categorical), discrete BCQ, BC.
//! - [`datasets`]: episodic stores, n-step views, stratified sampling, the
//!   on-disk format.
//! - [`envs`]: a suite of small grid games with exact value-iteration oracles.
//! - [`trainer`]: training, evaluation, checkpoints, fine-tuning.
//! - [`evalstats`]: normalized scores, IQM, performance profiles, reports.
//! - [`cli`]: configuration and the `scaledql` subcommands.

pub mod cli;
pub mod datasets;
pub mod diffcore;
pub mod distributional;
pub mod envs;
pub mod evalstats;
pub mod error;
pub mod losses;
pub mod qnet;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/quickstart.md")]
mod book_quickstart {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/returns.md")]
mod book_returns {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/autodiff.md")]
mod book_autodiff {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/network.md")]
mod book_network {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/losses.md")]
mod book_losses {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/environments.md")]
mod book_environments {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}
