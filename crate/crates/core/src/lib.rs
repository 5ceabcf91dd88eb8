//! Prompt-tuned vision transformer for few-shot class-incremental learning.
//!
//! A frozen mini-ViT backbone is extended with two prompt families: tied
//! task-invariant prompts that receive uniform attention by construction,
//! and task-specific prompts produced per sample by a variational prompt
//! encoder trained with an information-bottleneck objective plus an anchor
//! loss. After base-task training the classifier is converted to class-mean
//! prototypes; incremental tasks update only the running prompt-feature
//! average (EMA) and append new prototypes — no gradient steps.
//!
//! The crate ships its own reverse-mode autodiff tape, a deterministic
//! synthetic dataset generator, binary dataset/checkpoint formats, and the
//! full experiment runner with metrics.

pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod prompts;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod vit;

pub use error::{CoreError, Result};
pub use graph::{Grads, Graph, NodeId};
pub use optim::Param;
pub use rng::RootSeed;
pub use tensor::{Real, Tensor};
