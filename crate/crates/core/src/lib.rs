//! Retrieval-augmented knowledge-based VQA pipeline.
//!
//! The crate covers weighted multi-modal dense retrieval ([`fusion`],
//! [`index`], [`kb`]), two-stage rerank fusion ([`rerank`]), query-refiner
//! rewards and GRPO ([`refiner`], [`grpo`]), inspector-driven answer routing
//! ([`inspector`]) and evaluation ([`eval`]). All models sit behind
//! [`gateway::ModelGateway`], which has a deterministic stub backend.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fusion;
pub mod gateway;
pub mod grpo;
pub mod index;
pub mod kb;
pub mod refiner;
pub mod cli;
pub mod config;
pub mod eval;
pub mod inspector;
pub mod pipeline;
pub mod rerank;
