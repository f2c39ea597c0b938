//! Visual-span low-rank adaptation for a grouped-query-attention transformer.
//!
//! The crate hosts a small reverse-mode autodiff tensor, a toy decoder-only
//! transformer with RoPE and KV-cache decoding, masked low-rank adapters that
//! update value projections only on the visual-token span of the input,
//! a one-shot gradient-based head-selection procedure, token-ratio planning,
//! analytic adapter-cost accounting, synthetic grounding/text tasks, and an
//! AdamW training loop for the adapters.

pub mod adapter;
pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod fdcheck;
pub mod flops;
pub mod headselect;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

// pub use adapter::{AdapterSet, AdapterSpec, Family, NormKind, PathKind};
// pub use budget::{count_visual_tokens, plan_resolution, PixelBounds, ResolutionPlan};
// pub use config::ExperimentConfig;
// pub use flops::{adapter_flops, CostReport, TokenCounts};
// pub use headselect::{HeadReport, SelectionConfig};
// pub use model::{Model, ModelConfig, TokenLayout};
// pub use tensor::{Tensor, TensorError};
// pub use train::TrainConfig;
