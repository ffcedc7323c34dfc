//! Desk-scale hierarchical cross-modal prompt learning.
//!
//! A self-contained miniature of HiCroPL: dual-tower transformer encoders
//! with deep prompts, bidirectional text↔vision knowledge flow through a
//! layer-specific knowledge proxy and a hierarchical knowledge mapper, a
//! contrastive cross-entropy plus frozen-teacher consistency objective, and
//! a synthetic few-shot benchmark with an ablation grid runner, all on a
//! from-scratch 64-bit reverse-mode differentiation graph.

pub mod blockfile;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod objectives;
pub mod params;
pub mod promptflow;

pub use error::{Error, Result};
