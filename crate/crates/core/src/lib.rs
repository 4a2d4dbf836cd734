//! Missingness-aware multimodal representation learning and timeline modeling.
//!
//! The pipeline: synthesize a cohort ([`cohort`]), split it without patient
//! leakage ([`split`]), pretrain per-modality encoders with learnable missing
//! tokens ([`encoder`]) under a masked global alignment contrastive objective
//! ([`align`]), inspect the shared latent space ([`latent_eval`]), assemble
//! event timelines with prediction slots ([`timeline`]), fine-tune a small
//! causal decoder ([`decoder`]), score it ([`metrics`]), and probe its
//! attention under modality ablation ([`interp`]). [`config`] and
//! [`pipeline`] wire the stages to on-disk run directories.

pub mod align;
pub mod cohort;
pub mod config;
pub mod decoder;
pub mod encoder;
mod error;
pub mod interp;
pub mod latent_eval;
pub mod metrics;
pub mod pipeline;
pub mod split;
pub mod timeline;

pub use error::{CoreError, Result};
