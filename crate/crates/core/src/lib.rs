//! Weakly-supervised cross-modal identity association.
//!
//! Given image and text embedding matrices where only the diagonal pairing
//! `(image_i, text_i)` is known, this crate mines one-to-many cross-modal
//! identity relations, trains per-modality linear adapters with a contrastive
//! loss plus three similarity-distribution-matching losses, and scores the
//! result with CMC / mAP / mINP and mined-pair association precision.
//!
//! Module map:
//!
//! * [`emb_store`]: EMB1/LBL1 persistence, normalization, synthetic bundles.
//! * [`local_assoc`]: in-batch contrastive loss and local relation mining.
//! * [`global_assoc`]: memory banks, anchor-based candidate mining and the
//!   global distribution-matching loss.
//! * [`asym_consistency`]: information-asymmetric views and the total loss.
//! * [`trainer`]: adapters, Adam, learning-rate schedule, epoch loop,
//!   checkpoints and the finite-difference gradient checker.
//! * [`eval_metrics`]: retrieval ranking and metrics.
//!
//! Hot loops (similarity matrices, ranking, top-k mining) run through
//! [`Exec`], which fans out with rayon when the `parallel` feature is enabled
//! and falls back to plain iteration otherwise. Outputs are identical either
//! way: work is split per row and every reduction runs in a fixed order.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asym_consistency;
pub mod emb_store;
pub mod error;
pub mod eval_metrics;
pub mod exec;
pub mod global_assoc;
pub mod local_assoc;
pub mod matrix;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use matrix::Matrix;
