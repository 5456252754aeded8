//! Class-incremental object detection with latent distillation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: f64 tensors, a reverse-mode tape and a finite-difference checker.
//! - [`detector`]: a small anchor-free detector with named stage boundaries,
//!   a latent split point and an append-only classification head.
//! - [`data`]: the synthetic shapes dataset and class-incremental task splits.
//! - [`strategy`]: fine-tuning, joint training, replay, latent replay, LwF,
//!   SID and latent distillation, including their losses and buffers.
//! - [`metrics`]: COCO-style mAP and the parameter/MAC/memory cost ledger.
//! - [`train`]: AdamW, the warmup + cosine schedule, the training loop,
//!   experiment configs, checkpoints and CSV output.

pub mod error;
pub mod data;
pub mod detector;
pub mod metrics;
pub mod strategy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, Gradients, Tape, Tensor};
