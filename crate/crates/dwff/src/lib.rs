//! # dwff
//!
//! A desk-scale laboratory for dynamic-weighted multi-level feature fusion
//! segmentation. The crate hand-builds the whole stack on CPU in `f64`:
//!
//! * [`tensor`] / [`tape`] — dense tensors and reverse-mode autodiff, every
//!   backward rule verified against finite differences ([`gradcheck`]);
//! * [`io`] — the bit-exact DWF1 binary tensor container;
//! * [`data`] — a frozen seeded surrogate backbone, synthetic labelled
//!   scenes, and the 6:1:1 split;
//! * [`decoder`] — per-level projection, dynamic/static/uniform fusion
//!   weighting with temperature softmax, and the class head;
//! * [`loss`] — Dice + focal segmentation loss with L2 and weight-entropy
//!   regularization;
//! * [`optim`] — AdamW, cosine annealing, gradient accumulation,
//!   checkpoints;
//! * [`metrics`] — confusion-matrix precision/recall/F1/IoU and means;
//! * [`entropy`] — per-image weight-entropy analysis artifacts;
//! * [`config`] / [`commands`] — the plain-text run configuration and the
//!   pipeline commands behind the `dwff` binary.
//!
//! Start with the runnable examples (`cargo run -p dwff --example <name>`);
//! each one exercises a major capability end to end.

pub mod commands;
pub mod config;
pub mod data;
pub mod decoder;
pub mod entropy;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod svg;
pub mod tape;
pub mod tensor;

pub use config::RunConfig;
pub use decoder::{DecoderConfig, DecoderParams, FusionMode};
pub use loss::{LossBreakdown, LossConfig};
pub use tape::GradTape;
pub use tensor::Tensor;
