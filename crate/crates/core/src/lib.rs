//! Depth-guided lightweight polyp segmentation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense 4-D tensors and a tape-based reverse-mode autodiff
//!   engine with the handful of ops the model needs.
//! * [`blocks`]: the Ghost Factorization Module, Interleaved Shuffle Fusion
//!   and Dynamic Group Gating layers.
//! * [`network`]: the full encoder/decoder/heads model, parameter and MAC
//!   accounting, and checkpoints.
//! * [`objectives`]: Dice, Smooth-L1 and the uncertainty-weighted joint loss,
//!   plus AdamW with warmup and cosine decay.
//! * [`degrade`]: the synthetic degradation pipeline.
//! * [`harness`]: data, metrics, training, the four-quadrant robustness
//!   protocol and FPS benchmarking.

pub mod accounting;
pub mod blocks;
pub mod degrade;
pub mod error;
pub mod harness;
pub mod kv;
pub mod network;
pub mod objectives;
pub mod params;
pub mod sample;
pub mod tensor;

pub use error::{Error, Result};
