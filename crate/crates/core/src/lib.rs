//! Continual test-time adaptation of a small two-stage detector, with
//! sensitivity-guided channel pruning and exact FLOPs accounting.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense rank-4 `f64` tensors and a tape-based reverse-mode
//!   autodiff engine covering the operator set the detector uses.
//! * [`detector`] — the network itself: a four-stage convolutional backbone
//!   with batch-norm scaling handles, a proposal head, and an RoI head, plus
//!   offline pretraining on synthetic scenes.
//! * [`stats`] — frozen per-channel feature statistics captured on clean
//!   source data before deployment.
//! * [`sensitivity`] — per-channel domain-shift sensitivity scores derived by
//!   comparing live features against the frozen source statistics.
//! * [`pruning`] — threshold masks over the scaling factors, the weighted
//!   sparsity penalty, the pruning-ratio gate, and stochastic reactivation.
//! * [`adaptation`] — the online update step: distribution-alignment losses,
//!   running target means, and the Adam update restricted to the scaling
//!   factors.
//! * [`flops`] — a closed-form cost model for forward and backward passes
//!   under channel masks, cross-checked against instrumented kernel counters.
//! * [`harness`] — synthetic scene generation, corruption streams, detection
//!   metrics, the continual-adaptation driver, ablations, and run artifacts.

pub mod adaptation;
pub mod archive;
pub mod detector;
pub mod error;
pub mod flops;
pub mod harness;
pub mod optim;
pub mod pruning;
pub mod sensitivity;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
