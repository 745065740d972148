//! Weakly-supervised temporal action localization.
//!
//! Videos arrive as two streams of per-snippet features (appearance and
//! motion). A two-stream temporal-convolution network maps them to latent
//! embeddings and a temporal class activation map (TCAM). Training uses only
//! video-level labels and combines
//!
//! * a discriminative loss: focal-style classification whose penalty terms
//!   are driven by cosine similarities between foreground and background
//!   embeddings pooled with top-down attention, and
//! * a denoising loss: the log condition number of prediction/label joint
//!   distribution matrices at snippet level (pseudo-labels from bottom-up
//!   attention) and at video level.
//!
//! Everything below the model is built here: a small reverse-mode
//! differentiation tape ([`autodiff`]), a one-sided Jacobi SVD
//! ([`linalg`]), Adam ([`train`]), proposal generation with class-wise NMS
//! ([`infer`]) and temporal detection metrics ([`eval`]).
//!
//! See the crate's `examples/` directory for runnable walkthroughs of each
//! capability, and the `wtal` binary for the command-line surface.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod study;
pub mod train;

pub use autodiff::{OpKind, Tape, Var};
pub use error::{Error, Result};
pub use linalg::{abs_det, svd_small, Matrix, SvdResult};
