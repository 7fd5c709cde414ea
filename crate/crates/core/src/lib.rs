//! Attention-control engine for learning and synthesizing multiple
//! instances from a single image without semantic leakage.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, row-stochastic attention maps, binary masks.
//! - [`denoiser`]: a small attention-only noise predictor with a hand-written
//!   backward pass, plus the DDIM schedule.
//! - [`learning`]: reward / penalty cross-attention losses, masked
//!   reconstruction and the embedding-learning loop.
//! - [`synthesis`]: box-control energies, the decaying penalty weight,
//!   attention masking and latent optimization during sampling.
//! - [`refine`]: cross-attention masks, K-means over self-attention rows and
//!   cluster assignment.
//! - [`kkt`]: closed-form stationary points of the per-pixel quadratic
//!   programs and a projected-descent verifier.
//! - [`harness`]: synthetic scenarios, metrics, PCA and experiment runs.

pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kkt;
pub mod learning;
pub mod refine;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
