//! Minimal numerical substrate shared by every learning module: dense
//! matrices, the AdamW optimizer, the Cauchy loss, and a finite-difference
//! gradient checker.

mod adamw;
mod gradcheck;
mod loss;
mod matrix;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use loss::{cauchy_loss, cauchy_loss_grad};
pub use matrix::Matrix;
