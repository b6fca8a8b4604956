//! Desk-scale simulator for channel-aware adversarial attacks against a deep
//! modulation classifier, and for the randomized-smoothing defense.
//!
//! The crate is organized bottom-up:
//!
//! - [`iqcore`]: I/Q frames, digital modulators and the `RFIQ` dataset file.
//! - [`channel`]: Rayleigh fading with path loss and shadowing, AWGN, PNR budgets.
//! - [`nnad`]: a small tensor type with a reverse-mode differentiation tape.
//! - [`classifier`]: the VT-CNN2 style classifier, training and evaluation.
//! - [`attack_wb`]: white-box targeted and non-targeted attacks that account for
//!   the adversary-to-receiver channel.
//! - [`attack_limited`]: PCA and VAE universal perturbations under limited
//!   knowledge of the channel, the input or the model.
//! - [`broadcast`]: one perturbation against several receivers (IDBA / JDBA).
//! - [`defense`]: noise augmentation and certified prediction with abstention.
//! - [`harness`]: experiment configuration, PNR sweeps and CSV output.

pub mod attack_limited;
pub mod attack_wb;
pub mod broadcast;
pub mod channel;
pub mod classifier;
pub mod defense;
mod error;
pub mod harness;
pub mod iqcore;
pub mod nnad;
pub mod rng;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Number of complex samples in a frame.
pub const FRAME_LEN: usize = 128;
