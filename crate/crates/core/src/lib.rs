//! Fair binary classification when the sensitive attribute is never
//! observed during training.
//!
//! The pipeline has two stages. A causal variational autoencoder infers a
//! multivariate latent proxy `z` for the hidden sensitive attribute from the
//! descendant features `x_d` and the label, while an adversarial HGR
//! penalty keeps `z` independent of the complementary features `x_c`.
//! A classifier is then trained with log-loss plus a neural HGR penalty
//! between its predictions and sampled proxies (demographic parity), or one
//! penalty per label class (equalized odds).

pub mod datasets;
pub mod diffcore;
pub mod error;
pub mod fair_predictor;
pub mod hgr;
pub mod metrics;
pub mod mmd;
pub mod rng;
pub mod srcvae;

pub use error::{Error, Result};
