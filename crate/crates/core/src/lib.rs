//! Two-stage class-conditional latent video diffusion for rebalancing
//! imbalanced video datasets.
//!
//! Stage 1 trains a text-conditioned image denoiser on individual frames.
//! Stage 2 freezes it, inserts zero-initialized temporal attention blocks
//! after every spatial layer and trains only those (plus a class embedding)
//! on 16-frame clips. Generated clips are screened by a real-data
//! classifier (keep a clip for label `l` only when `l` is in the top-k
//! predictions) before being added to a downstream training set.

pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod downstream;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod recognizer;
pub mod rejection;
pub mod sampler;
pub mod toy1d;
pub mod trainer;

pub use error::{Error, Result};
