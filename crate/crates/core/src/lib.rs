//! Low-dimensional distributional representations of ensemble forecast
//! fields.
//!
//! Three routes from an `M`-member ensemble of gridded fields to a Gaussian
//! in a small latent space:
//!
//! - two-step PCA: project each member with principal components, then fit
//!   a Gaussian to the member codes ([`pca`], [`twostep`]);
//! - two-step autoencoder: the same with a dense autoencoder ([`dense_ae`]);
//! - invariant VAE: a permutation-invariant encoder that maps the whole
//!   ensemble to a diagonal Gaussian directly ([`ivae`]).
//!
//! Reconstructions are compared with the input ensemble through the
//! distribution distances in [`metrics`].

pub mod error;
pub mod numerics;
pub mod par;

pub use error::{Error, Result};
pub mod fields;
pub mod synthgen;
pub mod pca;
mod persist;
pub mod nn;
pub mod dense_ae;
pub mod training;
pub mod metrics;
pub mod twostep;
pub mod ivae;
