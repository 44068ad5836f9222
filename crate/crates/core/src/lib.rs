//! Collision-free planning for a planar arm in the latent space of a
//! conditional GAN.
//!
//! The crate covers the full pipeline: scenario and dataset generation
//! ([`scenario`]), a small reverse-mode network core ([`net`]), the
//! generator/discriminator/encoder models and their training loop
//! ([`cgan`]), latent-space planning and trajectory optimization
//! ([`latent`]), joint-space RRT / RRT-Connect baselines and the
//! collision-repair splice ([`classical`]), and the experiment harness
//! ([`bench`]).

pub mod bench;
pub mod cgan;
pub mod classical;
pub mod geometry;
pub mod latent;
pub mod net;
pub mod rng;
pub mod scenario;
