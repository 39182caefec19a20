//! Domain-adaptive pose augmentation lab.
//!
//! A small articulated body, a VAE pose prior, latent multiplicative pose
//! perturbation, an iterative parameter regressor and the training loops that
//! adapt it to a shifted target domain from 2D keypoints alone.

pub mod body;
pub mod augment;
pub mod camera;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod pose_prior;
pub mod datagen;
pub mod regressor;
pub mod rng;
pub mod trainer;
