//! Open-set gait recognition from sparse radar point-cloud sequences.
//!
//! End-to-end desk-scale system: preprocessing of point-cloud recordings into
//! fixed-shape windows, an adversarial autoencoder whose latent space is
//! pulled toward a fixed Gaussian-mixture prior with one component per known
//! subject, k-sample novelty detection on mixture likelihood scores, and an
//! evaluation harness reporting openness and macro-F1 over randomized trials.

pub mod data;
pub mod detect;
pub mod eval;
pub mod loss;
pub mod model;
pub mod prior;
pub mod seeds;
pub mod synth;
pub mod train;
pub mod tensor;
