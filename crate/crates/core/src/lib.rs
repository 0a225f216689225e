//! Multi-view video captioning with a Double Perceiver connector.
//!
//! Frame features from every camera view are fused per timestep by a
//! one-latent Perceiver, combined with a task token, and summarized by a
//! second Perceiver into a fixed number of visual tokens. Those tokens prefix
//! a frozen decoder-only language model fine-tuned through LoRA adapters.
//! Training combines an event-matching loss between full-video and
//! event-window contexts with the caption generation loss.

pub mod connector;
pub mod datamodel;
pub mod error;
pub mod featurestore;
pub mod lm;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
