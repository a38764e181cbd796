//! Quality assessment for neurally synthesized scenes without references.
//!
//! The crate trains a scene-quality encoder with self-supervised contrastive
//! pairs, then maps its embeddings to perceptual scores with a lightweight
//! regression head. Submodules follow the data path: [`scene`] loads view
//! sequences, [`pairs`] builds quality-divergent pairs, [`guidance`] scores
//! them with classical proxies, [`backbone`] embeds them, [`objective`]
//! turns embeddings and guidance into losses, [`trainer`] runs optimization,
//! [`estimator`] fits score heads, and [`metrics`] evaluates correlation
//! with human judgments.

pub mod backbone;
pub mod checkpoint;
pub mod distortion;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pairs;
pub mod plot;
pub mod scene;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
