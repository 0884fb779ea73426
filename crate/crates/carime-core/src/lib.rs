//! Caricature generation from photos with controllable exaggeration and style.
//!
//! The pipeline has two halves: a warper that turns a photo plus a sampled
//! warp code into a dense deformation field (applied by differentiable
//! bilinear sampling), and a styler that renders the warped photo in a
//! caricature texture controlled by a style code. Supporting modules cover
//! dataset preprocessing, training orchestration, and evaluation metrics.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod styler;
pub mod trainer;
pub mod warper;

pub use error::{Error, Result};
pub use geometry::{
    DeformationField, ImageBuffer, LandmarkSet, exaggeration_degree, field_from_landmarks,
    mean_landmarks, resize_field, scale_field, warp_image,
};
