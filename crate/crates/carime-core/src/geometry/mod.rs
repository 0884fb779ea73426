//! Landmark geometry, dense deformation fields, and differentiable warping.
//!
//! Conventions used throughout the crate:
//!
//! * Deformation fields are backward sampling maps: each output pixel reads
//!   from `identity + residual` in the source image (gather, not splat).
//! * Residual displacements are stored in normalized units where the full
//!   image width/height spans 2.0, so `pixel = normalized * (W/2, H/2)`.
//!   This keeps field values resolution independent.
//! * Sampling locations clamp to the image border; out-of-range reads repeat
//!   the border pixel.

mod field;
mod image_buffer;
mod landmarks;
mod tps;
mod warp;

pub use field::{DeformationField, exaggeration_degree, resize_field, scale_field};
pub use image_buffer::ImageBuffer;
pub use landmarks::{LandmarkSet, NUM_LANDMARKS, mean_landmarks};
pub use tps::{ThinPlateSpline, field_from_landmarks};
pub use warp::{bilinear_resize, bilinear_warp, sample_at, warp_image};
