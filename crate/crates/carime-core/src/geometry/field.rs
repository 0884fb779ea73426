use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Dense backward-sampling deformation field.
///
/// The residual is a `(2, H, W)` tensor of normalized displacements
/// (channel 0 = x, channel 1 = y; the full image width/height spans 2.0).
/// The sampling map is `identity_grid + residual`.
#[derive(Debug, Clone)]
pub struct DeformationField {
    residual: Tensor,
    width: usize,
    height: usize,
}

impl DeformationField {
    /// The identity field (all-zero residual).
    pub fn identity(width: usize, height: usize) -> Result<Self> {
        let residual = Tensor::zeros((2, height, width), DType::F32, &Device::Cpu)?;
        Ok(Self {
            residual,
            width,
            height,
        })
    }

    /// Wraps a `(2, H, W)` residual tensor, validating shape and finiteness.
    pub fn from_residual(residual: Tensor) -> Result<Self> {
        let (c, height, width) = residual.dims3()?;
        if c != 2 {
            return Err(Error::Shape(format!(
                "deformation residual must have 2 channels, got {c}"
            )));
        }
        let residual = residual.to_dtype(DType::F32)?.contiguous()?;
        let flat: Vec<f32> = residual.flatten_all()?.to_vec1()?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite deformation residual".into()));
        }
        Ok(Self {
            residual,
            width,
            height,
        })
    }

    pub fn residual(&self) -> &Tensor {
        &self.residual
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Residual displacement in pixel units, row-major `(H, W, 2)` layout.
    pub fn pixel_displacements(&self) -> Result<Vec<[f64; 2]>> {
        let rx: Vec<f32> = self.residual.i(0)?.flatten_all()?.to_vec1()?;
        let ry: Vec<f32> = self.residual.i(1)?.flatten_all()?.to_vec1()?;
        let (sx, sy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        Ok(rx
            .iter()
            .zip(&ry)
            .map(|(&x, &y)| [x as f64 * sx, y as f64 * sy])
            .collect())
    }
}

use candle_core::IndexOp;

/// Multiplies the residual elementwise by `s`; the identity grid is untouched.
pub fn scale_field(field: &DeformationField, s: f64) -> Result<DeformationField> {
    if !s.is_finite() {
        return Err(Error::InvalidArgument("scale_field: non-finite scale".into()));
    }
    if s == 1.0 {
        return Ok(field.clone());
    }
    let residual = field.residual().affine(s, 0.0)?;
    DeformationField::from_residual(residual)
}

/// Bilinearly resamples the residual to a new resolution. Normalized units
/// make the values resolution independent, so no magnitude rescaling happens.
pub fn resize_field(field: &DeformationField, width: usize, height: usize) -> Result<DeformationField> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("resize_field: non-positive resolution".into()));
    }
    let (w, h) = field.resolution();
    if (w, h) == (width, height) {
        return Ok(field.clone());
    }
    let batched = field.residual().unsqueeze(0)?;
    let resized = super::warp::bilinear_resize(&batched, height, width)?;
    DeformationField::from_residual(resized.squeeze(0)?)
}

/// Mean per-pixel displacement magnitude in pixel units:
/// `degree = sum_ij ||F_ij||_2 / (H * W)`.
pub fn exaggeration_degree(field: &DeformationField) -> Result<f64> {
    let disp = field.pixel_displacements()?;
    let sum: f64 = disp.iter().map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt()).sum();
    Ok(sum / disp.len() as f64)
}
