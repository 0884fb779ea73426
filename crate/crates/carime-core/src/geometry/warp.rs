use candle_core::{DType, Tensor};

use super::{DeformationField, ImageBuffer};
use crate::error::{Error, Result};

/// Bilinearly samples `img` `(N, C, H, W)` at absolute pixel coordinates
/// `x`, `y`, each `(N, 1, OH, OW)`. Coordinates clamp to the image border.
///
/// Differentiable with respect to `img` (through the gather) and to the
/// coordinates (through the fractional interpolation weights; the integer
/// cell index is detached).
pub fn sample_at(img: &Tensor, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    let (bn, _, oh, ow) = x.dims4()?;
    if bn != n && bn != 1 {
        return Err(Error::Shape(format!(
            "sample_at: image batch {n} vs coordinate batch {bn}"
        )));
    }

    let x = x.clamp(0f64, (w - 1) as f64)?;
    let y = y.clamp(0f64, (h - 1) as f64)?;

    let x0 = x.floor()?.detach();
    let y0 = y.floor()?.detach();
    let fx = (&x - &x0)?;
    let fy = (&y - &y0)?;

    // Cell corners, kept in float for the index arithmetic and cast at the
    // gather. Values stay far below the f32 integer-exactness limit.
    let x1 = (&x0 + 1.0)?.clamp(0f64, (w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.clamp(0f64, (h - 1) as f64)?;

    let flat = img.reshape((n, c, h * w))?;
    let gather = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy * (w as f64))? + xx)?
            .to_dtype(DType::U32)?
            .reshape((bn, 1, oh * ow))?
            .broadcast_as((n, c, oh * ow))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?.reshape((n, c, oh, ow))?)
    };
    let g00 = gather(&y0, &x0)?;
    let g01 = gather(&y0, &x1)?;
    let g10 = gather(&y1, &x0)?;
    let g11 = gather(&y1, &x1)?;

    let ifx = fx.affine(-1.0, 1.0)?;
    let ify = fy.affine(-1.0, 1.0)?;

    let out = (g00.broadcast_mul(&(&ifx * &ify)?)?
        + g01.broadcast_mul(&(&fx * &ify)?)?)?;
    let out = (out + g10.broadcast_mul(&(&ifx * &fy)?)?)?;
    let out = (out + g11.broadcast_mul(&(&fx * &fy)?)?)?;
    Ok(out)
}

/// Identity pixel grids `(1, 1, H, W)` for the x and y coordinates.
fn identity_grids(h: usize, w: usize, dt: DType, dev: &candle_core::Device) -> Result<(Tensor, Tensor)> {
    let gx = Tensor::arange(0f32, w as f32, dev)?
        .to_dtype(dt)?
        .reshape((1, 1, 1, w))?
        .broadcast_as((1, 1, h, w))?
        .contiguous()?;
    let gy = Tensor::arange(0f32, h as f32, dev)?
        .to_dtype(dt)?
        .reshape((1, 1, h, 1))?
        .broadcast_as((1, 1, h, w))?
        .contiguous()?;
    Ok((gx, gy))
}

/// Warps a batch of images `(N, C, H, W)` by normalized residual fields
/// `(N, 2, H, W)`. The sampling map is `pixel + residual * (W/2, H/2)`.
pub fn bilinear_warp(img: &Tensor, residual: &Tensor) -> Result<Tensor> {
    let (n, _c, h, w) = img.dims4()?;
    let (rn, rc, rh, rw) = residual.dims4()?;
    if rn != n || rc != 2 || rh != h || rw != w {
        return Err(Error::Shape(format!(
            "bilinear_warp: image {:?} vs residual {:?}",
            img.dims(),
            residual.dims()
        )));
    }
    let dt = img.dtype();
    let residual = residual.to_dtype(dt)?;
    let (gx, gy) = identity_grids(h, w, dt, img.device())?;
    let rx = residual.narrow(1, 0, 1)?;
    let ry = residual.narrow(1, 1, 1)?;
    let x = rx.affine(w as f64 / 2.0, 0.0)?.broadcast_add(&gx)?;
    let y = ry.affine(h as f64 / 2.0, 0.0)?.broadcast_add(&gy)?;
    sample_at(img, &x, &y)
}

/// Bilinear resize of `(N, C, H, W)` to `(N, C, OH, OW)` with corner-aligned
/// coordinates. Differentiable with respect to the input.
pub fn bilinear_resize(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_n, _c, h, w) = t.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument("bilinear_resize: zero output size".into()));
    }
    let dt = t.dtype();
    let dev = t.device();
    let sx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    let sy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let xs: Vec<f32> = (0..ow).map(|j| (j as f64 * sx) as f32).collect();
    let ys: Vec<f32> = (0..oh).map(|i| (i as f64 * sy) as f32).collect();
    let x = Tensor::from_vec(xs, (1, 1, 1, ow), dev)?
        .to_dtype(dt)?
        .broadcast_as((1, 1, oh, ow))?
        .contiguous()?;
    let y = Tensor::from_vec(ys, (1, 1, oh, 1), dev)?
        .to_dtype(dt)?
        .broadcast_as((1, 1, oh, ow))?
        .contiguous()?;
    sample_at(t, &x, &y)
}

/// Warps an image by a deformation field (backward bilinear sampling with
/// border clamp).
pub fn warp_image(img: &ImageBuffer, field: &DeformationField) -> Result<ImageBuffer> {
    let (w, h) = (img.width(), img.height());
    if field.resolution() != (w, h) {
        return Err(Error::Shape(format!(
            "warp_image: image {}x{} vs field {:?}",
            w,
            h,
            field.resolution()
        )));
    }
    let t = img.to_tensor()?.unsqueeze(0)?;
    let r = field.residual().unsqueeze(0)?;
    let out = bilinear_warp(&t, &r)?;
    ImageBuffer::from_tensor(&out.squeeze(0)?)
}
