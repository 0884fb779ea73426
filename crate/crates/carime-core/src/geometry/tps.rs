use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector};

use super::{DeformationField, LandmarkSet};
use crate::error::{Error, Result};

/// Tikhonov regularization added to the TPS kernel diagonal.
const TPS_LAMBDA: f64 = 1e-6;
/// Condition number beyond which the system is rejected as singular.
const COND_LIMIT: f64 = 1e12;

/// Thin-plate spline interpolating 2-D displacement vectors at scattered
/// control points. `f(x) = a0 + a1*x + a2*y + sum_i w_i * U(|x - c_i|)`
/// with kernel `U(r) = r^2 log r`.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    // per-coordinate weights: kernel weights then [a0, a1, a2]
    wx: Vec<f64>,
    wy: Vec<f64>,
}

fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    /// Fits the spline through `displacements[i]` at `centers[i]`.
    pub fn fit(centers: &[[f64; 2]], displacements: &[[f64; 2]]) -> Result<Self> {
        let n = centers.len();
        if n < 3 || displacements.len() != n {
            return Err(Error::InvalidArgument(format!(
                "tps fit: {n} centers, {} displacements",
                displacements.len()
            )));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = centers[i][0] - centers[j][0];
                let dy = centers[i][1] - centers[j][1];
                a[(i, j)] = kernel(dx * dx + dy * dy);
            }
            a[(i, i)] += TPS_LAMBDA;
            a[(i, n)] = 1.0;
            a[(i, n + 1)] = centers[i][0];
            a[(i, n + 2)] = centers[i][1];
            a[(n, i)] = 1.0;
            a[(n + 1, i)] = centers[i][0];
            a[(n + 2, i)] = centers[i][1];
        }

        let svd = a.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !cond.is_finite() || cond > COND_LIMIT {
            return Err(Error::SingularTps { cond });
        }

        let lu = a.lu();
        let solve = |coord: usize| -> Result<Vec<f64>> {
            let mut rhs = DVector::<f64>::zeros(m);
            for i in 0..n {
                rhs[i] = displacements[i][coord];
            }
            lu.solve(&rhs)
                .map(|v| v.iter().copied().collect())
                .ok_or(Error::SingularTps { cond })
        };
        let wx = solve(0)?;
        let wy = solve(1)?;
        Ok(Self {
            centers: centers.to_vec(),
            wx,
            wy,
        })
    }

    /// Evaluates the interpolated displacement at `(x, y)`.
    pub fn evaluate(&self, x: f64, y: f64) -> [f64; 2] {
        let n = self.centers.len();
        let mut dx = self.wx[n] + self.wx[n + 1] * x + self.wx[n + 2] * y;
        let mut dy = self.wy[n] + self.wy[n + 1] * x + self.wy[n + 2] * y;
        for (i, c) in self.centers.iter().enumerate() {
            let ex = x - c[0];
            let ey = y - c[1];
            let u = kernel(ex * ex + ey * ey);
            dx += self.wx[i] * u;
            dy += self.wy[i] * u;
        }
        [dx, dy]
    }
}

/// Builds the dense backward-sampling field that warps an image with `dst`
/// geometry back toward `src` geometry: the sampling map evaluated at each
/// dst landmark yields the matching src landmark.
///
/// With `anchor_border` set, eight zero-displacement anchors (corners and
/// edge midpoints) pin the image frame.
pub fn field_from_landmarks(
    src: &LandmarkSet,
    dst: &LandmarkSet,
    anchor_border: bool,
) -> Result<DeformationField> {
    if src.image_size() != dst.image_size() {
        return Err(Error::Shape(format!(
            "field_from_landmarks: src size {:?} vs dst size {:?}",
            src.image_size(),
            dst.image_size()
        )));
    }
    let (w, h) = src.image_size();
    let (w, h) = (w as usize, h as usize);

    let mut centers: Vec<[f64; 2]> = dst.points().to_vec();
    let mut disp: Vec<[f64; 2]> = src
        .points()
        .iter()
        .zip(dst.points())
        .map(|(p, q)| [p[0] - q[0], p[1] - q[1]])
        .collect();
    if anchor_border {
        let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
        for a in [
            [0.0, 0.0],
            [xm, 0.0],
            [0.0, ym],
            [xm, ym],
            [xm / 2.0, 0.0],
            [xm / 2.0, ym],
            [0.0, ym / 2.0],
            [xm, ym / 2.0],
        ] {
            centers.push(a);
            disp.push([0.0, 0.0]);
        }
    }

    // Fit in unit-scaled coordinates; keeps the system well conditioned
    // regardless of resolution.
    let s = w.max(h) as f64;
    let centers_n: Vec<[f64; 2]> = centers.iter().map(|c| [c[0] / s, c[1] / s]).collect();
    let disp_n: Vec<[f64; 2]> = disp.iter().map(|d| [d[0] / s, d[1] / s]).collect();
    let tps = ThinPlateSpline::fit(&centers_n, &disp_n)?;

    let mut data = vec![0f32; 2 * h * w];
    let (sx, sy) = (2.0 / w as f64, 2.0 / h as f64);
    for i in 0..h {
        for j in 0..w {
            let d = tps.evaluate(j as f64 / s, i as f64 / s);
            data[i * w + j] = (d[0] * s * sx) as f32;
            data[h * w + i * w + j] = (d[1] * s * sy) as f32;
        }
    }
    let residual = Tensor::from_vec(data, (2, h, w), &Device::Cpu)?;
    DeformationField::from_residual(residual)
}
