//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL line. Reference values come from independent scalar
//! reimplementations inside this file, never from the library under test.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use carime_core::dataset::{self, SamplePair, CANONICAL_SIZE, FACE_CONTOUR, FLIP_PERM};
use carime_core::geometry::{
    bilinear_warp, exaggeration_degree, field_from_landmarks, mean_landmarks, scale_field,
    warp_image, DeformationField, ImageBuffer, LandmarkSet, NUM_LANDMARKS,
};
use carime_core::nn::{self, Adam, Checkpoint};
use carime_core::styler::{
    adalin, lsgan_d_loss, lsgan_g_loss, styler_train_step, Styler, StylerLossWeights,
};
use carime_core::trainer::{self, TrainConfig, TrainTarget};
use carime_core::warper::{
    tv_loss, warp_recon_loss, warper_train_step, ModelConfig, Warper, WarperBatch,
    WarperLossWeights,
};

fn criterion(id: usize, name: &str, budget: Duration, body: impl FnOnce() + std::panic::UnwindSafe) {
    let t0 = Instant::now();
    let outcome = std::panic::catch_unwind(body);
    let dt = t0.elapsed();
    match outcome {
        Ok(()) if dt <= budget => {
            println!("criterion {id:2} ({name}): PASS [{:.1}s]", dt.as_secs_f64());
        }
        Ok(()) => {
            println!(
                "criterion {id:2} ({name}): FAIL [took {:.1}s, budget {:.0}s]",
                dt.as_secs_f64(),
                budget.as_secs_f64()
            );
            panic!("criterion {id} exceeded its runtime budget");
        }
        Err(e) => {
            println!("criterion {id:2} ({name}): FAIL [{:.1}s]", dt.as_secs_f64());
            std::panic::resume_unwind(e);
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalar double-loop backward bilinear sampler with border clamp, the
/// reference the tensor implementation is held against.
fn reference_warp(img: &[f64], res: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0f64; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let x = (j as f64 + res[i * w + j] * w as f64 / 2.0).clamp(0.0, (w - 1) as f64);
            let y = (i as f64 + res[h * w + i * w + j] * h as f64 / 2.0).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| img[ch * h * w + yy * w + xx];
                out[ch * h * w + i * w + j] = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(y0, x1) * fx * (1.0 - fy)
                    + at(y1, x0) * (1.0 - fx) * fy
                    + at(y1, x1) * fx * fy;
            }
        }
    }
    out
}

#[test]
fn criterion_01_sampler_matches_bruteforce() {
    criterion(1, "differentiable sampler vs brute force", Duration::from_secs(10), || {
        let mut r = rng(11);
        let (c, h, w) = (3, 16, 16);
        for _case in 0..10 {
            let img: Vec<f32> = (0..c * h * w).map(|_| r.random_range(-1.0f32..1.0)).collect();
            let res: Vec<f32> = (0..2 * h * w).map(|_| r.random_range(-0.4f32..0.4)).collect();
            let it = Tensor::from_vec(img.clone(), (1, c, h, w), &Device::Cpu).unwrap();
            let rt = Tensor::from_vec(res.clone(), (1, 2, h, w), &Device::Cpu).unwrap();
            let got: Vec<f32> = bilinear_warp(&it, &rt)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let want = reference_warp(
                &img.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &res.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                c,
                h,
                w,
            );
            for (a, b) in got.iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5, "sampler {a} vs reference {b}");
            }
        }

        // identity field reproduces the input exactly, through the image path
        let mut img = ImageBuffer::constant(16, 16, 0.0);
        for y in 0..16 {
            for x in 0..16 {
                img.set_pixel(x, y, [
                    r.random_range(-1.0f32..1.0),
                    r.random_range(-1.0f32..1.0),
                    r.random_range(-1.0f32..1.0),
                ]);
            }
        }
        let id = DeformationField::identity(16, 16).unwrap();
        let out = warp_image(&img, &id).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6, "identity warp {a} vs {b}");
        }
    });
}

#[test]
fn criterion_02_loss_oracles() {
    criterion(2, "loss terms vs scalar oracles", Duration::from_secs(30), || {
        let mut r = rng(22);
        let (b, c, h, w) = (2, 3, 9, 7);
        // double precision keeps accumulation error far below the tolerances,
        // so only genuine formula mismatches can fail
        let xv: Vec<f64> = (0..b * c * h * w).map(|_| r.random_range(-1.0f64..1.0)).collect();
        let yv: Vec<f64> = (0..b * c * h * w).map(|_| r.random_range(-1.0f64..1.0)).collect();
        let x = Tensor::from_vec(xv.clone(), (b, c, h, w), &Device::Cpu).unwrap();
        let y = Tensor::from_vec(yv.clone(), (b, c, h, w), &Device::Cpu).unwrap();

        // total variation: per-image sum of squared neighbor differences,
        // averaged over the batch
        let mut tv = 0f64;
        for n in 0..b {
            for ch in 0..c {
                let at = |i: usize, j: usize| xv[((n * c + ch) * h + i) * w + j];
                for i in 0..h {
                    for j in 0..w {
                        if i + 1 < h {
                            tv += (at(i + 1, j) - at(i, j)).powi(2);
                        }
                        if j + 1 < w {
                            tv += (at(i, j + 1) - at(i, j)).powi(2);
                        }
                    }
                }
            }
        }
        tv /= b as f64;
        let got_tv = tv_loss(&x).unwrap().to_scalar::<f64>().unwrap();
        assert!((got_tv - tv).abs() < 1e-6 * tv.max(1.0), "tv {got_tv} vs {tv}");

        // l1-style reconstruction terms: plain mean absolute difference
        let mae: f64 = xv
            .iter()
            .zip(&yv)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / xv.len() as f64;
        let got_warp = warp_recon_loss(&x, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!((got_warp - mae).abs() < 1e-7 * mae.max(1.0), "warp recon {got_warp} vs {mae}");
        let got_l1 = nn::l1(&x, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!((got_l1 - mae).abs() < 1e-7 * mae.max(1.0), "image l1 {got_l1} vs {mae}");

        // FID on point sets whose sample moments are exact by construction:
        // {mu +- a_i e_i} has mean mu and unbiased diagonal covariance
        // 2 a_i^2 / (2d - 1), so a_i = sqrt(s_i (2d - 1) / 2) realizes any
        // diagonal s. The diagonal-Gaussian FID is then in closed form.
        let d = 4usize;
        let make = |mu: &[f64], sig: &[f64]| -> Vec<Vec<f64>> {
            let mut pts = Vec::new();
            for i in 0..d {
                let a = (sig[i] * (2.0 * d as f64 - 1.0) / 2.0).sqrt();
                for s in [1.0, -1.0] {
                    let mut p = mu.to_vec();
                    p[i] += s * a;
                    pts.push(p);
                }
            }
            pts
        };
        let mu1 = [0.3f64, -1.0, 0.0, 2.0];
        let mu2 = [0.0f64, 0.5, -0.2, 1.0];
        let s1 = [1.0f64, 0.5, 2.0, 0.8];
        let s2 = [0.7f64, 1.5, 1.0, 0.4];
        let closed: f64 = mu1
            .iter()
            .zip(&mu2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            + s1.iter()
                .zip(&s2)
                .map(|(a, b)| a + b - 2.0 * (a * b).sqrt())
                .sum::<f64>();
        let got = carime_core::eval::fid(&make(&mu1, &s1), &make(&mu2, &s2)).unwrap();
        assert!(
            (got - closed).abs() < 0.01 * closed,
            "fid {got} vs closed form {closed}"
        );
    });
}

fn f64_var(data: Vec<f64>, shape: &[usize]) -> Var {
    Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap()
}

/// Central finite differences against the analytic gradient of `loss`,
/// returning the worst relative error over all listed variables.
fn grad_check(vars: &[&Var], loss: &dyn Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let h = 1e-5;
    let mut worst = 0f64;
    for var in vars {
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .expect("variable missing from gradient store")
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let dims = var.as_tensor().dims().to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            var.set(&Tensor::from_vec(probe.clone(), dims.clone(), &Device::Cpu).unwrap())
                .unwrap();
            let lp = loss().to_scalar::<f64>().unwrap();
            probe[i] = base[i] - h;
            var.set(&Tensor::from_vec(probe.clone(), dims.clone(), &Device::Cpu).unwrap())
                .unwrap();
            let lm = loss().to_scalar::<f64>().unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        var.set(&Tensor::from_vec(base, dims, &Device::Cpu).unwrap()).unwrap();
    }
    worst
}

#[test]
fn criterion_03_gradient_checks() {
    criterion(3, "analytic gradients vs finite differences", Duration::from_secs(120), || {
        let mut r = rng(33);
        let tol = 1e-3;

        // warp: gradients w.r.t. both the image and the field. Sampling
        // coordinates are kept away from cell boundaries and the border so the
        // loss is smooth at the probe points.
        let (c, h, w) = (2usize, 6usize, 6usize);
        let img = f64_var(
            (0..c * h * w).map(|_| r.random_range(-1.0f64..1.0)).collect(),
            &[1, c, h, w],
        );
        let mut res = vec![0f64; 2 * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut tx: f64 = r.random_range(0.6..(w as f64 - 1.6));
                let mut ty: f64 = r.random_range(0.6..(h as f64 - 1.6));
                for t in [&mut tx, &mut ty] {
                    let frac = *t - t.floor();
                    if frac < 0.15 {
                        *t += 0.2;
                    } else if frac > 0.85 {
                        *t -= 0.2;
                    }
                }
                res[i * w + j] = (tx - j as f64) * 2.0 / w as f64;
                res[h * w + i * w + j] = (ty - i as f64) * 2.0 / h as f64;
            }
        }
        let res = f64_var(res, &[1, 2, h, w]);
        let wts = Tensor::from_vec(
            (0..c * h * w).map(|_| r.random_range(-1.0f64..1.0)).collect::<Vec<f64>>(),
            (1, c, h, w),
            &Device::Cpu,
        )
        .unwrap();
        let err = grad_check(&[&img, &res], &|| {
            bilinear_warp(img.as_tensor(), res.as_tensor())
                .unwrap()
                .mul(&wts)
                .unwrap()
                .sum_all()
                .unwrap()
        });
        assert!(err < tol, "warp gradient error {err}");

        // total variation
        let x = f64_var(
            (0..2 * 5 * 5).map(|_| r.random_range(-1.0f64..1.0)).collect(),
            &[1, 2, 5, 5],
        );
        let err = grad_check(&[&x], &|| tv_loss(x.as_tensor()).unwrap());
        assert!(err < tol, "tv gradient error {err}");

        // adalin: all four inputs, rho strictly inside (0, 1)
        let (n, cc, hh, ww) = (2usize, 3usize, 4usize, 4usize);
        let feat = f64_var(
            (0..n * cc * hh * ww).map(|_| r.random_range(-1.0f64..1.0)).collect(),
            &[n, cc, hh, ww],
        );
        let gamma = f64_var(
            (0..cc).map(|_| r.random_range(0.5f64..1.5)).collect(),
            &[1, cc, 1, 1],
        );
        let beta = f64_var(
            (0..cc).map(|_| r.random_range(-0.3f64..0.3)).collect(),
            &[1, cc, 1, 1],
        );
        let rho = f64_var((0..cc).map(|_| r.random_range(0.25f64..0.75)).collect(), &[cc]);
        let awts = Tensor::from_vec(
            (0..n * cc * hh * ww).map(|_| r.random_range(-1.0f64..1.0)).collect::<Vec<f64>>(),
            (n, cc, hh, ww),
            &Device::Cpu,
        )
        .unwrap();
        let err = grad_check(&[&feat, &gamma, &beta, &rho], &|| {
            adalin(feat.as_tensor(), gamma.as_tensor(), beta.as_tensor(), rho.as_tensor())
                .unwrap()
                .mul(&awts)
                .unwrap()
                .sum_all()
                .unwrap()
        });
        assert!(err < tol, "adalin gradient error {err}");

        // least-squares adversarial objectives
        let d_real = f64_var(
            (0..9).map(|_| r.random_range(-1.0f64..1.0)).collect(),
            &[1, 1, 3, 3],
        );
        let d_fake = f64_var(
            (0..9).map(|_| r.random_range(-1.0f64..1.0)).collect(),
            &[1, 1, 3, 3],
        );
        let err = grad_check(&[&d_real, &d_fake], &|| {
            lsgan_d_loss(d_real.as_tensor(), d_fake.as_tensor()).unwrap()
        });
        assert!(err < tol, "adversarial d gradient error {err}");
        let err = grad_check(&[&d_fake], &|| lsgan_g_loss(d_fake.as_tensor()).unwrap());
        assert!(err < tol, "adversarial g gradient error {err}");
    });
}

/// A plausible 17-point layout at an arbitrary square resolution.
fn template_landmarks(size: usize) -> LandmarkSet {
    let s = size as f64 / 256.0;
    let pts = vec![
        [40.0 * s, 110.0 * s],
        [45.0 * s, 150.0 * s],
        [60.0 * s, 185.0 * s],
        [128.0 * s, 200.0 * s],
        [196.0 * s, 185.0 * s],
        [211.0 * s, 150.0 * s],
        [216.0 * s, 110.0 * s],
        [70.0 * s, 95.0 * s],
        [100.0 * s, 95.0 * s],
        [156.0 * s, 95.0 * s],
        [186.0 * s, 95.0 * s],
        [115.0 * s, 130.0 * s],
        [141.0 * s, 130.0 * s],
        [95.0 * s, 160.0 * s],
        [161.0 * s, 160.0 * s],
        [128.0 * s, 152.0 * s],
        [128.0 * s, 168.0 * s],
    ];
    LandmarkSet::new(pts, size as u32, size as u32).unwrap()
}

/// Bilinear read of a field residual at a fractional position, converted to a
/// pixel-unit displacement. Independent of the library's own field readers.
fn field_displacement_at(field: &DeformationField, x: f64, y: f64) -> [f64; 2] {
    let (w, h) = field.resolution();
    let v: Vec<f32> = field.residual().flatten_all().unwrap().to_vec1().unwrap();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0f64; 2];
    for ch in 0..2 {
        let at = |yy: usize, xx: usize| v[ch * h * w + yy * w + xx] as f64;
        let r = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
            + at(y0, x1) * fx * (1.0 - fy)
            + at(y1, x0) * (1.0 - fx) * fy
            + at(y1, x1) * fx * fy;
        out[ch] = r * (if ch == 0 { w } else { h }) as f64 / 2.0;
    }
    out
}

#[test]
fn criterion_04_landmark_field_interpolation() {
    criterion(4, "landmark-fitted fields", Duration::from_secs(10), || {
        let size = 64usize;
        let base = template_landmarks(size);

        // identical landmarks give an identity field
        let id = field_from_landmarks(&base, &base, true).unwrap();
        assert!(exaggeration_degree(&id).unwrap() < 1e-6);

        let mut r = rng(44);
        for case in 0..20 {
            // well-separated layout (landmarks several grid cells apart) so
            // the dense field resolves the interpolant between them
            let grid: Vec<[f64; 2]> = (0..NUM_LANDMARKS)
                .map(|i| {
                    let gx = (i % 5) as f64 / 4.0;
                    let gy = (i / 5) as f64 / 3.5;
                    [
                        (8.0 + gx * 48.0 + r.random_range(-2.0..2.0)).clamp(4.0, 60.0),
                        (8.0 + gy * 48.0 + r.random_range(-2.0..2.0)).clamp(4.0, 60.0),
                    ]
                })
                .collect();
            let dst = LandmarkSet::new(grid, size as u32, size as u32).unwrap();
            let src = dst
                .map(|p| {
                    [
                        (p[0] + r.random_range(-4.0..4.0)).clamp(2.0, 62.0),
                        (p[1] + r.random_range(-4.0..4.0)).clamp(2.0, 62.0),
                    ]
                })
                .unwrap();
            let field = field_from_landmarks(&src, &dst, true).unwrap();
            for k in 0..NUM_LANDMARKS {
                let d = dst.point(k);
                let disp = field_displacement_at(&field, d[0], d[1]);
                let pred = [d[0] + disp[0], d[1] + disp[1]];
                let s = src.point(k);
                let err = ((pred[0] - s[0]).powi(2) + (pred[1] - s[1]).powi(2)).sqrt();
                assert!(err <= 0.5, "case {case} landmark {k}: error {err}px");
            }
        }
    });
}

#[test]
fn criterion_05_exaggeration_degree() {
    criterion(5, "exaggeration degree and scale control", Duration::from_secs(10), || {
        let (w, h) = (8usize, 8usize);
        let mut r = rng(55);
        let data: Vec<f32> = (0..2 * h * w).map(|_| r.random_range(-0.3f32..0.3)).collect();
        let field = DeformationField::from_residual(
            Tensor::from_vec(data.clone(), (2, h, w), &Device::Cpu).unwrap(),
        )
        .unwrap();

        // degree = mean per-pixel euclidean displacement in pixel units
        let mut want = 0f64;
        for i in 0..h {
            for j in 0..w {
                let dx = data[i * w + j] as f64 * w as f64 / 2.0;
                let dy = data[h * w + i * w + j] as f64 * h as f64 / 2.0;
                want += (dx * dx + dy * dy).sqrt();
            }
        }
        want /= (h * w) as f64;
        let got = exaggeration_degree(&field).unwrap();
        assert!((got - want).abs() < 1e-6, "degree {got} vs {want}");

        // absolute homogeneity in the scale
        for s in [0.3f64, 1.0, 2.0, -1.0] {
            let scaled = scale_field(&field, s).unwrap();
            let got = exaggeration_degree(&scaled).unwrap();
            let want = s.abs() * exaggeration_degree(&field).unwrap();
            assert!((got - want).abs() < 1e-6, "scale {s}: {got} vs {want}");
        }

        // scale selection hits a target mean degree
        let cfg = ModelConfig {
            image_size: 64,
            warper_channels: 8,
            styler_channels: 8,
            ..Default::default()
        };
        let warper = Warper::new(cfg.clone(), 5).unwrap();
        {
            // the field head starts at zero; nudge its bias so fields are
            // non-trivial without training
            let data = warper.varmap().data().lock().unwrap();
            for (name, var) in data.iter() {
                if name.contains("zero_head") && name.ends_with(".bias") {
                    var.set(&Tensor::from_vec(vec![0.02f32, -0.01], (2,), &Device::Cpu).unwrap())
                        .unwrap();
                }
            }
        }
        let photos: Vec<ImageBuffer> = (0..3)
            .map(|k| {
                let mut img = ImageBuffer::constant(64, 64, 0.0);
                for y in 0..64 {
                    for x in 0..64 {
                        img.set_pixel(x, y, [
                            (x as f32 / 32.0 - 1.0) * (k + 1) as f32 * 0.3,
                            y as f32 / 32.0 - 1.0,
                            r.random_range(-0.2f32..0.2),
                        ]);
                    }
                }
                img
            })
            .collect();
        let codes: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..cfg.warp_code_dim).map(|_| r.random_range(-1.0f32..1.0)).collect())
            .collect();
        let target = 2.0;
        let s = carime_core::eval::scale_for_degree(&warper, &photos, &codes, target).unwrap();
        let mut achieved = 0f64;
        for (p, c) in photos.iter().zip(&codes) {
            let sample = warper.sample_exaggeration(p, c, s).unwrap();
            achieved += exaggeration_degree(&scale_field(&sample.field, s).unwrap()).unwrap();
        }
        achieved /= photos.len() as f64;
        assert!(
            (achieved - target).abs() < 0.01 * target,
            "target degree {target}, achieved {achieved} at scale {s}"
        );
    });
}

fn lowfreq_photo(size: usize, seed: u64) -> ImageBuffer {
    let mut r = rng(seed);
    let coarse = ImageBuffer::new(
        (0..8 * 8 * 3).map(|_| r.random_range(-0.9f32..0.9)).collect(),
        8,
        8,
    )
    .unwrap();
    dataset::resize_image(&coarse, size, size).unwrap()
}

/// 8 synthetic same-identity pairs at a 64px working size: smooth photos with
/// the template layout, caricature landmarks perturbed smoothly per pair.
fn overfit_pairs(size: usize) -> (Vec<SamplePair>, LandmarkSet) {
    let photo_lm = template_landmarks(size);
    let mut pairs = Vec::new();
    let mut cari_sets = Vec::new();
    for k in 0..8usize {
        let stretch_x = 1.0 + 0.05 * ((k % 4) as f64 - 1.5);
        let stretch_y = 1.0 - 0.04 * ((k / 2) as f64 - 1.5);
        let c = size as f64 / 2.0;
        let cari_lm = photo_lm
            .map(|p| {
                [
                    (c + (p[0] - c) * stretch_x).clamp(2.0, size as f64 - 3.0),
                    (c + (p[1] - c) * stretch_y + (k as f64 - 3.5) * 0.4)
                        .clamp(2.0, size as f64 - 3.0),
                ]
            })
            .unwrap();
        let photo = lowfreq_photo(size, 600 + k as u64);
        cari_sets.push(cari_lm.clone());
        pairs.push(SamplePair {
            caricature: photo.clone(),
            photo,
            photo_landmarks: photo_lm.clone(),
            cari_landmarks: cari_lm,
            same_identity: true,
        });
    }
    let mean = mean_landmarks(&cari_sets).unwrap();
    (pairs, mean)
}

#[test]
fn criterion_06_warper_overfit() {
    criterion(6, "warper overfits 8 pairs", Duration::from_secs(600), || {
        let size = 64usize;
        let cfg = ModelConfig {
            image_size: size,
            warper_channels: 8,
            styler_channels: 8,
            ..Default::default()
        };
        let (pairs, mean) = overfit_pairs(size);
        let batch: WarperBatch = trainer::assemble_warper_batch(&pairs, &mean, size).unwrap();

        let warper = Warper::new(cfg, 6).unwrap();
        let mut opt = Adam::new(nn::trainable_vars(warper.varmap()), 0.5, 0.999).unwrap();
        let weights = WarperLossWeights::default();
        let mut r = rng(66);
        let mut warp_hist = Vec::new();
        let mut worst_recomp = 0f64;
        for iter in 0..300 {
            let losses =
                warper_train_step(&warper, &batch, &mut opt, 1e-3, weights, &mut r, iter).unwrap();
            let recomposed = weights.lambda_rec_warp * losses.warp_recon
                + losses.photo_recon
                + weights.lambda_tv * losses.tv;
            worst_recomp = worst_recomp.max((losses.total - recomposed).abs());
            warp_hist.push(losses.warp_recon);
        }
        assert!(
            worst_recomp <= 1e-6,
            "objective recomposition drift {worst_recomp}"
        );
        let first: f64 = warp_hist[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = warp_hist[warp_hist.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            last <= 0.2 * first,
            "field reconstruction fell only {:.1}% ({first} -> {last})",
            100.0 * (1.0 - last / first)
        );
    });
}

#[test]
fn criterion_07_styler_overfit_and_norm_limits() {
    criterion(7, "styler overfits 8 images", Duration::from_secs(900), || {
        // degenerate mixing weights reduce adalin to pure instance / layer
        // normalization; compare against scalar f64 references (eps 1e-5)
        let (n, c, h, w) = (2usize, 3usize, 5usize, 5usize);
        let mut r = rng(77);
        let fv: Vec<f32> = (0..n * c * h * w).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let feat = Tensor::from_vec(fv.clone(), (n, c, h, w), &Device::Cpu).unwrap();
        let gamma_v = 1.3f64;
        let beta_v = 0.2f64;
        let gamma = Tensor::full(gamma_v as f32, (1, c, 1, 1), &Device::Cpu).unwrap();
        let beta = Tensor::full(beta_v as f32, (1, c, 1, 1), &Device::Cpu).unwrap();
        let fv64: Vec<f64> = fv.iter().map(|&v| v as f64).collect();

        let mut want_in = vec![0f64; fv.len()];
        for nn_ in 0..n {
            for ch in 0..c {
                let o = (nn_ * c + ch) * h * w;
                let sl = &fv64[o..o + h * w];
                let mu = sl.iter().sum::<f64>() / sl.len() as f64;
                let var = sl.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / sl.len() as f64;
                for (i, v) in sl.iter().enumerate() {
                    want_in[o + i] = gamma_v * (v - mu) / (var + 1e-5).sqrt() + beta_v;
                }
            }
        }
        let rho1 = Tensor::ones((c,), DType::F32, &Device::Cpu).unwrap();
        let got: Vec<f32> = adalin(&feat, &gamma, &beta, &rho1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for (a, b) in got.iter().zip(&want_in) {
            assert!((*a as f64 - b).abs() < 1e-5, "rho=1: {a} vs {b}");
        }

        let mut want_ln = vec![0f64; fv.len()];
        for nn_ in 0..n {
            let o = nn_ * c * h * w;
            let sl = &fv64[o..o + c * h * w];
            let mu = sl.iter().sum::<f64>() / sl.len() as f64;
            let var = sl.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / sl.len() as f64;
            for (i, v) in sl.iter().enumerate() {
                want_ln[o + i] = gamma_v * (v - mu) / (var + 1e-5).sqrt() + beta_v;
            }
        }
        let rho0 = Tensor::zeros((c,), DType::F32, &Device::Cpu).unwrap();
        let got: Vec<f32> = adalin(&feat, &gamma, &beta, &rho0)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for (a, b) in got.iter().zip(&want_ln) {
            assert!((*a as f64 - b).abs() < 1e-5, "rho=0: {a} vs {b}");
        }

        // overfit: 8 fixed images (4 per domain), 500 alternating steps
        let size = 64usize;
        let cfg = ModelConfig {
            image_size: size,
            warper_channels: 8,
            styler_channels: 8,
            ..Default::default()
        };
        let styler = Styler::new(cfg.clone(), 7).unwrap();
        let mut opt_g = Adam::new(nn::trainable_vars(styler.gen_varmap()), 0.5, 0.999).unwrap();
        let mut opt_d = Adam::new(nn::trainable_vars(styler.disc_varmap()), 0.5, 0.999).unwrap();
        let stack = |seeds: std::ops::Range<u64>| {
            let ts: Vec<Tensor> = seeds
                .map(|s| lowfreq_photo(size, 700 + s).to_tensor().unwrap().unsqueeze(0).unwrap())
                .collect();
            Tensor::cat(&ts, 0).unwrap()
        };
        let photos = stack(0..4);
        let caris = stack(4..8);
        let weights = StylerLossWeights::default();
        let mut r = rng(78);
        let mut rec_hist = Vec::new();
        let mut worst_recomp = 0f64;
        for iter in 0..500 {
            let losses = styler_train_step(
                &styler, &photos, &caris, &mut opt_g, &mut opt_d, 1e-3, weights, &mut r, iter,
            )
            .unwrap();
            let recomposed = losses.adv
                + weights.lambda_rec_img * losses.img_recon
                + weights.lambda_cyc * losses.cycle;
            worst_recomp = worst_recomp.max((losses.total - recomposed).abs());
            rec_hist.push(losses.img_recon);
        }
        assert!(
            worst_recomp <= 1e-6,
            "objective recomposition drift {worst_recomp}"
        );
        let first: f64 = rec_hist[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = rec_hist[rec_hist.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            last <= 0.3 * first,
            "image reconstruction fell only {:.1}% ({first} -> {last})",
            100.0 * (1.0 - last / first)
        );

        // the mixing weights stay inside [0, 1] throughout training
        for v in styler.rho_values().unwrap() {
            assert!((0.0..=1.0).contains(&v), "rho {v} escaped [0, 1]");
        }
    });
}

fn write_untrained_checkpoints(dir: &Path, cfg: &TrainConfig) -> (String, String) {
    let warper = Warper::new(cfg.model.clone(), cfg.seed).unwrap();
    let wp = dir.join("warper.ckpt");
    Checkpoint {
        iteration: 0,
        config_hash: cfg.config_hash(),
        model: nn::varmap_tensors(warper.varmap()),
        opt: Default::default(),
        opt_step_count: 0,
    }
    .save(&wp)
    .unwrap();
    let styler = Styler::new(cfg.model.clone(), cfg.seed).unwrap();
    let mut model = std::collections::BTreeMap::new();
    for (k, t) in nn::varmap_tensors(styler.gen_varmap()) {
        model.insert(format!("gen.{k}"), t);
    }
    for (k, t) in nn::varmap_tensors(styler.disc_varmap()) {
        model.insert(format!("disc.{k}"), t);
    }
    let sp = dir.join("styler.ckpt");
    Checkpoint {
        iteration: 0,
        config_hash: cfg.config_hash(),
        model,
        opt: Default::default(),
        opt_step_count: 0,
    }
    .save(&sp)
    .unwrap();
    (
        wp.to_str().unwrap().to_owned(),
        sp.to_str().unwrap().to_owned(),
    )
}

fn dir_files_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn criterion_08_generation_determinism() {
    criterion(8, "deterministic generation CLI", Duration::from_secs(120), || {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("tiny.cfg");
        std::fs::write(
            &cfg_path,
            "image_size = 64\nwarper_channels = 8\nstyler_channels = 8\n",
        )
        .unwrap();
        let cfg = TrainConfig::load(&cfg_path).unwrap();
        let (wp, sp) = write_untrained_checkpoints(dir.path(), &cfg);
        let photo = dir.path().join("face.png");
        lowfreq_photo(64, 808).save_png(&photo).unwrap();

        let run = |out: &Path, extra: &[&str]| {
            let mut args = vec![
                "carime".to_owned(),
                "generate".to_owned(),
                photo.to_str().unwrap().to_owned(),
                "--out".to_owned(),
                out.to_str().unwrap().to_owned(),
                "--config".to_owned(),
                cfg_path.to_str().unwrap().to_owned(),
                "--seed".to_owned(),
                "7".to_owned(),
                "--checkpoint-warper".to_owned(),
                wp.clone(),
            ];
            args.extend(extra.iter().map(|s| s.to_string()));
            carime_core::cli::run_from(args).unwrap();
        };

        // same seed twice -> byte-identical outputs
        let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
        let full = ["--checkpoint-styler", &sp, "--num-samples", "2"];
        run(&o1, &full);
        run(&o2, &full);
        let (a, b) = (dir_files_sorted(&o1), dir_files_sorted(&o2));
        assert_eq!(a.len(), 2, "expected 2 outputs, got {:?}", a.len());
        assert_eq!(a, b, "repeated runs differ");
        assert!(a[0].0.contains("face_w0_s0_scale1"), "unexpected name {}", a[0].0);

        // scale 0 without a styler returns the aligned input exactly
        let o3 = dir.path().join("o3");
        run(&o3, &["--scale", "0"]);
        let files = dir_files_sorted(&o3);
        assert_eq!(files.len(), 1);
        assert_eq!(
            files[0].1,
            std::fs::read(&photo).unwrap(),
            "scale-0 output is not the input"
        );
    });
}

fn eye_angle(lm: &LandmarkSet) -> f64 {
    let l = [
        (lm.point(7)[0] + lm.point(8)[0]) / 2.0,
        (lm.point(7)[1] + lm.point(8)[1]) / 2.0,
    ];
    let r = [
        (lm.point(9)[0] + lm.point(10)[0]) / 2.0,
        (lm.point(9)[1] + lm.point(10)[1]) / 2.0,
    ];
    (r[1] - l[1]).atan2(r[0] - l[0])
}

#[test]
fn criterion_09_preprocessing_fidelity() {
    criterion(9, "alignment and augmentation consistency", Duration::from_secs(120), || {
        // rotation recovery: rotating the input landmarks must not survive
        // alignment
        let size = 400usize;
        let base = template_landmarks(size);
        let img = lowfreq_photo(size, 909);
        for deg in [5.0f64, 17.3, 30.0, -12.0] {
            let a = deg.to_radians();
            let c = (size as f64 - 1.0) / 2.0;
            let rotated = base
                .map(|p| {
                    let (x, y) = (p[0] - c, p[1] - c);
                    [c + x * a.cos() - y * a.sin(), c + x * a.sin() + y * a.cos()]
                })
                .unwrap();
            let (_out, out_lm) = dataset::align_and_crop(&img, &rotated).unwrap();
            let residual = eye_angle(&out_lm).to_degrees().abs();
            assert!(residual < 0.1, "{deg} deg input leaves {residual} deg");

            // the face box is 1.3x the (square) contour extent, centered
            let mut min = [f64::INFINITY; 2];
            let mut max = [f64::NEG_INFINITY; 2];
            for i in FACE_CONTOUR {
                let p = out_lm.point(i);
                for ch in 0..2 {
                    min[ch] = min[ch].min(p[ch]);
                    max[ch] = max[ch].max(p[ch]);
                }
            }
            let extent = (max[0] - min[0]).max(max[1] - min[1]);
            let want = CANONICAL_SIZE as f64 / 1.3;
            assert!((extent - want).abs() < 0.5, "contour extent {extent} vs {want}");
            // the box spans [0, 256] continuously, so its center maps to 128
            let center = [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0];
            let mid = CANONICAL_SIZE as f64 / 2.0;
            assert!(
                (center[0] - mid).abs() < 0.5 && (center[1] - mid).abs() < 0.5,
                "contour center {center:?}"
            );
        }

        // landmark/pixel consistency: dots painted at the landmarks must stay
        // within 1px of the transformed landmarks under every augmentation
        // branch
        let lm = template_landmarks(CANONICAL_SIZE);
        // single-pixel dots so the brightest pixel is unambiguous
        let mut dots = ImageBuffer::constant(CANONICAL_SIZE, CANONICAL_SIZE, -1.0);
        for p in lm.points() {
            dots.set_pixel(p[0].round() as usize, p[1].round() as usize, [1.0, 1.0, 1.0]);
        }
        let pair = SamplePair {
            photo: dots.clone(),
            caricature: dots,
            photo_landmarks: lm.clone(),
            cari_landmarks: lm.clone(),
            same_identity: true,
        };
        // seeds covering flip-only, crop-only, and both
        let pick = |want_flip: bool, want_crop: bool| -> u64 {
            for seed in 0..10_000u64 {
                let mut r = rng(seed);
                let f = r.random_range(0.0f64..1.0) < 0.5;
                let c = r.random_range(0.0f64..1.0) < 0.5;
                if f == want_flip && c == want_crop {
                    return seed;
                }
            }
            unreachable!()
        };
        for (want_flip, want_crop) in [(true, false), (false, true), (true, true)] {
            let mut r = rng(pick(want_flip, want_crop));
            let aug = dataset::augment(&pair, &mut r).unwrap();
            if want_flip && !want_crop {
                // flips must also permute left/right labels consistently
                for (k, &pk) in FLIP_PERM.iter().enumerate() {
                    let orig = lm.point(pk);
                    let got = aug.photo_landmarks.point(k);
                    assert!(
                        ((CANONICAL_SIZE as f64 - 1.0 - orig[0]) - got[0]).abs() < 1e-9
                            && (orig[1] - got[1]).abs() < 1e-9,
                        "flip permutation broken at {k}"
                    );
                }
            }
            for k in 0..NUM_LANDMARKS {
                let p = aug.photo_landmarks.point(k);
                let (px, py) = (p[0].round() as i64, p[1].round() as i64);
                // brightest pixel near the transformed landmark
                let mut best = (f32::NEG_INFINITY, 0i64, 0i64);
                for dy in -3..=3i64 {
                    for dx in -3..=3i64 {
                        let (x, y) = (px + dx, py + dy);
                        if (0..CANONICAL_SIZE as i64).contains(&x)
                            && (0..CANONICAL_SIZE as i64).contains(&y)
                        {
                            let v = aug.photo.pixel(x as usize, y as usize)[0];
                            if v > best.0 {
                                best = (v, x, y);
                            }
                        }
                    }
                }
                let dist = (((best.1 as f64 - p[0]).powi(2)) + ((best.2 as f64 - p[1]).powi(2)))
                    .sqrt();
                assert!(
                    dist <= 1.0 + 1e-9,
                    "flip={want_flip} crop={want_crop} landmark {k}: dot {dist}px away"
                );
            }
        }
    });
}

fn tiny_disk_dataset(root: &Path) {
    for (domain, s) in [("Photo", 1.0f64), ("Caricature", 1.05)] {
        let img_dir = root.join(domain).join("id0");
        let lm_dir = root.join("landmarks").join(domain).join("id0");
        std::fs::create_dir_all(&img_dir).unwrap();
        std::fs::create_dir_all(&lm_dir).unwrap();
        for k in 0..2u64 {
            lowfreq_photo(CANONICAL_SIZE, 1000 + k)
                .save_png(&img_dir.join(format!("im{k}.png")))
                .unwrap();
            let c = CANONICAL_SIZE as f64 / 2.0;
            let f = s + 0.02 * k as f64;
            template_landmarks(CANONICAL_SIZE)
                .map(|p| {
                    [
                        (c + (p[0] - c) * f).clamp(0.0, CANONICAL_SIZE as f64 - 1.0),
                        (c + (p[1] - c) * f).clamp(0.0, CANONICAL_SIZE as f64 - 1.0),
                    ]
                })
                .unwrap()
                .write(&lm_dir.join(format!("im{k}.txt")))
                .unwrap();
        }
    }
}

#[test]
fn criterion_10_resume_determinism() {
    criterion(10, "checkpoint resume determinism", Duration::from_secs(600), || {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_disk_dataset(&data);
        let mut cfg = TrainConfig::default();
        cfg.model.image_size = 64;
        cfg.model.warper_channels = 8;
        cfg.model.styler_channels = 8;
        cfg.batch_size = 2;
        cfg.warper_fixed_iters = 4;
        cfg.warper_decay_iters = 2;
        cfg.checkpoint_every = 2;
        cfg.log_window = 2;

        let read_last_total = |csv: &Path| -> f64 {
            let text = std::fs::read_to_string(csv).unwrap();
            let cols: Vec<&str> = text.lines().last().unwrap().split(',').collect();
            cols[cols.len() - 2].parse().unwrap()
        };

        let full_out = dir.path().join("full");
        trainer::run_training(TrainTarget::Warper, &cfg, &data, &full_out, None, false).unwrap();
        let full_loss = read_last_total(&full_out.join("train_warper.csv"));

        // interrupt after 4 iterations, then resume under the full schedule
        let part_out = dir.path().join("part");
        let mut short = cfg.clone();
        short.warper_fixed_iters = 4;
        short.warper_decay_iters = 0;
        trainer::run_training(TrainTarget::Warper, &short, &data, &part_out, None, false).unwrap();
        trainer::run_training(
            TrainTarget::Warper,
            &cfg,
            &data,
            &part_out,
            Some(&part_out.join("warper_final.ckpt")),
            true, // schedule fields differ from the interrupted run
        )
        .unwrap();
        let resumed_loss = read_last_total(&part_out.join("train_warper.csv"));
        assert!(
            (full_loss - resumed_loss).abs() < 1e-6,
            "uninterrupted {full_loss} vs resumed {resumed_loss}"
        );
    });
}
