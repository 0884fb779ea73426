//! Evaluation: exaggeration-degree statistics, degree-matched scale search,
//! Fréchet distance over pluggable feature embeddings, an identity-embedding
//! endpoint client, and runtime benchmarking.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use base64::Engine as _;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DeformationField, ImageBuffer, exaggeration_degree};
use crate::warper::Warper;

/// Per-image exaggeration degrees with their mean.
#[derive(Debug, Clone)]
pub struct DegreeReport {
    pub degrees: Vec<f64>,
    pub mean: f64,
    pub scale: f64,
    pub method: String,
}

impl DegreeReport {
    pub fn new(degrees: Vec<f64>, scale: f64, method: impl Into<String>) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::InvalidArgument("DegreeReport: empty list".into()));
        }
        if degrees.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidArgument(
                "DegreeReport: degrees must be finite and non-negative".into(),
            ));
        }
        let mean = degrees.iter().sum::<f64>() / degrees.len() as f64;
        Ok(Self {
            degrees,
            mean,
            scale,
            method: method.into(),
        })
    }

    /// CSV (`index,degree`) plus a short text summary.
    pub fn write(&self, csv_path: &Path, summary_path: &Path) -> Result<()> {
        let mut csv = String::from("index,degree\n");
        for (i, d) in self.degrees.iter().enumerate() {
            csv.push_str(&format!("{i},{d}\n"));
        }
        std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
        let summary = format!(
            "method: {}\nimages: {}\nscale: {}\nmean degree: {:.4}\n",
            self.method,
            self.degrees.len(),
            self.scale,
            self.mean
        );
        std::fs::write(summary_path, summary).map_err(|e| Error::io(summary_path, e))
    }
}

/// Mean exaggeration degree over a set of deformation fields.
pub fn mean_degree(fields: &[DeformationField]) -> Result<f64> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument("mean_degree: empty list".into()));
    }
    let sum: f64 = fields
        .iter()
        .map(exaggeration_degree)
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(sum / fields.len() as f64)
}

/// Mean degree the warper produces over `(photo, warp code)` pairs at unit
/// scale.
pub fn warper_mean_degree(
    warper: &Warper,
    photos: &[ImageBuffer],
    codes: &[Vec<f32>],
) -> Result<f64> {
    if photos.is_empty() || photos.len() != codes.len() {
        return Err(Error::InvalidArgument(format!(
            "warper_mean_degree: {} photos vs {} codes",
            photos.len(),
            codes.len()
        )));
    }
    let fields = photos
        .iter()
        .zip(codes)
        .map(|(p, c)| Ok(warper.sample_exaggeration(p, c, 1.0)?.field))
        .collect::<Result<Vec<_>>>()?;
    mean_degree(&fields)
}

/// Scale factor that makes the warper hit a target mean degree. The degree is
/// absolutely homogeneous in the scale, so the answer is exact:
/// `s = target / mean_degree(1)`.
pub fn scale_for_degree(
    warper: &Warper,
    photos: &[ImageBuffer],
    codes: &[Vec<f32>],
    target: f64,
) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale_for_degree: target must be positive, got {target}"
        )));
    }
    let base = warper_mean_degree(warper, photos, codes)?;
    if base == 0.0 {
        return Err(Error::InvalidArgument(
            "scale_for_degree: warper produces identity fields (mean degree 0)".into(),
        ));
    }
    Ok(target / base)
}

fn mean_and_cov(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let d = features[0].len();
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    // unbiased estimator (N-1 denominator)
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

const PSD_TOLERANCE: f64 = -1e-6;

/// Symmetric PSD square root via eigendecomposition; eigenvalues slightly
/// negative from round-off are clipped to zero, anything below the tolerance
/// is an error.
fn sqrtm_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < PSD_TOLERANCE * scale {
            return Err(Error::InvalidArgument(format!(
                "fid: {what} is not positive semi-definite (eigenvalue {v:.3e})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    if features_a.len() < 2 || features_b.len() < 2 {
        return Err(Error::InvalidArgument(
            "fid: each feature set needs at least 2 vectors".into(),
        ));
    }
    let d = features_a[0].len();
    if features_a.iter().chain(features_b).any(|f| f.len() != d) {
        return Err(Error::Shape("fid: feature dimension mismatch".into()));
    }
    let (mu_a, cov_a) = mean_and_cov(features_a)?;
    let (mu_b, cov_b) = mean_and_cov(features_b)?;

    // tr((S_a S_b)^{1/2}) through the symmetric route: with B = sqrt(S_a),
    // the product's square-root trace equals that of B S_b B.
    let b = sqrtm_psd(&cov_a, "covariance of the first set")?;
    let inner = &b * &cov_b * &b;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = inner_sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < PSD_TOLERANCE * scale {
            return Err(Error::InvalidArgument(format!(
                "fid: covariance product is not positive semi-definite (eigenvalue {v:.3e})"
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let diff = &mu_a - &mu_b;
    Ok(diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// Wall-clock statistics of warper inference.
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub mean_seconds: f64,
    pub per_image: Vec<f64>,
    pub hardware: String,
}

/// Times `sample_exaggeration` per photo, excluding `warm_up` untimed
/// initial runs.
pub fn runtime_benchmark(
    warper: &Warper,
    photos: &[ImageBuffer],
    codes: &[Vec<f32>],
    warm_up: usize,
) -> Result<BenchmarkReport> {
    if photos.is_empty() || photos.len() != codes.len() {
        return Err(Error::InvalidArgument(
            "runtime_benchmark: empty or mismatched photo/code lists".into(),
        ));
    }
    for i in 0..warm_up {
        let k = i % photos.len();
        warper.sample_exaggeration(&photos[k], &codes[k], 1.0)?;
    }
    let mut per_image = Vec::with_capacity(photos.len());
    for (p, c) in photos.iter().zip(codes) {
        let t = Instant::now();
        warper.sample_exaggeration(p, c, 1.0)?;
        per_image.push(t.elapsed().as_secs_f64());
    }
    let mean_seconds = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(BenchmarkReport {
        mean_seconds,
        per_image,
        hardware: format!("{}-{} (cpu)", std::env::consts::ARCH, std::env::consts::OS),
    })
}

/// Synchronous embedding contract: a batch of images in, one float vector per
/// image out.
pub trait EmbeddingProvider {
    fn embed(&self, images: &[ImageBuffer]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Serialize)]
struct EmbedRequest {
    images: Vec<String>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// HTTP JSON embedding endpoint client: POSTs base64 PNG images, expects
/// `{"embeddings": [[...], ...]}`. Retries with exponential backoff.
pub struct HttpEmbeddingClient {
    pub url: String,
    pub retries: usize,
    pub timeout: std::time::Duration,
}

impl HttpEmbeddingClient {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            retries: 3,
            timeout: std::time::Duration::from_secs(30),
        }
    }

    fn encode(images: &[ImageBuffer]) -> Result<Vec<String>> {
        images
            .iter()
            .map(|img| {
                let mut png = std::io::Cursor::new(Vec::new());
                img.to_rgb()
                    .write_to(&mut png, image::ImageFormat::Png)?;
                Ok(base64::engine::general_purpose::STANDARD.encode(png.into_inner()))
            })
            .collect()
    }
}

impl EmbeddingProvider for HttpEmbeddingClient {
    fn embed(&self, images: &[ImageBuffer]) -> Result<Vec<Vec<f64>>> {
        let body = EmbedRequest {
            images: Self::encode(images)?,
        };
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut last = String::new();
        for attempt in 0..self.retries {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(100 << attempt));
            }
            match agent.post(&self.url).send_json(&body) {
                Ok(resp) => {
                    let parsed: EmbedResponse = resp.into_json().map_err(|e| Error::Endpoint {
                        attempts: attempt + 1,
                        detail: format!("bad response body: {e}"),
                    })?;
                    if parsed.embeddings.len() != images.len() {
                        return Err(Error::Endpoint {
                            attempts: attempt + 1,
                            detail: format!(
                                "{} embeddings for {} images",
                                parsed.embeddings.len(),
                                images.len()
                            ),
                        });
                    }
                    return Ok(parsed.embeddings);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Endpoint {
            attempts: self.retries,
            detail: last,
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Rank-1 identification accuracy: each probe matches the gallery entry with
/// the highest cosine similarity; a hit when the identities agree.
pub fn rank1_accuracy(
    gallery: &[(String, Vec<f64>)],
    probes: &[(String, Vec<f64>)],
) -> Result<f64> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::InvalidArgument("rank1_accuracy: empty input".into()));
    }
    let mut hits = 0usize;
    for (pid, pvec) in probes {
        let best = gallery
            .iter()
            .max_by(|a, b| {
                cosine(pvec, &a.1)
                    .partial_cmp(&cosine(pvec, &b.1))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        if &best.0 == pid {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Writes a benchmark report as CSV plus text summary.
pub fn write_benchmark_report(report: &BenchmarkReport, csv_path: &Path, summary_path: &Path) -> Result<()> {
    let mut csv = String::from("index,seconds\n");
    for (i, s) in report.per_image.iter().enumerate() {
        csv.push_str(&format!("{i},{s}\n"));
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    let mut f = std::fs::File::create(summary_path).map_err(|e| Error::io(summary_path, e))?;
    writeln!(f, "hardware: {}", report.hardware).map_err(|e| Error::io(summary_path, e))?;
    writeln!(f, "images: {}", report.per_image.len()).map_err(|e| Error::io(summary_path, e))?;
    writeln!(f, "mean seconds/image: {:.6}", report.mean_seconds)
        .map_err(|e| Error::io(summary_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn mean_degree_identity_and_oracle() {
        let ids: Vec<DeformationField> = (0..3)
            .map(|_| DeformationField::identity(8, 8).unwrap())
            .collect();
        assert_eq!(mean_degree(&ids).unwrap(), 0.0);

        // scalar oracle over a hand-built residual
        let (h, w) = (4usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res: Vec<f32> = (0..2 * h * w).map(|_| rng.random_range(-0.2f32..0.2)).collect();
        let t = Tensor::from_vec(res.clone(), (2, h, w), &Device::Cpu).unwrap();
        let field = DeformationField::from_residual(t).unwrap();
        let mut oracle = 0f64;
        for i in 0..h * w {
            let dx = res[i] as f64 * w as f64 / 2.0;
            let dy = res[h * w + i] as f64 * h as f64 / 2.0;
            oracle += (dx * dx + dy * dy).sqrt();
        }
        oracle /= (h * w) as f64;
        let got = mean_degree(&[field]).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    fn exact_gaussian_set(mu: &[f64], sigma: &[f64]) -> Vec<Vec<f64>> {
        // 2d points with exact sample mean mu and exact unbiased covariance
        // diag(sigma): mu +- a_i e_i with a_i = sqrt(sigma_i (2d - 1) / 2)
        let d = mu.len();
        let mut out = Vec::new();
        for i in 0..d {
            let a = (sigma[i] * (2.0 * d as f64 - 1.0) / 2.0).sqrt();
            for sign in [1.0, -1.0] {
                let mut p = mu.to_vec();
                p[i] += sign * a;
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn fid_zero_and_symmetric() {
        let a = exact_gaussian_set(&[0.0, 1.0, -2.0], &[1.0, 0.5, 0.25]);
        let b = exact_gaussian_set(&[1.0, 0.0, 0.5], &[0.8, 1.2, 0.6]);
        assert!(fid(&a, &a).unwrap().abs() < 1e-3);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_matches_closed_form_on_diagonal_gaussians() {
        let mu_a = [0.0f64, 0.0, 0.0];
        let mu_b = [2.0f64, 1.0, 0.0];
        let sig_a = [1.0f64, 0.5, 0.25];
        let sig_b = [0.8f64, 1.2, 0.6];
        // diagonal case: ||dmu||^2 + sum (sqrt(sa) - sqrt(sb))^2
        let closed: f64 = mu_a
            .iter()
            .zip(&mu_b)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            + sig_a
                .iter()
                .zip(&sig_b)
                .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
                .sum::<f64>();

        // exact-moments point sets reproduce it to numerical precision
        let a = exact_gaussian_set(&mu_a, &sig_a);
        let b = exact_gaussian_set(&mu_b, &sig_b);
        let got = fid(&a, &b).unwrap();
        assert!((got - closed).abs() < 1e-9, "{got} vs {closed}");

        // sampled Gaussians land within 1%
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draw = |mu: &[f64; 3], sig: &[f64; 3]| -> Vec<Vec<f64>> {
            (0..40_000)
                .map(|_| {
                    (0..3)
                        .map(|i| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            mu[i] + z * sig[i].sqrt()
                        })
                        .collect()
                })
                .collect()
        };
        let a = draw(&mu_a, &sig_a);
        let b = draw(&mu_b, &sig_b);
        let got = fid(&a, &b).unwrap();
        assert!(
            (got - closed).abs() < 0.01 * closed,
            "sampled {got} vs closed form {closed}"
        );
    }

    #[test]
    fn fid_rejects_bad_input() {
        let a = exact_gaussian_set(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(fid(&a, &[vec![0.0, 0.0]]).is_err());
        let short = vec![vec![0.0], vec![1.0]];
        assert!(fid(&a, &short).is_err());
    }

    #[test]
    fn rank1_examples() {
        let gallery: Vec<(String, Vec<f64>)> = (0..5)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                (format!("id{i}"), v)
            })
            .collect();
        // probes equal the gallery -> perfect rank-1
        assert_eq!(rank1_accuracy(&gallery, &gallery).unwrap(), 1.0);

        // random unit probes over N identities -> about 1/N
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let probes: Vec<(String, Vec<f64>)> = (0..4000)
            .map(|k| {
                let v: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
                (format!("id{}", k % 5), v)
            })
            .collect();
        let acc = rank1_accuracy(&gallery, &probes).unwrap();
        assert!((acc - 0.2).abs() < 0.03, "random rank-1 {acc}");
    }

    #[test]
    fn scale_for_degree_homogeneity_and_degenerate() {
        use crate::warper::ModelConfig;
        let config = ModelConfig {
            image_size: 64,
            warper_channels: 8,
            styler_channels: 8,
            ..Default::default()
        };
        let warper = Warper::new(config, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let photos: Vec<ImageBuffer> = (0..2)
            .map(|_| {
                let data: Vec<f32> = (0..64 * 64 * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                ImageBuffer::new(data, 64, 64).unwrap()
            })
            .collect();
        let codes: Vec<Vec<f32>> = (0..2)
            .map(|_| (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();

        // untrained decoder emits identity fields -> degenerate error
        assert!(scale_for_degree(&warper, &photos, &codes, 3.0).is_err());

        // nudge the zero-initialized field head so fields become non-trivial
        {
            let data = warper.varmap().data().lock().unwrap();
            for (name, var) in data.iter() {
                if name.contains("zero_head") && name.ends_with(".bias") {
                    var.set(&Tensor::from_vec(vec![0.02f32, -0.01], (2,), &Device::Cpu).unwrap())
                        .unwrap();
                }
            }
        }
        let base = warper_mean_degree(&warper, &photos, &codes).unwrap();
        assert!(base > 0.0);
        let s1 = scale_for_degree(&warper, &photos, &codes, base).unwrap();
        assert!((s1 - 1.0).abs() < 1e-9);
        let s2 = scale_for_degree(&warper, &photos, &codes, 2.0 * base).unwrap();
        assert!((s2 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn benchmark_mean_is_total_over_n() {
        use crate::warper::ModelConfig;
        let config = ModelConfig {
            image_size: 64,
            warper_channels: 8,
            styler_channels: 8,
            ..Default::default()
        };
        let warper = Warper::new(config, 1).unwrap();
        let photos = vec![ImageBuffer::constant(64, 64, 0.0); 3];
        let codes = vec![vec![0.0f32; 64]; 3];
        let report = runtime_benchmark(&warper, &photos, &codes, 1).unwrap();
        assert_eq!(report.per_image.len(), 3);
        let total: f64 = report.per_image.iter().sum();
        assert!((report.mean_seconds - total / 3.0).abs() < 1e-12);
        assert!(report.mean_seconds > 0.0);
    }

    fn fake_endpoint(statuses: Vec<u16>, body: String) -> (String, std::thread::JoinHandle<()>) {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for status in statuses {
                let (mut stream, _) = listener.accept().unwrap();
                // drain the request headers + body (best effort)
                let mut buf = [0u8; 65536];
                let _ = stream.read(&mut buf);
                let payload = if status == 200 { body.clone() } else { String::new() };
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        (format!("http://{addr}/embed"), handle)
    }

    #[test]
    fn http_client_retries_then_succeeds() {
        let body = r#"{"embeddings": [[1.0, 2.0]]}"#.to_string();
        let (url, handle) = fake_endpoint(vec![500, 200], body);
        let mut client = HttpEmbeddingClient::new(url);
        client.retries = 3;
        let imgs = vec![ImageBuffer::constant(8, 8, 0.0)];
        let out = client.embed(&imgs).unwrap();
        assert_eq!(out, vec![vec![1.0, 2.0]]);
        handle.join().unwrap();
    }

    #[test]
    fn http_client_fails_after_retries() {
        let (url, handle) = fake_endpoint(vec![500, 500], String::new());
        let mut client = HttpEmbeddingClient::new(url);
        client.retries = 2;
        let imgs = vec![ImageBuffer::constant(8, 8, 0.0)];
        match client.embed(&imgs) {
            Err(Error::Endpoint { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected endpoint error, got {other:?}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn degree_report_write() {
        let dir = tempfile::tempdir().unwrap();
        let report = DegreeReport::new(vec![1.0, 3.0], 1.0, "test").unwrap();
        assert_eq!(report.mean, 2.0);
        let csv = dir.path().join("deg.csv");
        let txt = dir.path().join("deg.txt");
        report.write(&csv, &txt).unwrap();
        assert!(std::fs::read_to_string(&csv).unwrap().contains("1,3"));
        assert!(std::fs::read_to_string(&txt).unwrap().contains("mean degree: 2.0000"));
        assert!(DegreeReport::new(vec![], 1.0, "x").is_err());
        assert!(DegreeReport::new(vec![-1.0], 1.0, "x").is_err());
    }
}
