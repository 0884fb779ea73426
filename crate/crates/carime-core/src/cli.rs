//! Command-line interface: preprocess, train, generate, interpolate, and
//! evaluate.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{self, DatasetIndex};
use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::{self, ImageBuffer, LandmarkSet};
use crate::nn;
use crate::styler::Styler;
use crate::trainer::{
    self, TrainConfig, TrainTarget, load_styler_for_inference, load_warper_for_inference,
};
use crate::warper::Warper;

/// Environment variable naming the preprocessed-data cache directory.
pub const CACHE_ENV: &str = "CARIME_CACHE";

#[derive(Parser)]
#[command(name = "carime", version, about = "Caricature generation with controllable exaggeration and style")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align, crop, and resize a raw dataset into the canonical layout.
    Preprocess {
        /// Raw dataset root (Photo/, Caricature/, landmarks/).
        #[arg(long)]
        data_root: PathBuf,
        /// Output root; defaults to $CARIME_CACHE.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the warper or the styler.
    Train {
        /// Which network to train.
        #[arg(long, value_parser = ["warper", "styler"])]
        module: String,
        /// Preprocessed dataset root; defaults to $CARIME_CACHE.
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Single-worker bit-deterministic mode.
        #[arg(long)]
        deterministic: bool,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint whose config hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Generate caricatures for one or more photos.
    Generate(GenerateArgs),
    /// Render a steps x steps warp/style interpolation grid for one photo.
    Interpolate {
        #[arg(long)]
        photo: PathBuf,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        checkpoint_warper: PathBuf,
        #[arg(long)]
        checkpoint_styler: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Quantitative evaluation.
    Evaluate {
        /// degree | fid | runtime
        #[arg(long, value_parser = ["degree", "fid", "runtime"])]
        metric: String,
        /// Preprocessed dataset root (photos for degree/runtime).
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        checkpoint_warper: Option<PathBuf>,
        /// First image directory for fid.
        #[arg(long)]
        set_a: Option<PathBuf>,
        /// Second image directory for fid (the comparison set, typically the
        /// test caricatures).
        #[arg(long)]
        set_b: Option<PathBuf>,
        /// HTTP embedding endpoint used by fid.
        #[arg(long)]
        embed_url: Option<String>,
        /// Cap on images per set.
        #[arg(long, default_value_t = 64)]
        num_samples: usize,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Aligned input photos.
    #[arg(required = true)]
    pub photos: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 1)]
    pub num_samples: usize,
    /// Landmark file of a reference caricature: its exaggeration guides the
    /// warp instead of random codes. Needs mean landmarks next to the warper
    /// checkpoint (or --mean-landmarks).
    #[arg(long)]
    pub warp_ref: Option<PathBuf>,
    /// Reference image whose encoded style is used instead of random codes.
    #[arg(long)]
    pub style_ref: Option<PathBuf>,
    /// Plain-text style code vector to reuse.
    #[arg(long)]
    pub style_code: Option<PathBuf>,
    /// Mean caricature landmarks (written during warper training).
    #[arg(long)]
    pub mean_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_warper: PathBuf,
    /// Without it, generation is warp-only.
    #[arg(long)]
    pub checkpoint_styler: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn cache_dir() -> Result<PathBuf> {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no directory given and the {CACHE_ENV} environment variable is unset"
            ))
        })
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

/// Reads a whitespace-separated float vector.
fn read_code_file(path: &Path) -> Result<Vec<f32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad float {t:?} in {}", path.display())))
        })
        .collect()
}

fn load_photo_at(path: &Path, size: usize) -> Result<ImageBuffer> {
    let img = ImageBuffer::load(path)?;
    if img.width() == size && img.height() == size {
        Ok(img)
    } else {
        dataset::resize_image(&img, size, size)
    }
}

/// Derives a warp code from a reference caricature's landmarks: encode the
/// mean-to-reference exaggeration field.
fn warp_code_from_reference(
    warper: &Warper,
    mean: &LandmarkSet,
    reference: &LandmarkSet,
) -> Result<Vec<f32>> {
    let size = warper.config.image_size;
    let to_size = |lm: &LandmarkSet| -> Result<LandmarkSet> {
        let (w, h) = lm.image_size();
        let sx = (size as f64 - 1.0) / (w as f64 - 1.0);
        let sy = (size as f64 - 1.0) / (h as f64 - 1.0);
        lm.map_resized(size as u32, size as u32, |p| [p[0] * sx, p[1] * sy])
    };
    let field = geometry::field_from_landmarks(&to_size(mean)?, &to_size(reference)?, true)?;
    let half = warper.config.half_size();
    let field_half = geometry::resize_field(&field, half, half)?;
    let code = warper.encode_warp(&field_half.residual().unsqueeze(0)?, false)?;
    Ok(code.flatten_all()?.to_vec1()?)
}

fn format_scale(scale: f64) -> String {
    format!("{scale}").replace('.', "p").replace('-', "m")
}

/// Runs generation, returning the written files. Per-image seeding is
/// `seed + image index`, so results do not depend on batch composition; an
/// unreadable photo is reported and skipped.
pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<PathBuf>> {
    if args.num_samples == 0 {
        return Err(Error::InvalidArgument("num_samples must be at least 1".into()));
    }
    let config = load_config(args.config.as_ref())?;
    let warper = load_warper_for_inference(&args.checkpoint_warper, &config, args.force)?;
    let styler = args
        .checkpoint_styler
        .as_ref()
        .map(|p| load_styler_for_inference(p, &config, args.force))
        .transpose()?;
    let size = config.model.image_size;

    let ref_warp_code = match &args.warp_ref {
        Some(lm_path) => {
            let mean_path = args.mean_landmarks.clone().unwrap_or_else(|| {
                args.checkpoint_warper
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("mean_landmarks.txt")
            });
            let mean = LandmarkSet::read(&mean_path, None)?;
            let reference = LandmarkSet::read(lm_path, Some((size as u32, size as u32)))?;
            Some(warp_code_from_reference(&warper, &mean, &reference)?)
        }
        None => None,
    };
    let ref_style_code: Option<Vec<f32>> = match (&args.style_ref, &args.style_code) {
        (Some(img_path), _) => {
            let styler = styler.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--style-ref needs --checkpoint-styler".into())
            })?;
            let img = load_photo_at(img_path, size)?;
            let code = styler.encode_style(&img.to_tensor()?.unsqueeze(0)?)?;
            Some(code.flatten_all()?.to_vec1()?)
        }
        (None, Some(code_path)) => Some(read_code_file(code_path)?),
        (None, None) => None,
    };

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut written = Vec::new();
    for (i, photo_path) in args.photos.iter().enumerate() {
        let photo = match load_photo_at(photo_path, size) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("skipping {}: {e}", photo_path.display());
                continue;
            }
        };
        let stem = photo_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("photo{i}"));
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(i as u64));
        for k in 0..args.num_samples {
            let zw = match &ref_warp_code {
                Some(c) => c.clone(),
                None => nn::randn_vec(&mut rng, config.model.warp_code_dim),
            };
            let zs = match &ref_style_code {
                Some(c) => c.clone(),
                None => nn::randn_vec(&mut rng, config.model.style_code_dim),
            };
            let sample = warper.sample_exaggeration(&photo, &zw, args.scale)?;
            let out_img = match &styler {
                Some(s) => s.stylize(&sample.warped, &zs)?,
                None => sample.warped,
            };
            let name = format!("{stem}_w{k}_s{k}_scale{}.png", format_scale(args.scale));
            let path = args.out.join(name);
            out_img.save_png(&path)?;
            written.push(path);
        }
    }
    if written.is_empty() {
        return Err(Error::InvalidArgument("no photo could be processed".into()));
    }
    Ok(written)
}

fn lerp(a: &[f32], b: &[f32], t: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x * (1.0 - t) + y * t).collect()
}

/// Interpolation grid: rows share the style code, columns share the warp
/// code. Returns the written grid path.
pub fn cmd_interpolate(
    photo_path: &Path,
    steps: usize,
    out_dir: &Path,
    config: &TrainConfig,
    seed: u64,
    scale: f64,
    warper: &Warper,
    styler: &Styler,
) -> Result<PathBuf> {
    if steps < 2 {
        return Err(Error::InvalidArgument("interpolate: steps must be at least 2".into()));
    }
    let size = config.model.image_size;
    let photo = load_photo_at(photo_path, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zw0 = nn::randn_vec(&mut rng, config.model.warp_code_dim);
    let zw1 = nn::randn_vec(&mut rng, config.model.warp_code_dim);
    let zs0 = nn::randn_vec(&mut rng, config.model.style_code_dim);
    let zs1 = nn::randn_vec(&mut rng, config.model.style_code_dim);

    let mut grid = ImageBuffer::constant(steps * size, steps * size, 0.0);
    for row in 0..steps {
        let ts = row as f32 / (steps - 1) as f32;
        let zs = lerp(&zs0, &zs1, ts);
        for col in 0..steps {
            let tw = col as f32 / (steps - 1) as f32;
            let zw = lerp(&zw0, &zw1, tw);
            let warped = warper.sample_exaggeration(&photo, &zw, scale)?.warped;
            let cell = styler.stylize(&warped, &zs)?;
            for y in 0..size {
                for x in 0..size {
                    grid.set_pixel(col * size + x, row * size + y, cell.pixel(x, y));
                }
            }
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = photo_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "photo".into());
    let path = out_dir.join(format!("{stem}_interp{steps}x{steps}.png"));
    grid.save_png(&path)?;
    Ok(path)
}

fn collect_photos(index: &DatasetIndex, limit: usize) -> Vec<PathBuf> {
    index
        .identities
        .iter()
        .flat_map(|id| id.photos.iter().map(|e| e.image.clone()))
        .take(limit)
        .collect()
}

fn images_in_dir(dir: &Path, limit: usize) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg") | Some("bmp")
            )
        })
        .collect();
    paths.sort();
    paths.truncate(limit);
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", dir.display())));
    }
    paths.iter().map(|p| ImageBuffer::load(p)).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    metric: &str,
    data_root: Option<PathBuf>,
    out: &Path,
    config: TrainConfig,
    seed: u64,
    scale: f64,
    checkpoint_warper: Option<PathBuf>,
    set_a: Option<PathBuf>,
    set_b: Option<PathBuf>,
    embed_url: Option<String>,
    num_samples: usize,
    force: bool,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let size = config.model.image_size;
    let need_warper = || -> Result<(Warper, Vec<ImageBuffer>, Vec<Vec<f32>>)> {
        let ckpt = checkpoint_warper
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("--checkpoint-warper required for {metric}")))?;
        let warper = load_warper_for_inference(ckpt, &config, force)?;
        let root = data_root.clone().map(Ok).unwrap_or_else(cache_dir)?;
        let index = DatasetIndex::build(&root)?;
        let paths = collect_photos(&index, num_samples);
        if paths.is_empty() {
            return Err(Error::Dataset("no photos to evaluate".into()));
        }
        let photos = paths
            .iter()
            .map(|p| load_photo_at(p, size))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..photos.len())
            .map(|_| nn::randn_vec(&mut rng, config.model.warp_code_dim))
            .collect();
        Ok((warper, photos, codes))
    };
    match metric {
        "degree" => {
            let (warper, photos, codes) = need_warper()?;
            let degrees = photos
                .iter()
                .zip(&codes)
                .map(|(p, c)| {
                    let field = warper.sample_exaggeration(p, c, 1.0)?.field;
                    let scaled = geometry::scale_field(&field, scale)?;
                    geometry::exaggeration_degree(&scaled)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = eval::DegreeReport::new(degrees, scale, "warper")?;
            report.write(&out.join("degree.csv"), &out.join("degree.txt"))?;
            println!("mean degree at scale {scale}: {:.4}", report.mean);
        }
        "runtime" => {
            let (warper, photos, codes) = need_warper()?;
            let report = eval::runtime_benchmark(&warper, &photos, &codes, 3)?;
            eval::write_benchmark_report(&report, &out.join("runtime.csv"), &out.join("runtime.txt"))?;
            println!("mean seconds/image: {:.6} on {}", report.mean_seconds, report.hardware);
        }
        "fid" => {
            let (a, b) = match (set_a, set_b) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidArgument(
                        "fid needs --set-a and --set-b image directories".into(),
                    ));
                }
            };
            let url = embed_url.ok_or_else(|| {
                Error::InvalidArgument("fid needs --embed-url (no extractor is shipped)".into())
            })?;
            let client = eval::HttpEmbeddingClient::new(url);
            use eval::EmbeddingProvider as _;
            let fa = client.embed(&images_in_dir(&a, num_samples)?)?;
            let fb = client.embed(&images_in_dir(&b, num_samples)?)?;
            let value = eval::fid(&fa, &fb)?;
            std::fs::write(out.join("fid.txt"), format!("fid: {value:.4}\n"))
                .map_err(|e| Error::io(out, e))?;
            println!("fid: {value:.4}");
        }
        other => return Err(Error::InvalidArgument(format!("unknown metric {other}"))),
    }
    Ok(())
}

/// Parses arguments and runs the selected command.
pub fn run_from<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    match cli.command {
        Command::Preprocess { data_root, out } => {
            let out = out.map(Ok).unwrap_or_else(cache_dir)?;
            let n = dataset::preprocess(&data_root, &out)?;
            println!("preprocessed {n} images into {}", out.display());
            Ok(())
        }
        Command::Train {
            module,
            data_root,
            out,
            config,
            seed,
            deterministic,
            resume,
            force,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if deterministic {
                cfg.deterministic = true;
            }
            let target = match module.as_str() {
                "warper" => TrainTarget::Warper,
                _ => TrainTarget::Styler,
            };
            let data_root = data_root.map(Ok).unwrap_or_else(cache_dir)?;
            let ckpt = trainer::run_training(target, &cfg, &data_root, &out, resume.as_deref(), force)?;
            println!("final checkpoint: {}", ckpt.display());
            Ok(())
        }
        Command::Generate(args) => {
            let files = cmd_generate(&args)?;
            println!("wrote {} files to {}", files.len(), args.out.display());
            Ok(())
        }
        Command::Interpolate {
            photo,
            steps,
            out,
            config,
            seed,
            scale,
            checkpoint_warper,
            checkpoint_styler,
            force,
        } => {
            let cfg = load_config(config.as_ref())?;
            let warper = load_warper_for_inference(&checkpoint_warper, &cfg, force)?;
            let styler = load_styler_for_inference(&checkpoint_styler, &cfg, force)?;
            let path = cmd_interpolate(&photo, steps, &out, &cfg, seed, scale, &warper, &styler)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Evaluate {
            metric,
            data_root,
            out,
            config,
            seed,
            scale,
            checkpoint_warper,
            set_a,
            set_b,
            embed_url,
            num_samples,
            force,
        } => cmd_evaluate(
            &metric,
            data_root,
            &out,
            load_config(config.as_ref())?,
            seed,
            scale,
            checkpoint_warper,
            set_a,
            set_b,
            embed_url,
            num_samples,
            force,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Checkpoint;

    fn tiny_config_file(dir: &Path) -> PathBuf {
        let p = dir.join("tiny.cfg");
        std::fs::write(
            &p,
            "image_size = 64\nwarper_channels = 8\nstyler_channels = 8\nbatch_size = 2\n",
        )
        .unwrap();
        p
    }

    fn write_untrained_checkpoints(dir: &Path, cfg: &TrainConfig) -> (PathBuf, PathBuf) {
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
        (wp, sp)
    }

    #[test]
    fn unknown_flag_is_an_error() {
        assert!(run_from(["carime", "generate", "--bogus"]).is_err());
        assert!(run_from(["carime", "nonsense"]).is_err());
    }

    #[test]
    fn generate_is_deterministic_and_counts_match() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = tiny_config_file(dir.path());
        let cfg = TrainConfig::load(&cfg_path).unwrap();
        let (wp, sp) = write_untrained_checkpoints(dir.path(), &cfg);
        let photo = dir.path().join("face.png");
        let mut img = ImageBuffer::constant(64, 64, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                img.set_pixel(x, y, [x as f32 / 32.0 - 1.0, y as f32 / 32.0 - 1.0, 0.3]);
            }
        }
        img.save_png(&photo).unwrap();

        let mk_args = |out: PathBuf| GenerateArgs {
            photos: vec![photo.clone()],
            out,
            config: Some(cfg_path.clone()),
            seed: 7,
            scale: 1.0,
            num_samples: 3,
            warp_ref: None,
            style_ref: None,
            style_code: None,
            mean_landmarks: None,
            checkpoint_warper: wp.clone(),
            checkpoint_styler: Some(sp.clone()),
            force: false,
        };
        let out1 = cmd_generate(&mk_args(dir.path().join("g1"))).unwrap();
        let out2 = cmd_generate(&mk_args(dir.path().join("g2"))).unwrap();
        assert_eq!(out1.len(), 3);
        assert_eq!(out2.len(), 3);
        for (a, b) in out1.iter().zip(&out2) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{a:?} vs {b:?}");
        }
        assert!(out1[0]
            .file_name()
            .unwrap()
            .to_string_lossy()
            .contains("face_w0_s0_scale1"));
    }

    #[test]
    fn generate_scale_zero_warp_only_returns_input() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = tiny_config_file(dir.path());
        let cfg = TrainConfig::load(&cfg_path).unwrap();
        let (wp, _sp) = write_untrained_checkpoints(dir.path(), &cfg);
        let photo = dir.path().join("in.png");
        let mut img = ImageBuffer::constant(64, 64, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                img.set_pixel(x, y, [((x * 7 + y) % 13) as f32 / 6.5 - 1.0, 0.0, -0.2]);
            }
        }
        img.save_png(&photo).unwrap();
        let args = GenerateArgs {
            photos: vec![photo.clone()],
            out: dir.path().join("g0"),
            config: Some(cfg_path),
            seed: 1,
            scale: 0.0,
            num_samples: 1,
            warp_ref: None,
            style_ref: None,
            style_code: None,
            mean_landmarks: None,
            checkpoint_warper: wp,
            checkpoint_styler: None,
            force: false,
        };
        let out = cmd_generate(&args).unwrap();
        assert_eq!(std::fs::read(&out[0]).unwrap(), std::fs::read(&photo).unwrap());
    }

    #[test]
    fn interpolate_grid_dimensions_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = tiny_config_file(dir.path());
        let cfg = TrainConfig::load(&cfg_path).unwrap();
        let (wp, sp) = write_untrained_checkpoints(dir.path(), &cfg);
        let warper = load_warper_for_inference(&wp, &cfg, false).unwrap();
        let styler = load_styler_for_inference(&sp, &cfg, false).unwrap();
        let photo = dir.path().join("p.png");
        ImageBuffer::constant(64, 64, 0.1).save_png(&photo).unwrap();
        let g1 = cmd_interpolate(&photo, 2, &dir.path().join("i1"), &cfg, 3, 1.0, &warper, &styler).unwrap();
        let g2 = cmd_interpolate(&photo, 2, &dir.path().join("i2"), &cfg, 3, 1.0, &warper, &styler).unwrap();
        let img = ImageBuffer::load(&g1).unwrap();
        assert_eq!((img.width(), img.height()), (128, 128));
        assert_eq!(std::fs::read(&g1).unwrap(), std::fs::read(&g2).unwrap());
        assert!(
            cmd_interpolate(&photo, 1, &dir.path().join("i3"), &cfg, 3, 1.0, &warper, &styler).is_err()
        );
    }

    #[test]
    fn code_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("code.txt");
        std::fs::write(&p, "0.5 -1.25 3\n").unwrap();
        assert_eq!(read_code_file(&p).unwrap(), vec![0.5, -1.25, 3.0]);
        std::fs::write(&p, "0.5 oops\n").unwrap();
        assert!(read_code_file(&p).is_err());
    }
}
