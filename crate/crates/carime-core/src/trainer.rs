//! Training orchestration: config parsing and hashing, the learning-rate
//! schedule, batch assembly, logging, checkpointing, and resumable loops for
//! both networks.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::{self, DatasetIndex, PairPolicy, SamplePair};
use crate::error::{Error, Result};
use crate::geometry::{self, ImageBuffer, LandmarkSet, mean_landmarks};
use crate::nn::{self, Adam, Checkpoint};
use crate::styler::{Styler, StylerLossWeights, styler_train_step};
use crate::warper::{ModelConfig, Warper, WarperBatch, WarperLossWeights, warper_train_step};

/// All training hyperparameters. Serialized as flat `key = value` text; the
/// config hash is computed over the sorted canonical form, so key order in a
/// file never matters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub warper_fixed_iters: usize,
    pub warper_decay_iters: usize,
    pub styler_fixed_iters: usize,
    pub styler_decay_iters: usize,
    pub lambda_rec_img: f64,
    pub lambda_rec_warp: f64,
    pub lambda_cyc: f64,
    pub lambda_tv: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_window: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            beta1: 0.5,
            beta2: 0.999,
            lr: 1e-4,
            warper_fixed_iters: 10_000,
            warper_decay_iters: 10_000,
            styler_fixed_iters: 250_000,
            styler_decay_iters: 250_000,
            lambda_rec_img: 10.0,
            lambda_rec_warp: 10.0,
            lambda_cyc: 1.0,
            lambda_tv: 5e-6,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 1000,
            log_window: 100,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
        }
        match key {
            "image_size" => self.model.image_size = parse(key, value)?,
            "warp_code_dim" => self.model.warp_code_dim = parse(key, value)?,
            "content_code_dim" => self.model.content_code_dim = parse(key, value)?,
            "style_code_dim" => self.model.style_code_dim = parse(key, value)?,
            "warper_channels" => self.model.warper_channels = parse(key, value)?,
            "styler_channels" => self.model.styler_channels = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warper_fixed_iters" => self.warper_fixed_iters = parse(key, value)?,
            "warper_decay_iters" => self.warper_decay_iters = parse(key, value)?,
            "styler_fixed_iters" => self.styler_fixed_iters = parse(key, value)?,
            "styler_decay_iters" => self.styler_decay_iters = parse(key, value)?,
            "lambda_rec_img" => self.lambda_rec_img = parse(key, value)?,
            "lambda_rec_warp" => self.lambda_rec_warp = parse(key, value)?,
            "lambda_cyc" => self.lambda_cyc = parse(key, value)?,
            "lambda_tv" => self.lambda_tv = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_window" => self.log_window = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text (`#` starts a comment) on top of the
    /// defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Canonical serialization: one sorted `key = value` line per field.
    pub fn canonical_string(&self) -> String {
        let mut lines = vec![
            format!("batch_size = {}", self.batch_size),
            format!("beta1 = {}", self.beta1),
            format!("beta2 = {}", self.beta2),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("content_code_dim = {}", self.model.content_code_dim),
            format!("deterministic = {}", self.deterministic),
            format!("image_size = {}", self.model.image_size),
            format!("lambda_cyc = {}", self.lambda_cyc),
            format!("lambda_rec_img = {}", self.lambda_rec_img),
            format!("lambda_rec_warp = {}", self.lambda_rec_warp),
            format!("lambda_tv = {}", self.lambda_tv),
            format!("log_window = {}", self.log_window),
            format!("lr = {}", self.lr),
            format!("seed = {}", self.seed),
            format!("style_code_dim = {}", self.model.style_code_dim),
            format!("styler_channels = {}", self.model.styler_channels),
            format!("styler_decay_iters = {}", self.styler_decay_iters),
            format!("styler_fixed_iters = {}", self.styler_fixed_iters),
            format!("warp_code_dim = {}", self.model.warp_code_dim),
            format!("warper_channels = {}", self.model.warper_channels),
            format!("warper_decay_iters = {}", self.warper_decay_iters),
            format!("warper_fixed_iters = {}", self.warper_fixed_iters),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_string().as_bytes()).into()
    }
}

/// Learning rate at `iter`: `base` through the fixed phase, then linear decay
/// hitting exactly 0 on the final iteration.
pub fn lr_at(iter: usize, phase_len: usize, decay_len: usize, base: f64) -> Result<f64> {
    if iter >= phase_len + decay_len {
        return Err(Error::InvalidArgument(format!(
            "lr_at: iteration {iter} outside schedule of {} steps",
            phase_len + decay_len
        )));
    }
    if iter < phase_len {
        Ok(base)
    } else {
        let k = (iter - phase_len + 1) as f64;
        Ok(base * (1.0 - k / decay_len as f64))
    }
}

/// Which network a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Warper,
    Styler,
}

/// Per-iteration RNG so a resumed run reproduces the exact sample and noise
/// draws of an uninterrupted one.
pub fn iter_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((iter as u64).to_le_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

fn resize_with_landmarks(
    img: &ImageBuffer,
    lm: &LandmarkSet,
    size: usize,
) -> Result<(ImageBuffer, LandmarkSet)> {
    if img.width() == size && img.height() == size {
        return Ok((img.clone(), lm.clone()));
    }
    let sx = (size as f64 - 1.0) / (img.width() as f64 - 1.0);
    let sy = (size as f64 - 1.0) / (img.height() as f64 - 1.0);
    let out = dataset::resize_image(img, size, size)?;
    let lm = lm.map_resized(size as u32, size as u32, |p| [p[0] * sx, p[1] * sy])?;
    Ok((out, lm))
}

fn stack_images(imgs: &[ImageBuffer]) -> Result<Tensor> {
    let ts = imgs
        .iter()
        .map(|i| Ok(i.to_tensor()?.unsqueeze(0)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Builds a warper batch from sampled pairs: photo tensor, exaggeration
/// fields (mean -> caricature), and target fields (photo -> caricature).
pub fn assemble_warper_batch(
    pairs: &[SamplePair],
    mean: &LandmarkSet,
    size: usize,
) -> Result<WarperBatch> {
    let mut photos = Vec::new();
    let mut mc = Vec::new();
    let mut pc = Vec::new();
    for pair in pairs {
        let (photo, photo_lm) = resize_with_landmarks(&pair.photo, &pair.photo_landmarks, size)?;
        let (_, cari_lm) = resize_with_landmarks(&pair.caricature, &pair.cari_landmarks, size)?;
        let f_mc = geometry::field_from_landmarks(mean, &cari_lm, true)?;
        let f_pc = geometry::field_from_landmarks(&photo_lm, &cari_lm, true)?;
        photos.push(photo);
        mc.push(f_mc.residual().unsqueeze(0)?);
        pc.push(f_pc.residual().unsqueeze(0)?);
    }
    Ok(WarperBatch {
        photos: stack_images(&photos)?,
        fields_mc: Tensor::cat(&mc, 0)?,
        fields_pc: Tensor::cat(&pc, 0)?,
    })
}

struct CsvLog {
    path: PathBuf,
}

impl CsvLog {
    fn new(path: PathBuf, header: &str) -> Result<Self> {
        if !path.exists() {
            std::fs::write(&path, format!("{header}\n")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path })
    }

    fn append(&self, line: &str) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

fn save_warper_checkpoint(
    warper: &Warper,
    opt: &Adam,
    config: &TrainConfig,
    iter: u64,
    path: &Path,
) -> Result<()> {
    Checkpoint {
        iteration: iter,
        config_hash: config.config_hash(),
        model: nn::varmap_tensors(warper.varmap()),
        opt: opt.state_tensors().into_iter().collect(),
        opt_step_count: opt.step_count(),
    }
    .save(path)
}

fn save_styler_checkpoint(
    styler: &Styler,
    opt_g: &Adam,
    opt_d: &Adam,
    config: &TrainConfig,
    iter: u64,
    path: &Path,
) -> Result<()> {
    let mut model = BTreeMap::new();
    for (k, t) in nn::varmap_tensors(styler.gen_varmap()) {
        model.insert(format!("gen.{k}"), t);
    }
    for (k, t) in nn::varmap_tensors(styler.disc_varmap()) {
        model.insert(format!("disc.{k}"), t);
    }
    let mut opt = BTreeMap::new();
    for (k, t) in opt_g.state_tensors() {
        opt.insert(format!("gen.{k}"), t);
    }
    for (k, t) in opt_d.state_tensors() {
        opt.insert(format!("disc.{k}"), t);
    }
    Checkpoint {
        iteration: iter,
        config_hash: config.config_hash(),
        model,
        opt,
        opt_step_count: opt_g.step_count(),
    }
    .save(path)
}

fn strip_prefix_map(map: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    map.iter()
        .filter_map(|(k, t)| Some((k.strip_prefix(prefix)?.to_string(), t.clone())))
        .collect()
}

/// Restores warper parameters and optimizer state; returns the iteration to
/// resume from.
pub fn load_warper_checkpoint(
    path: &Path,
    warper: &Warper,
    opt: &mut Adam,
    config: &TrainConfig,
    force: bool,
) -> Result<u64> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_config(&config.config_hash(), force)?;
    nn::load_varmap(warper.varmap(), &ckpt.model)?;
    opt.load_state(&ckpt.opt, ckpt.opt_step_count)?;
    Ok(ckpt.iteration)
}

/// Styler counterpart of [`load_warper_checkpoint`].
pub fn load_styler_checkpoint(
    path: &Path,
    styler: &Styler,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    config: &TrainConfig,
    force: bool,
) -> Result<u64> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_config(&config.config_hash(), force)?;
    nn::load_varmap(styler.gen_varmap(), &strip_prefix_map(&ckpt.model, "gen."))?;
    nn::load_varmap(styler.disc_varmap(), &strip_prefix_map(&ckpt.model, "disc."))?;
    opt_g.load_state(&strip_prefix_map(&ckpt.opt, "gen."), ckpt.opt_step_count)?;
    opt_d.load_state(&strip_prefix_map(&ckpt.opt, "disc."), ckpt.opt_step_count)?;
    Ok(ckpt.iteration)
}

/// Builds a warper with the config's architecture and restores parameters
/// from a checkpoint (inference use: no optimizer state).
pub fn load_warper_for_inference(path: &Path, config: &TrainConfig, force: bool) -> Result<Warper> {
    let warper = Warper::new(config.model.clone(), config.seed)?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_config(&config.config_hash(), force)?;
    nn::load_varmap(warper.varmap(), &ckpt.model)?;
    Ok(warper)
}

/// Styler counterpart of [`load_warper_for_inference`].
pub fn load_styler_for_inference(path: &Path, config: &TrainConfig, force: bool) -> Result<Styler> {
    let styler = Styler::new(config.model.clone(), config.seed)?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_config(&config.config_hash(), force)?;
    nn::load_varmap(styler.gen_varmap(), &strip_prefix_map(&ckpt.model, "gen."))?;
    nn::load_varmap(styler.disc_varmap(), &strip_prefix_map(&ckpt.model, "disc."))?;
    Ok(styler)
}

/// Mean caricature landmarks of the index at the working resolution,
/// persisted to `path` (canonical resolution) for reuse at inference.
pub fn compute_mean_landmarks(
    index: &DatasetIndex,
    size: usize,
    persist: Option<&Path>,
) -> Result<LandmarkSet> {
    let mut sets = Vec::new();
    for id in &index.identities {
        for entry in &id.caricatures {
            let (img, lm) = dataset::load_entry(entry)?;
            let (_, lm) = resize_with_landmarks(&img, &lm, size)?;
            sets.push(lm);
        }
    }
    if sets.is_empty() {
        return Err(Error::Dataset("no caricature landmarks in index".into()));
    }
    let mean = mean_landmarks(&sets)?;
    if let Some(p) = persist {
        mean.write_tagged(p)?;
    }
    Ok(mean)
}

/// Runs the training loop of the chosen network over a preprocessed dataset.
/// Writes periodic checkpoints and an append-only CSV log under `out_dir`;
/// returns the path of the final checkpoint. A non-finite loss aborts after
/// writing a diagnostic checkpoint.
pub fn run_training(
    target: TrainTarget,
    config: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    force: bool,
) -> Result<PathBuf> {
    config.model.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let index = DatasetIndex::build(data_root)?;
    let size = config.model.image_size;
    match target {
        TrainTarget::Warper => run_warper(config, &index, out_dir, resume, force, size),
        TrainTarget::Styler => run_styler(config, &index, out_dir, resume, force, size),
    }
}

fn run_warper(
    config: &TrainConfig,
    index: &DatasetIndex,
    out_dir: &Path,
    resume: Option<&Path>,
    force: bool,
    size: usize,
) -> Result<PathBuf> {
    let mean = compute_mean_landmarks(index, size, Some(&out_dir.join("mean_landmarks.txt")))?;
    let warper = Warper::new(config.model.clone(), config.seed)?;
    let mut opt = Adam::new(nn::trainable_vars(warper.varmap()), config.beta1, config.beta2)?;
    let start = match resume {
        Some(p) => load_warper_checkpoint(p, &warper, &mut opt, config, force)? as usize,
        None => 0,
    };
    let total = config.warper_fixed_iters + config.warper_decay_iters;
    let weights = WarperLossWeights {
        lambda_rec_warp: config.lambda_rec_warp,
        lambda_tv: config.lambda_tv,
    };
    let log = CsvLog::new(
        out_dir.join("train_warper.csv"),
        "iter,lr,warp_recon,photo_recon,tv,total,wall_time_s",
    )?;
    let t0 = Instant::now();
    let mut window = Vec::new();
    let final_path = out_dir.join("warper_final.ckpt");
    for iter in start..total {
        let lr = lr_at(iter, config.warper_fixed_iters, config.warper_decay_iters, config.lr)?;
        let mut rng = iter_rng(config.seed, iter);
        let pairs = (0..config.batch_size)
            .map(|_| {
                let pair = dataset::sample_pair(index, PairPolicy::SameIdentity, &mut rng)?;
                dataset::augment(&pair, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = assemble_warper_batch(&pairs, &mean, size)?;
        let losses = match warper_train_step(&warper, &batch, &mut opt, lr, weights, &mut rng, iter)
        {
            Ok(l) => l,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                save_warper_checkpoint(&warper, &opt, config, iter as u64, &out_dir.join("warper_abort.ckpt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log.append(&format!(
            "{iter},{lr},{},{},{},{},{}",
            losses.warp_recon,
            losses.photo_recon,
            losses.tv,
            losses.total,
            t0.elapsed().as_secs_f64()
        ))?;
        window.push(losses.total);
        if (iter + 1) % config.log_window == 0 {
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            eprintln!("warper iter {:>7}  lr {lr:.3e}  loss(avg {}) {avg:.5}", iter + 1, window.len());
            window.clear();
        }
        if (iter + 1) % config.checkpoint_every == 0 {
            let p = out_dir.join(format!("warper_iter{:07}.ckpt", iter + 1));
            save_warper_checkpoint(&warper, &opt, config, (iter + 1) as u64, &p)?;
        }
    }
    save_warper_checkpoint(&warper, &opt, config, total as u64, &final_path)?;
    Ok(final_path)
}

fn run_styler(
    config: &TrainConfig,
    index: &DatasetIndex,
    out_dir: &Path,
    resume: Option<&Path>,
    force: bool,
    size: usize,
) -> Result<PathBuf> {
    let styler = Styler::new(config.model.clone(), config.seed)?;
    let mut opt_g = Adam::new(nn::trainable_vars(styler.gen_varmap()), config.beta1, config.beta2)?;
    let mut opt_d = Adam::new(nn::trainable_vars(styler.disc_varmap()), config.beta1, config.beta2)?;
    let start = match resume {
        Some(p) => load_styler_checkpoint(p, &styler, &mut opt_g, &mut opt_d, config, force)? as usize,
        None => 0,
    };
    let total = config.styler_fixed_iters + config.styler_decay_iters;
    let weights = StylerLossWeights {
        lambda_rec_img: config.lambda_rec_img,
        lambda_cyc: config.lambda_cyc,
    };
    let log = CsvLog::new(
        out_dir.join("train_styler.csv"),
        "iter,lr,d_loss,adv,img_recon,cycle,total,wall_time_s",
    )?;
    let t0 = Instant::now();
    let mut window = Vec::new();
    let final_path = out_dir.join("styler_final.ckpt");
    for iter in start..total {
        let lr = lr_at(iter, config.styler_fixed_iters, config.styler_decay_iters, config.lr)?;
        let mut rng = iter_rng(config.seed ^ 0x5354594c, iter);
        let mut photos = Vec::new();
        let mut caris = Vec::new();
        for _ in 0..config.batch_size {
            let pair = dataset::sample_pair(index, PairPolicy::Random, &mut rng)?;
            let pair = dataset::augment(&pair, &mut rng)?;
            photos.push(resize_with_landmarks(&pair.photo, &pair.photo_landmarks, size)?.0);
            caris.push(resize_with_landmarks(&pair.caricature, &pair.cari_landmarks, size)?.0);
        }
        let photos = stack_images(&photos)?;
        let caris = stack_images(&caris)?;
        let losses = match styler_train_step(
            &styler, &photos, &caris, &mut opt_g, &mut opt_d, lr, weights, &mut rng, iter,
        ) {
            Ok(l) => l,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                save_styler_checkpoint(&styler, &opt_g, &opt_d, config, iter as u64, &out_dir.join("styler_abort.ckpt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log.append(&format!(
            "{iter},{lr},{},{},{},{},{},{}",
            losses.d_loss,
            losses.adv,
            losses.img_recon,
            losses.cycle,
            losses.total,
            t0.elapsed().as_secs_f64()
        ))?;
        window.push(losses.total);
        if (iter + 1) % config.log_window == 0 {
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            eprintln!("styler iter {:>7}  lr {lr:.3e}  loss(avg {}) {avg:.5}", iter + 1, window.len());
            window.clear();
        }
        if (iter + 1) % config.checkpoint_every == 0 {
            let p = out_dir.join(format!("styler_iter{:07}.ckpt", iter + 1));
            save_styler_checkpoint(&styler, &opt_g, &opt_d, config, (iter + 1) as u64, &p)?;
        }
    }
    save_styler_checkpoint(&styler, &opt_g, &opt_d, config, total as u64, &final_path)?;
    Ok(final_path)
}
