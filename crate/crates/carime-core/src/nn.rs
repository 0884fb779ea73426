//! Shared network building blocks, deterministic initialization, the Adam
//! optimizer, and the versioned checkpoint container.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, backprop::GradStore};
use candle_nn::{Conv2d, Conv2dConfig, Linear, Module, VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Marker used in variable paths for buffers that are checkpointed but never
/// touched by the optimizer (running statistics).
pub const BUFFER_MARKER: &str = "runstat";
/// Marker for variables zero-initialized so the untrained warp decoder emits
/// the identity field.
pub const ZERO_INIT_MARKER: &str = "zero_head";

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, 0.2)?)
}

/// 4x4 stride-2 "halving" convolution.
pub fn conv_down(vb: VarBuilder, cin: usize, cout: usize) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride: 2,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, 4, cfg, vb)?)
}

/// 3x3 stride-1 same-size convolution.
pub fn conv_same(vb: VarBuilder, cin: usize, cout: usize) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride: 1,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, 3, cfg, vb)?)
}

/// 7x7 stride-1 convolution (image head/tail).
pub fn conv_wide(vb: VarBuilder, cin: usize, cout: usize) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 3,
        stride: 1,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, 7, cfg, vb)?)
}

/// Nearest-neighbor 2x upsample followed by a 3x3 convolution.
pub struct UpBlock {
    conv: Conv2d,
}

impl UpBlock {
    pub fn new(vb: VarBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: conv_same(vb, cin, cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let up = x.upsample_nearest2d(h * 2, w * 2)?;
        Ok(self.conv.forward(&up)?)
    }
}

pub fn linear(vb: VarBuilder, din: usize, dout: usize) -> Result<Linear> {
    Ok(candle_nn::linear(din, dout, vb)?)
}

/// Per-sample, per-channel spatial normalization (no affine part).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mu = x.mean_keepdim(candle_core::D::Minus1)?.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mu)?;
    let var = centered.sqr()?.mean_keepdim(candle_core::D::Minus1)?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// Per-sample normalization over channels and space (no affine part).
pub fn layer_norm_spatial(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c * h * w))?;
    let mu = flat.mean_keepdim(1)?;
    let centered = flat.broadcast_sub(&mu)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let out = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

/// Global average pooling `(N, C, H, W) -> (N, C)`.
pub fn global_avg(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(candle_core::D::Minus1)?.mean(candle_core::D::Minus1)?)
}

/// Mean absolute error.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "l1: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Batch-standardization layer for latent codes: train mode normalizes each
/// dimension with batch statistics (updating running buffers); eval mode uses
/// the frozen running statistics.
pub struct CodeNorm {
    running_mean: Var,
    running_var: Var,
    momentum: f64,
}

impl CodeNorm {
    pub fn new(vb: VarBuilder, dim: usize) -> Result<Self> {
        let vb = vb.pp(BUFFER_MARKER);
        let running_mean = Var::from_tensor(&vb.get_with_hints(
            dim,
            "running_mean",
            candle_nn::Init::Const(0.0),
        )?)?;
        let running_var = Var::from_tensor(&vb.get_with_hints(
            dim,
            "running_var",
            candle_nn::Init::Const(1.0),
        )?)?;
        Ok(Self {
            running_mean,
            running_var,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _d) = x.dims2()?;
        if train && b > 1 {
            let mu = x.mean(0)?;
            let var = x.broadcast_sub(&mu)?.sqr()?.mean(0)?;
            let out = x
                .broadcast_sub(&mu)?
                .broadcast_div(&(&var + 1e-5)?.sqrt()?)?;
            let m = self.momentum;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))? + (mu.detach() * m)?)?,
            )?;
            self.running_var.set(
                &((self.running_var.as_tensor() * (1.0 - m))? + (var.detach() * m)?)?,
            )?;
            Ok(out)
        } else {
            Ok(x
                .broadcast_sub(self.running_mean.as_tensor())?
                .broadcast_div(&(self.running_var.as_tensor() + 1e-5)?.sqrt()?)?)
        }
    }
}

/// Adam with bias correction (the classic variant, no weight decay).
pub struct Adam {
    entries: Vec<AdamEntry>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: usize,
}

struct AdamEntry {
    name: String,
    var: Var,
    m: Var,
    v: Var,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, beta1: f64, beta2: f64) -> Result<Self> {
        let entries = vars
            .into_iter()
            .map(|(name, var)| {
                let m = Var::zeros(var.shape(), var.dtype(), var.device())?;
                let v = Var::zeros(var.shape(), var.dtype(), var.device())?;
                Ok(AdamEntry { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
        })
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for e in &self.entries {
            let Some(g) = grads.get(e.var.as_tensor()) else {
                continue;
            };
            let m = ((e.m.as_tensor() * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((e.v.as_tensor() * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat * lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            e.var.set(&e.var.as_tensor().sub(&update)?)?;
            e.m.set(&m)?;
            e.v.set(&v)?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn set_step_count(&mut self, t: usize) {
        self.step_count = t;
    }

    /// Moment tensors for checkpointing, keyed by `m.<name>` / `v.<name>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.push((format!("m.{}", e.name), e.m.as_tensor().clone()));
            out.push((format!("v.{}", e.name), e.v.as_tensor().clone()));
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step_count: usize) -> Result<()> {
        for e in &self.entries {
            if let Some(t) = state.get(&format!("m.{}", e.name)) {
                e.m.set(t)?;
            }
            if let Some(t) = state.get(&format!("v.{}", e.name)) {
                e.v.set(t)?;
            }
        }
        self.step_count = step_count;
        Ok(())
    }
}

/// Collects `(name, var)` pairs from a var map, skipping buffer variables,
/// sorted by name for reproducible optimizer ordering.
pub fn trainable_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().unwrap();
    let mut vars: Vec<(String, Var)> = data
        .iter()
        .filter(|(name, _)| !name.contains(BUFFER_MARKER))
        .map(|(name, var)| (name.clone(), var.clone()))
        .collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Deterministically re-initializes every variable in the map from the seed
/// and the variable's own name: weights ~ N(0, 0.02), biases and zero-headed
/// layers 0, running variances 1.
pub fn init_deterministic(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let shape = var.shape().clone();
        let count = shape.elem_count();
        let value: Tensor = if name.contains(ZERO_INIT_MARKER)
            || name.ends_with(".bias")
            || name.ends_with("running_mean")
        {
            Tensor::zeros(&shape, DType::F32, &Device::Cpu)?
        } else if name.ends_with("running_var") {
            Tensor::ones(&shape, DType::F32, &Device::Cpu)?
        } else if name.contains(".rho") {
            // AdaLIN mixing weights start balanced
            Tensor::full(0.5f32, &shape, &Device::Cpu)?
        } else {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(name.as_bytes());
            let digest = h.finalize();
            let var_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(var_seed);
            let vals: Vec<f32> = (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * 0.02) as f32
                })
                .collect();
            Tensor::from_vec(vals, &shape, &Device::Cpu)?
        };
        var.set(&value)?;
    }
    Ok(())
}

/// Standard-normal vector from a seeded stream.
pub fn randn_vec(rng: &mut ChaCha8Rng, count: usize) -> Vec<f32> {
    (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u8 = 1;

/// Versioned single-file checkpoint: config hash, iteration counter, model
/// parameters and optimizer state. Serialized as a safetensors archive with
/// `model.` / `opt.` / `meta.` key prefixes, keys sorted so identical content
/// produces identical bytes.
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: [u8; 32],
    pub model: BTreeMap<String, Tensor>,
    pub opt: BTreeMap<String, Tensor>,
    pub opt_step_count: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        named.push((
            "meta.version".to_string(),
            Tensor::from_vec(vec![CHECKPOINT_VERSION as u32], (1,), &Device::Cpu)?,
        ));
        named.push((
            "meta.iteration".to_string(),
            Tensor::from_vec(vec![self.iteration as u32, (self.iteration >> 32) as u32], (2,), &Device::Cpu)?,
        ));
        named.push((
            "meta.opt_step".to_string(),
            Tensor::from_vec(vec![self.opt_step_count as u32], (1,), &Device::Cpu)?,
        ));
        named.push((
            "meta.config_hash".to_string(),
            Tensor::from_vec(
                self.config_hash.iter().map(|&b| b as u32).collect::<Vec<u32>>(),
                (32,),
                &Device::Cpu,
            )?,
        ));
        for (k, t) in &self.model {
            named.push((format!("model.{k}"), t.clone()));
        }
        for (k, t) in &self.opt {
            named.push((format!("opt.{k}"), t.clone()));
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));
        candle_core::safetensors::save(&named.into_iter().collect::<HashMap<_, _>>(), path)
            .map_err(|e| Error::Checkpoint(format!("save {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("load {}: {e}", path.display())))?;
        let meta_u32 = |key: &str| -> Result<Vec<u32>> {
            Ok(tensors
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?
                .to_vec1()?)
        };
        let version = meta_u32("meta.version")?[0];
        if version != CHECKPOINT_VERSION as u32 {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let it = meta_u32("meta.iteration")?;
        let iteration = it[0] as u64 | ((it[1] as u64) << 32);
        let opt_step_count = meta_u32("meta.opt_step")?[0] as usize;
        let hash_words = meta_u32("meta.config_hash")?;
        let mut config_hash = [0u8; 32];
        for (b, w) in config_hash.iter_mut().zip(&hash_words) {
            *b = *w as u8;
        }
        let mut model = BTreeMap::new();
        let mut opt = BTreeMap::new();
        for (k, t) in tensors {
            if let Some(rest) = k.strip_prefix("model.") {
                model.insert(rest.to_string(), t);
            } else if let Some(rest) = k.strip_prefix("opt.") {
                opt.insert(rest.to_string(), t);
            }
        }
        Ok(Self {
            iteration,
            config_hash,
            model,
            opt,
            opt_step_count,
        })
    }

    /// Verifies the stored config hash, unless `force` is set.
    pub fn check_config(&self, expected: &[u8; 32], force: bool) -> Result<()> {
        if !force && &self.config_hash != expected {
            return Err(Error::Checkpoint(
                "config hash mismatch (pass --force to load anyway)".into(),
            ));
        }
        Ok(())
    }
}

/// Snapshot of all variables in a map, keyed by name.
pub fn varmap_tensors(varmap: &VarMap) -> BTreeMap<String, Tensor> {
    let data = varmap.data().lock().unwrap();
    data.iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect()
}

/// Writes tensors back into an existing var map; every map variable must be
/// present in the snapshot.
pub fn load_varmap(varmap: &VarMap, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    for (name, var) in data.iter() {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing tensor {name}")))?;
        var.set(t)?;
    }
    Ok(())
}
