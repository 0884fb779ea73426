//! Texture translation: content/style encoders, AdaLIN-based decoder, patch
//! discriminator, and the adversarial / reconstruction / cycle losses.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Linear, Module, VarBuilder, VarMap};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::ImageBuffer;
use crate::nn::{
    self, Adam, UpBlock, conv_down, conv_same, conv_wide, global_avg, instance_norm, l1,
    layer_norm_spatial, leaky_relu, linear,
};
use crate::warper::ModelConfig;

/// Blends instance and layer normalization of `feat` with per-channel weight
/// `rho` in `[0, 1]`, then applies the style-derived affine `(gamma, beta)`:
/// `gamma * (rho * a_IN + (1 - rho) * a_LN) + beta`.
///
/// `rho` is `(C,)`; `gamma` and `beta` broadcast over `(N, C, H, W)`.
pub fn adalin(feat: &Tensor, gamma: &Tensor, beta: &Tensor, rho: &Tensor) -> Result<Tensor> {
    let rho_v: Vec<f32> = rho.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    if rho_v.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::InvalidArgument(
            "adalin: rho outside [0, 1]".into(),
        ));
    }
    let (_n, c, _h, _w) = feat.dims4()?;
    let a_in = instance_norm(feat)?;
    let a_ln = layer_norm_spatial(feat)?;
    let rho = rho.reshape((1, c, 1, 1))?;
    let mixed = (a_in.broadcast_mul(&rho)? + a_ln.broadcast_mul(&rho.affine(-1.0, 1.0)?)?)?;
    Ok(mixed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Least-squares GAN objectives over patch discriminator outputs:
/// `d_loss = E[(D(real) - 1)^2] + E[D(fake)^2]`, `g_loss = E[(D(fake) - 1)^2]`.
pub fn lsgan_d_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real_term = d_real.affine(1.0, -1.0)?.sqr()?.mean_all()?;
    let fake_term = d_fake.sqr()?.mean_all()?;
    Ok((real_term + fake_term)?)
}

pub fn lsgan_g_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok(d_fake.affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

struct ContentEncoder {
    head: Conv2d,
    downs: Vec<Conv2d>,
    res: Vec<(Conv2d, Conv2d)>,
}

impl ContentEncoder {
    fn new(vb: VarBuilder, base: usize) -> Result<Self> {
        let head = conv_wide(vb.pp("head"), 3, base)?;
        let downs = vec![
            conv_down(vb.pp("down0"), base, 2 * base)?,
            conv_down(vb.pp("down1"), 2 * base, 4 * base)?,
        ];
        let res = (0..4)
            .map(|i| {
                let vb = vb.pp(format!("res{i}"));
                Ok((
                    conv_same(vb.pp("a"), 4 * base, 4 * base)?,
                    conv_same(vb.pp("b"), 4 * base, 4 * base)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { head, downs, res })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = leaky_relu(&self.head.forward(x)?)?;
        for d in &self.downs {
            h = leaky_relu(&d.forward(&h)?)?;
        }
        for (a, b) in &self.res {
            let r = leaky_relu(&instance_norm(&a.forward(&h)?)?)?;
            let r = instance_norm(&b.forward(&r)?)?;
            h = (h + r)?;
        }
        Ok(h)
    }
}

struct StyleEncoder {
    downs: Vec<Conv2d>,
    head: Linear,
}

impl StyleEncoder {
    fn new(vb: VarBuilder, base: usize, style_dim: usize) -> Result<Self> {
        let chans = [3, base, 2 * base, 4 * base, 4 * base];
        let downs = (0..4)
            .map(|i| conv_down(vb.pp(format!("down{i}")), chans[i], chans[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        let head = linear(vb.pp("head"), 4 * base, style_dim)?;
        Ok(Self { downs, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for d in &self.downs {
            h = leaky_relu(&d.forward(&h)?)?;
        }
        self.head.forward(&global_avg(&h)?).map_err(Into::into)
    }
}

struct AdalinResBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    rho_a: Var,
    rho_b: Var,
    affine_a: Linear,
    affine_b: Linear,
}

impl AdalinResBlock {
    fn new(vb: VarBuilder, chan: usize, style_hidden: usize) -> Result<Self> {
        let rho_a = Var::from_tensor(&vb.pp("norm_a").get_with_hints(
            chan,
            "rho",
            candle_nn::Init::Const(0.5),
        )?)?;
        let rho_b = Var::from_tensor(&vb.pp("norm_b").get_with_hints(
            chan,
            "rho",
            candle_nn::Init::Const(0.5),
        )?)?;
        Ok(Self {
            conv_a: conv_same(vb.pp("conv_a"), chan, chan)?,
            conv_b: conv_same(vb.pp("conv_b"), chan, chan)?,
            rho_a,
            rho_b,
            // each produces (gamma, beta) for its normalization
            affine_a: linear(vb.pp("affine_a"), style_hidden, 2 * chan)?,
            affine_b: linear(vb.pp("affine_b"), style_hidden, 2 * chan)?,
        })
    }

    fn forward(&self, x: &Tensor, style_hidden: &Tensor) -> Result<Tensor> {
        let (n, c, _h, _w) = x.dims4()?;
        let split = |affine: &Linear| -> Result<(Tensor, Tensor)> {
            let gb = affine.forward(style_hidden)?;
            let gamma = gb.narrow(1, 0, c)?.reshape((n, c, 1, 1))?;
            let beta = gb.narrow(1, c, c)?.reshape((n, c, 1, 1))?;
            // gamma parameterized around 1 so an untrained block passes
            // features through at unit scale
            Ok((gamma.affine(1.0, 1.0)?, beta))
        };
        let (ga, ba) = split(&self.affine_a)?;
        let h = self.conv_a.forward(x)?;
        let h = leaky_relu(&adalin(&h, &ga, &ba, self.rho_a.as_tensor())?)?;
        let (gb, bb) = split(&self.affine_b)?;
        let h = self.conv_b.forward(&h)?;
        let h = adalin(&h, &gb, &bb, self.rho_b.as_tensor())?;
        Ok((x + h)?)
    }
}

struct StyleDecoder {
    style_mlp: (Linear, Linear),
    blocks: Vec<AdalinResBlock>,
    ups: Vec<UpBlock>,
    out: Conv2d,
}

const STYLE_HIDDEN: usize = 64;

impl StyleDecoder {
    fn new(vb: VarBuilder, base: usize, style_dim: usize) -> Result<Self> {
        let style_mlp = (
            linear(vb.pp("mlp0"), style_dim, STYLE_HIDDEN)?,
            linear(vb.pp("mlp1"), STYLE_HIDDEN, STYLE_HIDDEN)?,
        );
        let blocks = (0..4)
            .map(|i| AdalinResBlock::new(vb.pp(format!("res{i}")), 4 * base, STYLE_HIDDEN))
            .collect::<Result<Vec<_>>>()?;
        let ups = vec![
            UpBlock::new(vb.pp("up0"), 4 * base, 2 * base)?,
            UpBlock::new(vb.pp("up1"), 2 * base, base)?,
        ];
        let out = conv_wide(vb.pp("out"), base, 3)?;
        Ok(Self {
            style_mlp,
            blocks,
            ups,
            out,
        })
    }

    fn forward(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        let s = leaky_relu(&self.style_mlp.0.forward(style)?)?;
        let s = leaky_relu(&self.style_mlp.1.forward(&s)?)?;
        let mut h = content.clone();
        for b in &self.blocks {
            h = b.forward(&h, &s)?;
        }
        for up in &self.ups {
            h = leaky_relu(&up.forward(&h)?)?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}

struct Discriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    fn new(vb: VarBuilder, base: usize) -> Result<Self> {
        let chans = [3, base, 2 * base, 4 * base];
        let convs = (0..3)
            .map(|i| conv_down(vb.pp(format!("conv{i}")), chans[i], chans[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        let head = conv_same(vb.pp("head"), 4 * base, 1)?;
        Ok(Self { convs, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?)?;
        }
        Ok(self.head.forward(&h)?)
    }
}

/// The styler networks. The discriminator lives in its own var map so the
/// adversarial steps can alternate cleanly.
pub struct Styler {
    pub config: ModelConfig,
    gen_varmap: VarMap,
    disc_varmap: VarMap,
    content_enc: ContentEncoder,
    style_enc: StyleEncoder,
    decoder: StyleDecoder,
    disc: Discriminator,
    rho_vars: Vec<Var>,
}

impl Styler {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let gen_varmap = VarMap::new();
        let disc_varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&gen_varmap, DType::F32, &Device::Cpu);
        let base = config.styler_channels;
        let content_enc = ContentEncoder::new(vb.pp("content_enc"), base)?;
        let style_enc = StyleEncoder::new(vb.pp("style_enc"), base, config.style_code_dim)?;
        let decoder = StyleDecoder::new(vb.pp("decoder"), base, config.style_code_dim)?;
        let dvb = VarBuilder::from_varmap(&disc_varmap, DType::F32, &Device::Cpu);
        let disc = Discriminator::new(dvb.pp("disc"), base)?;
        nn::init_deterministic(&gen_varmap, seed)?;
        nn::init_deterministic(&disc_varmap, seed ^ 0x9e3779b97f4a7c15)?;
        let rho_vars = {
            let data = gen_varmap.data().lock().unwrap();
            let mut named: Vec<(&String, &Var)> =
                data.iter().filter(|(k, _)| k.contains(".rho")).collect();
            named.sort_by(|a, b| a.0.cmp(b.0));
            named.into_iter().map(|(_, v)| v.clone()).collect()
        };
        Ok(Self {
            config,
            gen_varmap,
            disc_varmap,
            content_enc,
            style_enc,
            decoder,
            disc,
            rho_vars,
        })
    }

    pub fn gen_varmap(&self) -> &VarMap {
        &self.gen_varmap
    }

    pub fn disc_varmap(&self) -> &VarMap {
        &self.disc_varmap
    }

    pub fn encode_content(&self, imgs: &Tensor) -> Result<Tensor> {
        self.content_enc.forward(imgs)
    }

    pub fn encode_style(&self, imgs: &Tensor) -> Result<Tensor> {
        self.style_enc.forward(imgs)
    }

    pub fn decode(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        self.decoder.forward(content, style)
    }

    pub fn discriminate(&self, imgs: &Tensor) -> Result<Tensor> {
        self.disc.forward(imgs)
    }

    /// Renders an image in the texture described by `style`: spatial
    /// structure is preserved, no warping happens here.
    pub fn stylize(&self, img: &ImageBuffer, style: &[f32]) -> Result<ImageBuffer> {
        let s = self.config.image_size;
        if img.width() != s || img.height() != s {
            return Err(Error::Shape(format!(
                "stylize: image {}x{} vs configured {s}",
                img.width(),
                img.height()
            )));
        }
        if style.len() != self.config.style_code_dim {
            return Err(Error::Shape(format!(
                "stylize: style length {} vs {}",
                style.len(),
                self.config.style_code_dim
            )));
        }
        let x = img.to_tensor()?.unsqueeze(0)?;
        let style = Tensor::from_vec(style.to_vec(), (1, style.len()), &Device::Cpu)?;
        let content = self.encode_content(&x)?;
        let out = self.decode(&content, &style)?;
        ImageBuffer::from_tensor(&out.squeeze(0)?)
    }

    /// Autoencoding loss: l1 between `G_s(E_c(x), E_s(x))` and `x`.
    pub fn image_recon_loss(&self, imgs: &Tensor) -> Result<Tensor> {
        let content = self.encode_content(imgs)?;
        let style = self.encode_style(imgs)?;
        let recon = self.decode(&content, &style)?;
        l1(&recon, imgs)
    }

    /// Cycle loss for a generated image: content term plus style term.
    /// Returns `(total, content_term, style_term)`.
    pub fn cycle_loss(&self, photos: &Tensor, style: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let content = self.encode_content(photos)?;
        let fake = self.decode(&content, style)?;
        let con_term = l1(&self.encode_content(&fake)?, &content.detach())?;
        let sty_term = l1(&self.encode_style(&fake)?, style)?;
        let total = (&con_term + &sty_term)?;
        Ok((total, con_term, sty_term))
    }

    /// Clamps every AdaLIN mixing weight into `[0, 1]`.
    pub fn clamp_rho(&self) -> Result<()> {
        for rho in &self.rho_vars {
            rho.set(&rho.as_tensor().clamp(0f32, 1f32)?)?;
        }
        Ok(())
    }

    /// Largest rho violation before clamping, for the invariant tests.
    pub fn rho_values(&self) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for rho in &self.rho_vars {
            out.extend(rho.as_tensor().flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(out)
    }
}

/// Scalar losses of one styler training step.
#[derive(Debug, Clone, Copy)]
pub struct StylerLosses {
    pub d_loss: f64,
    pub adv: f64,
    pub img_recon: f64,
    pub cycle: f64,
    pub total: f64,
}

/// Loss weights of the styler objective.
#[derive(Debug, Clone, Copy)]
pub struct StylerLossWeights {
    pub lambda_rec_img: f64,
    pub lambda_cyc: f64,
}

impl Default for StylerLossWeights {
    fn default() -> Self {
        Self {
            lambda_rec_img: 10.0,
            lambda_cyc: 1.0,
        }
    }
}

/// One alternating D-then-G step of the styler objective
/// `L = L_adv + lambda_rec_img * L_rec + lambda_cyc * L_cyc`.
/// Reconstruction covers both the photo and the caricature of the batch.
pub fn styler_train_step(
    styler: &Styler,
    photos: &Tensor,
    caricatures: &Tensor,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    lr: f64,
    weights: StylerLossWeights,
    rng: &mut ChaCha8Rng,
    iter: usize,
) -> Result<StylerLosses> {
    let (b, _, _, _) = photos.dims4()?;
    let style_dim = styler.config.style_code_dim;
    let z_s = Tensor::from_vec(nn::randn_vec(rng, b * style_dim), (b, style_dim), &Device::Cpu)?;

    let content_p = styler.encode_content(photos)?;
    let fake = styler.decode(&content_p, &z_s)?;

    // discriminator step on detached fakes
    let d_loss = lsgan_d_loss(
        &styler.discriminate(caricatures)?,
        &styler.discriminate(&fake.detach())?,
    )?;
    let d_scalar = d_loss.to_scalar::<f32>()? as f64;
    let d_grads = d_loss.backward()?;
    opt_d.step(&d_grads, lr)?;

    // generator step against the updated discriminator
    let adv = lsgan_g_loss(&styler.discriminate(&fake)?)?;
    let rec_p = {
        let style_p = styler.encode_style(photos)?;
        l1(&styler.decode(&content_p, &style_p)?, photos)?
    };
    let rec_c = styler.image_recon_loss(caricatures)?;
    let rec = ((rec_p + rec_c)? * 0.5)?;
    let con_term = l1(&styler.encode_content(&fake)?, &content_p.detach())?;
    let sty_term = l1(&styler.encode_style(&fake)?, &z_s)?;
    let cyc = (&con_term + &sty_term)?;
    let total = ((&rec * weights.lambda_rec_img)? + &adv)?;
    let total = (total + (&cyc * weights.lambda_cyc)?)?;

    let losses = StylerLosses {
        d_loss: d_scalar,
        adv: adv.to_scalar::<f32>()? as f64,
        img_recon: rec.to_scalar::<f32>()? as f64,
        cycle: cyc.to_scalar::<f32>()? as f64,
        total: total.to_scalar::<f32>()? as f64,
    };
    if !losses.total.is_finite() || !losses.d_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter,
            detail: format!("{losses:?}"),
        });
    }
    let g_grads = total.backward()?;
    opt_g.step(&g_grads, lr)?;
    styler.clamp_rho()?;
    Ok(losses)
}
