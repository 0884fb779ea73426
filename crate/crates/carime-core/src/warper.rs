//! Multi-exaggeration warper: encodes exaggeration patterns and photo
//! content into normalized latent codes, decodes photo-specific deformation
//! fields, and samples diverse exaggerations at inference.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv2d, Linear, Module, VarBuilder, VarMap};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, DeformationField, ImageBuffer};
use crate::nn::{
    self, Adam, CodeNorm, UpBlock, ZERO_INIT_MARKER, conv_down, conv_same, global_avg, l1,
    leaky_relu, linear,
};

/// Architecture hyperparameters shared by the warper and styler networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square working resolution (the canonical preprocessed size).
    pub image_size: usize,
    pub warp_code_dim: usize,
    pub content_code_dim: usize,
    pub style_code_dim: usize,
    /// Base channel width of the warper networks.
    pub warper_channels: usize,
    /// Base channel width of the styler networks.
    pub styler_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            warp_code_dim: 64,
            content_code_dim: 64,
            style_code_dim: 8,
            warper_channels: 32,
            styler_channels: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        // the warp encoder halves its half-resolution input five times, so
        // the working size must survive six halvings
        if self.image_size < 64 || self.image_size % 64 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 64 and at least 64, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Resolution of the deformation field at the warp encoder/decoder head.
    pub fn half_size(&self) -> usize {
        self.image_size / 2
    }

    /// Spatial size of the photo encoder's last feature map (stride 32).
    pub fn feature_size(&self) -> usize {
        self.image_size / 32
    }
}

/// Scalar losses of one warper training step.
#[derive(Debug, Clone, Copy)]
pub struct WarperLosses {
    pub warp_recon: f64,
    pub photo_recon: f64,
    pub tv: f64,
    pub total: f64,
}

/// One sampled exaggeration: code, field, warped image, scale.
pub struct WarpSample {
    pub warp_code: Vec<f32>,
    pub field: DeformationField,
    pub warped: ImageBuffer,
    pub scale: f64,
}

struct Encoder {
    convs: Vec<Conv2d>,
    head: Linear,
    norm: CodeNorm,
}

impl Encoder {
    fn new(vb: VarBuilder, cin: usize, base: usize, code_dim: usize) -> Result<Self> {
        let chans = [cin, base, 2 * base, 4 * base, 4 * base, 4 * base];
        let convs = (0..5)
            .map(|i| conv_down(vb.pp(format!("conv{i}")), chans[i], chans[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        let head = linear(vb.pp("head"), 4 * base, code_dim)?;
        let norm = CodeNorm::new(vb.pp("norm"), code_dim)?;
        Ok(Self { convs, head, norm })
    }

    /// Returns the normalized code and the last convolutional feature map.
    fn forward(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        let code = self.head.forward(&global_avg(&h)?)?;
        let code = self.norm.forward(&code, train)?;
        Ok((code, h))
    }
}

struct PhotoDecoder {
    ups: Vec<UpBlock>,
    out: Conv2d,
}

impl PhotoDecoder {
    fn new(vb: VarBuilder, base: usize) -> Result<Self> {
        let chans = [4 * base, 4 * base, 2 * base, base, base, base];
        let ups = (0..5)
            .map(|i| UpBlock::new(vb.pp(format!("up{i}")), chans[i], chans[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        let out = conv_same(vb.pp("out"), base, 3)?;
        Ok(Self { ups, out })
    }

    fn forward(&self, feat: &Tensor) -> Result<Tensor> {
        let mut h = feat.clone();
        for up in &self.ups {
            h = leaky_relu(&up.forward(&h)?)?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}

struct FieldDecoder {
    fc: Linear,
    base: usize,
    start: usize,
    ups: Vec<UpBlock>,
    head: Conv2d,
}

impl FieldDecoder {
    fn new(vb: VarBuilder, code_dim: usize, base: usize, start: usize) -> Result<Self> {
        let fc = linear(vb.pp("fc"), code_dim, 4 * base * start * start)?;
        let chans = [4 * base, 4 * base, 2 * base, base, base];
        let ups = (0..4)
            .map(|i| UpBlock::new(vb.pp(format!("up{i}")), chans[i], chans[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        // zero-initialized so the untrained decoder emits the identity field
        let head = conv_same(vb.pp(ZERO_INIT_MARKER), base, 2)?;
        Ok(Self {
            fc,
            base,
            start,
            ups,
            head,
        })
    }

    fn forward(&self, codes: &Tensor) -> Result<Tensor> {
        let (b, _) = codes.dims2()?;
        let h = self.fc.forward(codes)?;
        let mut h = leaky_relu(&h.reshape((b, 4 * self.base, self.start, self.start))?)?;
        for up in &self.ups {
            h = leaky_relu(&up.forward(&h)?)?;
        }
        Ok(self.head.forward(&h)?)
    }
}

/// The warper networks plus their parameter store.
pub struct Warper {
    pub config: ModelConfig,
    varmap: VarMap,
    warp_enc: Encoder,
    photo_enc: Encoder,
    photo_dec: PhotoDecoder,
    field_dec: FieldDecoder,
}

impl Warper {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let base = config.warper_channels;
        let warp_enc = Encoder::new(vb.pp("warp_enc"), 2, base, config.warp_code_dim)?;
        let photo_enc = Encoder::new(vb.pp("photo_enc"), 3, base, config.content_code_dim)?;
        let photo_dec = PhotoDecoder::new(vb.pp("photo_dec"), base)?;
        let field_dec = FieldDecoder::new(
            vb.pp("field_dec"),
            config.warp_code_dim + config.content_code_dim,
            base,
            config.image_size / 32,
        )?;
        nn::init_deterministic(&varmap, seed)?;
        Ok(Self {
            config,
            varmap,
            warp_enc,
            photo_enc,
            photo_dec,
            field_dec,
        })
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Encodes a batch of half-resolution fields `(B, 2, S/2, S/2)` into
    /// normalized warp codes `(B, warp_code_dim)`.
    pub fn encode_warp(&self, fields_half: &Tensor, train: bool) -> Result<Tensor> {
        let (_b, c, h, w) = fields_half.dims4()?;
        let half = self.config.half_size();
        if c != 2 || h != half || w != half {
            return Err(Error::Shape(format!(
                "encode_warp: expected (B, 2, {half}, {half}), got {:?}",
                fields_half.dims()
            )));
        }
        Ok(self.warp_enc.forward(fields_half, train)?.0)
    }

    /// Encodes photos `(B, 3, S, S)` into normalized content codes and the
    /// last convolutional feature map.
    pub fn encode_photo(&self, photos: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let (_b, c, h, w) = photos.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "encode_photo: expected (B, 3, {s}, {s}), got {:?}",
                photos.dims()
            )));
        }
        self.photo_enc.forward(photos, train)
    }

    /// Decodes concatenated codes into a half-resolution residual field
    /// `(B, 2, S/2, S/2)`.
    pub fn decode_field(&self, warp_codes: &Tensor, content_codes: &Tensor) -> Result<Tensor> {
        let (_, dw) = warp_codes.dims2()?;
        let (_, dp) = content_codes.dims2()?;
        if dw != self.config.warp_code_dim || dp != self.config.content_code_dim {
            return Err(Error::Shape(format!(
                "decode_field: code dims ({dw}, {dp}) vs config ({}, {})",
                self.config.warp_code_dim, self.config.content_code_dim
            )));
        }
        let codes = Tensor::cat(&[warp_codes, content_codes], 1)?;
        self.field_dec.forward(&codes)
    }

    /// Reconstructs photos from the encoder feature map (photo decoder path).
    pub fn decode_photo(&self, feat: &Tensor) -> Result<Tensor> {
        self.photo_dec.forward(feat)
    }

    /// Photo reconstruction loss: l1 between the decoded
    /// feature map and the photo.
    pub fn photo_recon_loss(&self, photos: &Tensor, feat: &Tensor) -> Result<Tensor> {
        let recon = self.decode_photo(feat)?;
        l1(&recon, photos)
    }

    /// Draws one exaggeration for a photo: decode a field from the warp code
    /// and the photo's content code, scale it, warp. Deterministic for a
    /// fixed `(photo, warp_code, scale)`.
    pub fn sample_exaggeration(
        &self,
        photo: &ImageBuffer,
        warp_code: &[f32],
        scale: f64,
    ) -> Result<WarpSample> {
        let s = self.config.image_size;
        if photo.width() != s || photo.height() != s {
            return Err(Error::Shape(format!(
                "sample_exaggeration: photo {}x{} vs configured {s}",
                photo.width(),
                photo.height()
            )));
        }
        if warp_code.len() != self.config.warp_code_dim {
            return Err(Error::Shape(format!(
                "sample_exaggeration: warp code length {} vs {}",
                warp_code.len(),
                self.config.warp_code_dim
            )));
        }
        if !scale.is_finite() {
            return Err(Error::InvalidArgument("non-finite scale".into()));
        }
        let photos = photo.to_tensor()?.unsqueeze(0)?;
        let (zp, _feat) = self.encode_photo(&photos, false)?;
        let zw = Tensor::from_vec(
            warp_code.to_vec(),
            (1, self.config.warp_code_dim),
            &Device::Cpu,
        )?;
        let half = self.decode_field(&zw, &zp)?;
        let full = geometry::bilinear_resize(&half, s, s)?;
        let field = DeformationField::from_residual(full.squeeze(0)?)?;
        let scaled = geometry::scale_field(&field, scale)?;
        let warped = if scale == 0.0 {
            photo.clone()
        } else {
            geometry::warp_image(photo, &scaled)?
        };
        Ok(WarpSample {
            warp_code: warp_code.to_vec(),
            field,
            warped,
            scale,
        })
    }
}

/// l1 reconstruction error between predicted and target fields.
pub fn warp_recon_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    l1(pred, target)
}

/// Total variation of an image batch `(B, C, H, W)`: per-image sum of squared
/// vertical and horizontal neighbor differences, averaged over the
/// batch.
pub fn tv_loss(img: &Tensor) -> Result<Tensor> {
    let (b, _c, h, w) = img.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape("tv_loss: image smaller than 2x2".into()));
    }
    let dv = (img.narrow(2, 1, h - 1)? - img.narrow(2, 0, h - 1)?)?;
    let dh = (img.narrow(3, 1, w - 1)? - img.narrow(3, 0, w - 1)?)?;
    let total = (dv.sqr()?.sum_all()? + dh.sqr()?.sum_all()?)?;
    Ok((total / b as f64)?)
}

/// Inputs of one warper training step, already assembled as tensors.
pub struct WarperBatch {
    /// Photos `(B, 3, S, S)`.
    pub photos: Tensor,
    /// Exaggeration fields F(mean -> caricature) at full resolution.
    pub fields_mc: Tensor,
    /// Target fields F(photo -> caricature) at full resolution.
    pub fields_pc: Tensor,
}

/// Loss weights of the warper objective.
#[derive(Debug, Clone, Copy)]
pub struct WarperLossWeights {
    pub lambda_rec_warp: f64,
    pub lambda_tv: f64,
}

impl Default for WarperLossWeights {
    fn default() -> Self {
        Self {
            lambda_rec_warp: 10.0,
            lambda_tv: 5e-6,
        }
    }
}

/// One gradient step on the warper objective
/// `L = lambda_rec_warp * L_warp + L_photo + lambda_tv * L_tv`.
///
/// The TV term warps the photos with a freshly sampled warp code drawn from
/// `rng`. Returns the scalar loss components.
pub fn warper_train_step(
    warper: &Warper,
    batch: &WarperBatch,
    opt: &mut Adam,
    lr: f64,
    weights: WarperLossWeights,
    rng: &mut ChaCha8Rng,
    iter: usize,
) -> Result<WarperLosses> {
    let s = warper.config.image_size;
    let half = warper.config.half_size();
    let (b, _, _, _) = batch.photos.dims4()?;

    let fields_mc_half = geometry::bilinear_resize(&batch.fields_mc, half, half)?;
    let zw = warper.encode_warp(&fields_mc_half, true)?;
    let (zp, feat) = warper.encode_photo(&batch.photos, true)?;

    let pred_half = warper.decode_field(&zw, &zp)?;
    let pred_full = geometry::bilinear_resize(&pred_half, s, s)?;
    let l_warp = warp_recon_loss(&pred_full, &batch.fields_pc)?;

    let l_photo = warper.photo_recon_loss(&batch.photos, &feat)?;

    let zw_rand = Tensor::from_vec(
        nn::randn_vec(rng, b * warper.config.warp_code_dim),
        (b, warper.config.warp_code_dim),
        &Device::Cpu,
    )?;
    let rand_half = warper.decode_field(&zw_rand, &zp)?;
    let rand_full = geometry::bilinear_resize(&rand_half, s, s)?;
    let warped = geometry::bilinear_warp(&batch.photos, &rand_full)?;
    let l_tv = tv_loss(&warped)?;

    let total = ((&l_warp * weights.lambda_rec_warp)? + &l_photo)?;
    let total = (total + (&l_tv * weights.lambda_tv)?)?;

    let losses = WarperLosses {
        warp_recon: l_warp.to_scalar::<f32>()? as f64,
        photo_recon: l_photo.to_scalar::<f32>()? as f64,
        tv: l_tv.to_scalar::<f32>()? as f64,
        total: total.to_scalar::<f32>()? as f64,
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter,
            detail: format!("{losses:?}"),
        });
    }
    let grads = total.backward()?;
    opt.step(&grads, lr)?;
    Ok(losses)
}
