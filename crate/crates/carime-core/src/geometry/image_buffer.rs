use std::path::Path;

use candle_core::{Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

/// H x W x 3 image with values in `[-1, 1]`, channels-last in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    data: Vec<f32>,
    width: usize,
    height: usize,
}

impl ImageBuffer {
    pub fn new(data: Vec<f32>, width: usize, height: usize) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image buffer: {} values for {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite image value".into()));
        }
        Ok(Self {
            data,
            width,
            height,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self {
            data: vec![value; width * height * 3],
            width,
            height,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
        Self {
            data,
            width: w,
            height: h,
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Channels-first `(3, H, W)` f32 tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = Tensor::from_vec(
            self.data.clone(),
            (self.height, self.width, 3),
            &Device::Cpu,
        )?;
        Ok(t.permute((2, 0, 1))?.contiguous()?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let hwc = t
            .to_dtype(candle_core::DType::F32)?
            .permute((1, 2, 0))?
            .contiguous()?;
        let data: Vec<f32> = hwc.flatten_all()?.to_vec1()?;
        Self::new(data, w, h)
    }

    /// Bilinear sample at a fractional pixel location with border clamp.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = [0f32; 3];
        for c in 0..3 {
            let at = |yy: usize, xx: usize| self.data[(yy * self.width + xx) * 3 + c] as f64;
            out[c] = (at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x1) * fx * (1.0 - fy)
                + at(y1, x0) * (1.0 - fx) * fy
                + at(y1, x1) * fx * fy) as f32;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip() {
        let mut img = ImageBuffer::constant(4, 3, 0.0);
        img.set_pixel(1, 2, [0.5, -0.25, 1.0]);
        let t = img.to_tensor().unwrap();
        assert_eq!(t.dims(), &[3, 3, 4]);
        let back = ImageBuffer::from_tensor(&t).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn u8_roundtrip_is_exact_on_u8_grid() {
        let mut rgb = RgbImage::new(5, 4);
        for (i, p) in rgb.pixels_mut().enumerate() {
            p.0 = [(i * 13 % 256) as u8, (i * 7 % 256) as u8, (i * 3 % 256) as u8];
        }
        let buf = ImageBuffer::from_rgb(&rgb);
        assert_eq!(buf.to_rgb(), rgb);
    }
}
