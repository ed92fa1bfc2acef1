use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::{round_half_away, Shape, Tensor};

/// Model input side length.
pub const MODEL_SIDE: usize = 224;

/// Bilinear resampling with half-pixel centres and edge clamping. Returns
/// `out_h × out_w × 3` values in the source's 0–255 scale.
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Result<Vec<f64>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 2 || h < 2 {
        return Err(Error::Shape(format!("cannot resample a {w}×{h} image")));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::Shape(format!("empty output size {out_w}×{out_h}")));
    }
    let taps = |o: usize, out: usize, input: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * input as f64 / out as f64 - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, out_w, w)).collect();
    let raw = img.as_raw();
    let px = |x: usize, y: usize, c: usize| raw[(y * w + x) * 3 + c] as f64;
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, out_h, h);
        for &(x0, x1, fx) in &cols {
            for c in 0..3 {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// Resizes to 224×224 and scales channels to `[0, 1]`.
pub fn preprocess(img: &RgbImage) -> Result<Tensor> {
    let v = resize_bilinear(img, MODEL_SIDE, MODEL_SIDE)?;
    let data = v.into_iter().map(|x| (x / 255.0) as f32).collect();
    Tensor::from_f32(Shape::new(1, MODEL_SIDE, MODEL_SIDE, 3), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns, 0–3.
    pub rot90_k: u8,
    /// 0.5–1.5; 1 leaves the image unchanged.
    pub contrast_factor: f32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flip_h: false,
            flip_v: false,
            rot90_k: 0,
            contrast_factor: 1.0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rot90_k > 3 {
            return Err(Error::InvalidAttr(format!("rot90_k {} outside 0..=3", self.rot90_k)));
        }
        if !(0.5..=1.5).contains(&self.contrast_factor) {
            return Err(Error::InvalidAttr(format!(
                "contrast factor {} outside [0.5, 1.5]",
                self.contrast_factor
            )));
        }
        Ok(())
    }
}

fn rotate_ccw(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(h, w, |x, y| *img.get_pixel(w - 1 - y, x))
}

/// Flips, then quarter turns, then contrast about the image's mean luma.
pub fn augment(img: &RgbImage, spec: &AugmentSpec) -> Result<RgbImage> {
    spec.validate()?;
    let mut out = img.clone();
    if spec.flip_h {
        image::imageops::flip_horizontal_in_place(&mut out);
    }
    if spec.flip_v {
        image::imageops::flip_vertical_in_place(&mut out);
    }
    for _ in 0..spec.rot90_k {
        out = rotate_ccw(&out);
    }
    if spec.contrast_factor != 1.0 && !out.is_empty() {
        let n = (out.width() * out.height()) as f64;
        let mean = out
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .sum::<f64>()
            / n;
        let f = spec.contrast_factor as f64;
        for v in out.iter_mut() {
            *v = round_half_away(mean + f * (*v as f64 - mean)).clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}
