//! Training augmentation (resize → random crop → horizontal flip →
//! normalize) and the deterministic evaluation transform.
//!
//! Resizing is bilinear with half-pixel centers (`align_corners = false`):
//! output pixel `x` samples source coordinate `(x + 0.5)·in/out − 0.5`,
//! clamped to the image, with no antialiasing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// ImageNet channel statistics.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Target length of the shorter side before cropping.
    pub resize_shorter: usize,
    /// Side of the square crop; equals the model input size.
    pub crop: usize,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize_shorter: 256,
            crop: 224,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Keeps the 256:224 resize-to-crop ratio for other input sizes.
    pub fn for_image_size(size: usize) -> Self {
        Self {
            resize_shorter: ((size as f64) * 256.0 / 224.0).round() as usize,
            crop: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.resize_shorter < self.crop {
            return Err(Error::Config(format!(
                "resize_shorter ({}) must be at least crop ({}) and crop positive",
                self.resize_shorter, self.crop
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Crop offsets and flip decision for one augmented sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

fn chw(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::InvalidShape {
            op: "augment",
            shape: s.to_vec(),
            reason: "expected C×H×W".into(),
        }),
    }
}

fn axis_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape {
            op: "resize",
            shape: vec![c, out_h, out_w],
            reason: "zero output extent".into(),
        });
    }
    let ys = axis_taps(out_h, h);
    let xs = axis_taps(out_w, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out.push((top * (1.0 - wy) + bottom * wy) as f32);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Scales so the shorter side equals `target`, preserving aspect ratio.
pub fn resize_shorter(image: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = chw(image)?;
    let (out_h, out_w) = if h <= w {
        (target, ((w as f64) * target as f64 / h as f64).round() as usize)
    } else {
        (((h as f64) * target as f64 / w as f64).round() as usize, target)
    };
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    resize_bilinear(image, out_h, out_w)
}

pub fn crop(image: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image)?;
    if top + size > h || left + size > w {
        return Err(Error::InvalidShape {
            op: "crop",
            shape: image.shape().to_vec(),
            reason: format!("{size}×{size} crop at ({top}, {left}) out of bounds"),
        });
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let start = (ch * h + y) * w + left;
            out.extend_from_slice(&src[start..start + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

pub fn flip_horizontal(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image)?;
    let mut out = image.data().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(vec![c, h, w], out)
}

/// Per-channel `(x − mean)/std` with the ImageNet statistics.
pub fn normalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    per_channel(image, |v, c| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
}

pub fn denormalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    per_channel(image, |v, c| v * IMAGENET_STD[c] + IMAGENET_MEAN[c])
}

fn per_channel(image: &Tensor<f32>, f: impl Fn(f64, usize) -> f64) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image)?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "normalize",
            shape: image.shape().to_vec(),
            reason: "expected 3 channels".into(),
        });
    }
    let plane = h * w;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v as f64, i / plane) as f32)
        .collect();
    Tensor::new(vec![c, h, w], data)
}

fn resized(image: &Tensor<f32>, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let (_, h, w) = chw(image)?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            op: "augment",
            shape: image.shape().to_vec(),
            reason: "degenerate image".into(),
        });
    }
    resize_shorter(image, cfg.resize_shorter)
}

/// Draws crop offsets (top, then left) and the flip decision.
pub fn sample_crop_plan(rng: &mut Rng, h: usize, w: usize, cfg: &AugmentConfig) -> CropPlan {
    let top = rng.below((h - cfg.crop + 1) as u64) as usize;
    let left = rng.below((w - cfg.crop + 1) as u64) as usize;
    let flip = rng.bernoulli(cfg.flip_prob);
    CropPlan { top, left, flip }
}

/// Resize, then apply an explicit crop/flip plan, then normalize.
pub fn augment_with_plan(
    image: &Tensor<f32>,
    plan: CropPlan,
    cfg: &AugmentConfig,
) -> Result<Tensor<f32>> {
    let r = resized(image, cfg)?;
    let mut out = crop(&r, plan.top, plan.left, cfg.crop)?;
    if plan.flip {
        out = flip_horizontal(&out)?;
    }
    normalize(&out)
}

/// Random training transform; equal seeds give bitwise-equal outputs.
pub fn augment_train(image: &Tensor<f32>, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    let r = resized(image, cfg)?;
    let (_, h, w) = chw(&r)?;
    let plan = sample_crop_plan(rng, h, w, cfg);
    let mut out = crop(&r, plan.top, plan.left, cfg.crop)?;
    if plan.flip {
        out = flip_horizontal(&out)?;
    }
    normalize(&out)
}

/// Offsets of the centered crop in a resized image.
pub fn center_offsets(h: usize, w: usize, crop: usize) -> (usize, usize) {
    ((h - crop) / 2, (w - crop) / 2)
}

/// Deterministic evaluation transform: resize, center crop, normalize.
pub fn preprocess_eval(image: &Tensor<f32>, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    let r = resized(image, cfg)?;
    let (_, h, w) = chw(&r)?;
    let (top, left) = center_offsets(h, w, cfg.crop);
    normalize(&crop(&r, top, left, cfg.crop)?)
}
