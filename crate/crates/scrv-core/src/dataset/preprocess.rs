//! Decode → resize → augment → normalize, with a fixed per-image RNG budget.
//!
//! When augmentation is on, exactly [`AUGMENT_DRAWS`] values are consumed per
//! image in a fixed order, whether or not each transform fires. Corrupted-file
//! resampling consumes one extra draw per failed attempt. Everything else is
//! draw-free, so a pre-split per-item RNG stream makes loading order
//! irrelevant.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// RNG values consumed per image when `augment` is set: horizontal-flip coin,
/// gray-flip coin, contrast factor, brightness offset.
pub const AUGMENT_DRAWS: usize = 4;

/// How many resample attempts a corrupted image gets before the placeholder.
pub const CORRUPT_RETRIES: usize = 3;

/// Channel statistics and geometry for image ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Output height and width.
    pub target: (usize, usize),
    /// Per-channel mean subtracted after scaling to [0, 1].
    pub mean: [f64; 3],
    /// Per-channel divisor; all components must be positive.
    pub std: [f64; 3],
    /// Enables the stochastic transforms.
    pub augment: bool,
    /// Horizontal flip probability.
    pub hflip_p: f64,
    /// Intensity inversion (v → 1−v) probability.
    pub grayflip_p: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target: (64, 64),
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            augment: false,
            hflip_p: 0.5,
            grayflip_p: 0.2,
        }
    }
}

impl PreprocessConfig {
    /// Same statistics, augmentation toggled.
    pub fn with_augment(mut self, augment: bool) -> Self {
        self.augment = augment;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.0 == 0 || self.target.1 == 0 {
            return Err(Error::InvalidConfig(format!(
                "target size must be positive, got {:?}",
                self.target
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "std components must be positive, got {:?}",
                self.std
            )));
        }
        for (name, p) in [("hflip_p", self.hflip_p), ("grayflip_p", self.grayflip_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        3 * self.target.0 * self.target.1
    }
}

/// Bilinear resample with half-pixel centers (corner-aligned = false).
fn resize_bilinear(src: &[f32], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f32> {
    if sh == th && sw == tw {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; th * tw];
    let scale_y = sh as f64 / th as f64;
    let scale_x = sw as f64 / tw as f64;
    for ty in 0..th {
        let sy = ((ty as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = (sy - y0 as f64) as f32;
        for tx in 0..tw {
            let sx = ((tx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = (sx - x0 as f64) as f32;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[ty * tw + tx] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Resize, scale to [0, 1], augment, normalize. `planes` are R, G, B at the
/// source resolution on the 0..255 scale; the result is CHW at the target
/// size. Split out from decoding so the numeric contract is testable exactly.
pub fn preprocess_planes<T: Scalar>(
    planes: &[Vec<f32>; 3],
    src_hw: (usize, usize),
    cfg: &PreprocessConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<T> {
    let (sh, sw) = src_hw;
    let (th, tw) = cfg.target;
    let mut resized: Vec<Vec<f32>> = planes
        .iter()
        .map(|p| {
            debug_assert_eq!(p.len(), sh * sw);
            let mut r = resize_bilinear(p, sh, sw, th, tw);
            for v in &mut r {
                *v /= 255.0;
            }
            r
        })
        .collect();

    if cfg.augment {
        // Fixed draw order; every draw happens even when its transform skips.
        let flip = rng.random_range(0.0..1.0) < cfg.hflip_p;
        let gray_flip = rng.random_range(0.0..1.0) < cfg.grayflip_p;
        let contrast = rng.random_range(0.9..1.1f32);
        let brightness = rng.random_range(-0.1..0.1f32);
        for plane in &mut resized {
            if flip {
                for row in plane.chunks_mut(tw) {
                    row.reverse();
                }
            }
            for v in plane.iter_mut() {
                if gray_flip {
                    *v = 1.0 - *v;
                }
                *v = (contrast * *v + brightness).clamp(0.0, 1.0);
            }
        }
    }

    let mut out = Vec::with_capacity(3 * th * tw);
    for (c, plane) in resized.iter().enumerate() {
        let mean = cfg.mean[c] as f32;
        let inv_std = 1.0 / cfg.std[c] as f32;
        out.extend(plane.iter().map(|&v| T::from_f64c(((v - mean) * inv_std) as f64)));
    }
    out
}

fn decode_planes(path: &Path) -> Result<([Vec<f32>; 3], (usize, usize))> {
    let img = image::open(path)
        .map_err(|_| Error::CorruptedImage(path.to_path_buf()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::CorruptedImage(path.to_path_buf()));
    }
    let raw = img.into_raw();
    let mut planes = [
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
    ];
    for px in raw.chunks_exact(3) {
        planes[0].push(px[0] as f32);
        planes[1].push(px[1] as f32);
        planes[2].push(px[2] as f32);
    }
    Ok((planes, (h, w)))
}

/// Loads one image into a normalized CHW tensor buffer of shape `[3, H, W]`.
///
/// Any decode failure maps to [`Error::CorruptedImage`]; with `augment` off
/// the call is a pure function of `(path, cfg)` and consumes no randomness.
pub fn load_and_preprocess<T: Scalar>(
    path: &Path,
    cfg: &PreprocessConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<T>> {
    let (planes, src_hw) = decode_planes(path)?;
    Ok(preprocess_planes(&planes, src_hw, cfg, rng))
}

/// The all-black substitute image, normalized: channel `c` is constant
/// `(0 − mean_c) / std_c`.
pub fn placeholder<T: Scalar>(cfg: &PreprocessConfig) -> Vec<T> {
    let (th, tw) = cfg.target;
    let mut out = Vec::with_capacity(3 * th * tw);
    for c in 0..3 {
        let v = T::from_f64c(-cfg.mean[c] / cfg.std[c]);
        out.extend(std::iter::repeat_n(v, th * tw));
    }
    out
}

/// [`load_and_preprocess`] with the corrupted-file contract: on failure,
/// resample uniformly from `class_paths` up to [`CORRUPT_RETRIES`] times
/// (one RNG draw per failed attempt), then fall back to [`placeholder`].
/// Never fails, so batch assembly cannot abort mid-epoch.
pub fn load_with_fallback<T: Scalar>(
    path: &Path,
    class_paths: &[PathBuf],
    cfg: &PreprocessConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<T> {
    assert!(!class_paths.is_empty(), "fallback pool must be non-empty");
    let mut attempt = path.to_path_buf();
    for retry in 0..=CORRUPT_RETRIES {
        match load_and_preprocess(&attempt, cfg, rng) {
            Ok(t) => return t,
            Err(_) if retry < CORRUPT_RETRIES => {
                log::warn!("unreadable image {attempt:?}, resampling from class");
                attempt = class_paths[rng.random_range(0..class_paths.len())].clone();
            }
            Err(_) => {
                log::warn!("giving up on {path:?} after {CORRUPT_RETRIES} resamples, using placeholder");
            }
        }
    }
    placeholder(cfg)
}
