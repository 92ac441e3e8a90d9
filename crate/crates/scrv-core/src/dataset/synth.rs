//! Procedural handwriting-like corpus: each scribe is a stroke style, each
//! image a handful of sheared quadratic strokes rendered to grayscale PNG.
//!
//! Styles are spread deterministically across scribes (slant sweeps a fixed
//! arc; width, density, curvature, and stroke count cycle through eight
//! anchor rows with small seeded jitter), so any two scribes differ in
//! several visible attributes and the verification task is learnable at desk
//! scale. All randomness derives from the run seed: one serial stream for
//! styles, one indexed stream per image for strokes.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{scan_corpus, ScribeCorpus, Split};
use crate::rng::{stream, stream_indexed, StreamDomain};
use crate::{Error, Result};

/// Rendering parameters of one synthetic scribe.
#[derive(Debug, Clone, PartialEq)]
pub struct ScribeStyle {
    /// Horizontal shear angle in radians, applied about the canvas center.
    pub slant: f64,
    /// Base stroke width in pixels; the deposited radius is `width * density`.
    pub width: f64,
    /// Control-point jitter scale (unitless, multiplies canvas/16).
    pub curvature: f64,
    /// Ink flow in (0, 1]: scales both deposit darkness and stroke radius.
    pub density: f64,
    /// Inclusive range of strokes per image.
    pub strokes: (usize, usize),
}

impl ScribeStyle {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "stroke width must be >= 1, got {}",
                self.width
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ink density must lie in (0, 1], got {}",
                self.density
            )));
        }
        if self.strokes.0 == 0 || self.strokes.0 > self.strokes.1 {
            return Err(Error::InvalidConfig(format!(
                "stroke count range must be nonempty and positive, got {:?}",
                self.strokes
            )));
        }
        Ok(())
    }
}

/// Anchor attribute rows, one per scribe modulo 8. Four attributes take two
/// well-separated levels each (deposited radius via width, ink darkness via
/// density, wiggliness, stroke count), and the rows sit on the even-parity
/// half of the level cube, so any two rows differ in at least two attributes
/// by a full level gap. No pair relies on slant alone, because
/// horizontal-flip augmentation scrambles slant sign at train time and would
/// make such a pair unlearnable.
const WIDTHS: [f64; 8] = [1.0, 1.0, 1.8, 1.8, 4.6, 4.6, 7.7, 7.7];
const DENSITIES: [f64; 8] = [0.92, 0.92, 0.55, 0.55, 0.92, 0.92, 0.55, 0.55];
const CURVATURES: [f64; 8] = [0.45, 3.6, 0.45, 3.6, 0.45, 3.6, 0.45, 3.6];
const STROKE_COUNTS: [(usize, usize); 8] = [
    (2, 3),
    (9, 12),
    (9, 12),
    (2, 3),
    (9, 12),
    (2, 3),
    (2, 3),
    (9, 12),
];
const SLANT_ARC: (f64, f64) = (-0.45, 0.45);

/// Consumes exactly 3 draws per scribe from the style stream.
fn draw_style(scribe: usize, n_scribes: usize, rng: &mut ChaCha8Rng) -> ScribeStyle {
    let t = if n_scribes > 1 {
        scribe as f64 / (n_scribes - 1) as f64
    } else {
        0.5
    };
    let a = scribe % 8;
    ScribeStyle {
        slant: SLANT_ARC.0 + t * (SLANT_ARC.1 - SLANT_ARC.0) + rng.random_range(-0.02..0.02),
        width: WIDTHS[a],
        curvature: CURVATURES[a] * rng.random_range(0.9..1.1),
        density: (DENSITIES[a] + rng.random_range(-0.03..0.03)).clamp(0.05, 1.0),
        strokes: STROKE_COUNTS[a],
    }
}

fn stamp_disc(img: &mut [u8], canvas: usize, cx: f64, cy: f64, radius: f64, ink: u8) {
    let r2 = radius * radius;
    let x_lo = ((cx - radius).floor().max(0.0)) as usize;
    let x_hi = ((cx + radius).ceil().min((canvas - 1) as f64)) as usize;
    let y_lo = ((cy - radius).floor().max(0.0)) as usize;
    let y_hi = ((cy + radius).ceil().min((canvas - 1) as f64)) as usize;
    if cx + radius < 0.0 || cy + radius < 0.0 {
        return;
    }
    for y in y_lo..=y_hi {
        let dy = y as f64 - cy;
        let row = &mut img[y * canvas..(y + 1) * canvas];
        for (x, px) in row.iter_mut().enumerate().take(x_hi + 1).skip(x_lo) {
            let dx = x as f64 - cx;
            if dx * dx + dy * dy <= r2 {
                *px = (*px).min(ink);
            }
        }
    }
}

/// Renders one image of `style` onto a white `canvas`×`canvas` grayscale
/// buffer. Consumes `1 + 6 * n_strokes` draws from `rng`.
pub fn render_style_image(style: &ScribeStyle, canvas: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    assert!(canvas >= 32, "canvas too small to render strokes");
    let mut img = vec![255u8; canvas * canvas];
    let ink = (255.0 * (1.0 - style.density)).round() as u8;
    let radius = (style.width * style.density).max(0.5);
    let margin = (canvas / 12).max(2) as f64;
    let lo = margin;
    let hi = canvas as f64 - margin;
    let center = canvas as f64 / 2.0;
    let jitter = Normal::new(0.0, style.curvature * canvas as f64 / 16.0).expect("finite std");

    let n_strokes = rng.random_range(style.strokes.0..=style.strokes.1);
    for _ in 0..n_strokes {
        let (x0, y0) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let (x2, y2) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let x1 = (x0 + x2) / 2.0 + jitter.sample(rng);
        let y1 = (y0 + y2) / 2.0 + jitter.sample(rng);
        // Shear the control polygon, not the raster: no resampling artifacts.
        let shear = |x: f64, y: f64| (x + style.slant * (y - center), y);
        let p0 = shear(x0, y0);
        let p1 = shear(x1, y1);
        let p2 = shear(x2, y2);
        let approx_len = ((p1.0 - p0.0).hypot(p1.1 - p0.1) + (p2.0 - p1.0).hypot(p2.1 - p1.1))
            .max(1.0);
        let steps = (approx_len * 2.0).ceil() as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let u = 1.0 - t;
            let px = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let py = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            stamp_disc(&mut img, canvas, px, py, radius, ink);
        }
    }
    img
}

/// Mean ink mass per pixel: 0 for a blank white image, 1 for solid black.
pub fn ink_coverage(pixels: &[u8]) -> f64 {
    let total: f64 = pixels.iter().map(|&v| 1.0 - v as f64 / 255.0).sum();
    total / pixels.len() as f64
}

fn save_gray_png(path: &Path, canvas: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(canvas as u32, canvas as u32, pixels)
        .expect("buffer matches canvas dimensions");
    img.save(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot write {path:?}: {e}")))
}

/// Writes `out_root/{train,test}/scribe_k/img_NNNN.png` trees and returns the
/// scanned corpora. Same seed, same arguments → byte-identical trees.
pub fn generate_synthetic_corpus(
    out_root: &Path,
    n_scribes: usize,
    n_train: usize,
    n_test: usize,
    canvas: usize,
    seed: u64,
) -> Result<(ScribeCorpus, ScribeCorpus)> {
    if n_scribes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 scribes, got {n_scribes}"
        )));
    }
    if canvas < 32 {
        return Err(Error::InvalidConfig(format!(
            "canvas must be at least 32, got {canvas}"
        )));
    }
    if n_train < 2 || n_test < 1 {
        return Err(Error::InvalidConfig(format!(
            "need >= 2 train and >= 1 test images per scribe, got {n_train}/{n_test}"
        )));
    }

    let mut style_rng = stream(seed, StreamDomain::Synth);
    let styles: Vec<ScribeStyle> = (0..n_scribes)
        .map(|k| draw_style(k, n_scribes, &mut style_rng))
        .collect();

    let per_scribe = n_train + n_test;
    for (k, style) in styles.iter().enumerate() {
        style.validate()?;
        for (split_name, count, offset) in [("train", n_train, 0), ("test", n_test, n_train)] {
            let dir = out_root.join(split_name).join(format!("scribe_{k}"));
            std::fs::create_dir_all(&dir)?;
            for i in 0..count {
                // Image index 0 is the style stream; images start at 1.
                let image_idx = 1 + (k * per_scribe + offset + i) as u64;
                let mut rng = stream_indexed(seed, StreamDomain::Synth, image_idx);
                let pixels = render_style_image(style, canvas, &mut rng);
                save_gray_png(&dir.join(format!("img_{i:04}.png")), canvas, pixels)?;
            }
        }
    }

    let train = scan_corpus(&out_root.join("train"), Split::Train)?;
    let test = scan_corpus(&out_root.join("test"), Split::Test)?;
    Ok((train, test))
}
