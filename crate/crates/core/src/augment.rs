//! Deterministic training-time image augmentation.
//!
//! Pipeline: rotate (nearest neighbor, zero fill), horizontal flip,
//! resize to the target side, zero-pad and random crop, then brightness
//! and contrast jitter with clamping to [0, 1]. All randomness comes
//! from the seed argument, in a fixed draw order, so one seed applied to
//! a static/dynamic image pair yields identical spatial transforms.

use crate::math;
use crate::rankpool::Image;
use crate::seed;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub out_side: usize,
    /// Zero padding before the random crop.
    pub pad: usize,
    /// Rotation is drawn from [-max, max] degrees.
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
    /// Contrast factor drawn from [1 - c, 1 + c].
    pub max_contrast: f64,
    /// Brightness offset drawn from [-b, b].
    pub max_brightness: f64,
}

impl AugmentConfig {
    pub fn training(out_side: usize, pad: usize) -> AugmentConfig {
        AugmentConfig {
            out_side,
            pad,
            max_rotation_deg: 180.0,
            flip_prob: 0.5,
            max_contrast: 0.2,
            max_brightness: 0.2,
        }
    }

    /// No-op configuration (aside from resizing to `out_side`).
    pub fn identity(out_side: usize) -> AugmentConfig {
        AugmentConfig {
            out_side,
            pad: 0,
            max_rotation_deg: 0.0,
            flip_prob: 0.0,
            max_contrast: 0.0,
            max_brightness: 0.0,
        }
    }
}

/// Nearest-neighbor resize.
pub fn resize_nearest(img: &Image, out_h: usize, out_w: usize) -> Image {
    if img.height() == out_h && img.width() == out_w {
        return img.clone();
    }
    let mut out = Image::zeros(img.channels(), out_h, out_w);
    let sy = img.height() as f64 / out_h as f64;
    let sx = img.width() as f64 / out_w as f64;
    for c in 0..img.channels() {
        for y in 0..out_h {
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(img.height() - 1);
            for x in 0..out_w {
                let src_x = (((x as f64 + 0.5) * sx) as usize).min(img.width() - 1);
                out.set(c, y, x, img.get(c, src_y, src_x));
            }
        }
    }
    out
}

/// Rotation about the image center, nearest neighbor, zero fill.
pub fn rotate_nearest(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let rad = degrees * core::f64::consts::PI / 180.0;
    let (sin, cos) = (math::sin(rad), math::cos(rad));
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let cx = (img.width() as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(img.channels(), img.height(), img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            // Inverse map: rotate the output coordinate by -degrees.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let src_y = math::round(cy + dy * cos - dx * sin);
            let src_x = math::round(cx + dy * sin + dx * cos);
            if src_y < 0.0 || src_x < 0.0 {
                continue;
            }
            let (sy, sx) = (src_y as usize, src_x as usize);
            if sy >= img.height() || sx >= img.width() {
                continue;
            }
            for c in 0..img.channels() {
                out.set(c, y, x, img.get(c, sy, sx));
            }
        }
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = Image::zeros(img.channels(), img.height(), img.width());
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(c, y, x, img.get(c, y, img.width() - 1 - x));
            }
        }
    }
    out
}

/// Crop of the zero-padded image: output (y, x) reads
/// `img[y + off_y - pad][x + off_x - pad]`, zero outside.
fn pad_crop(img: &Image, pad: usize, off_y: usize, off_x: usize) -> Image {
    if pad == 0 {
        return img.clone();
    }
    let mut out = Image::zeros(img.channels(), img.height(), img.width());
    for c in 0..img.channels() {
        for y in 0..img.height() {
            let sy = y as isize + off_y as isize - pad as isize;
            if sy < 0 || sy >= img.height() as isize {
                continue;
            }
            for x in 0..img.width() {
                let sx = x as isize + off_x as isize - pad as isize;
                if sx < 0 || sx >= img.width() as isize {
                    continue;
                }
                out.set(c, y, x, img.get(c, sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Eval-time preparation: resize only.
pub fn prepare(img: &Image, out_side: usize) -> Image {
    resize_nearest(img, out_side, out_side)
}

/// Full training augmentation. Draw order is fixed: rotation, flip,
/// crop offsets, contrast, brightness.
pub fn augment(img: &Image, cfg: &AugmentConfig, seed_value: u64) -> Image {
    let mut rng = seed::rng_for(seed_value, "augment");
    let theta = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
    let flip = rng.random_range(0.0..=1.0) < cfg.flip_prob;
    let off_y = rng.random_range(0..=2 * cfg.pad);
    let off_x = rng.random_range(0..=2 * cfg.pad);
    let contrast = rng.random_range(1.0 - cfg.max_contrast..=1.0 + cfg.max_contrast);
    let brightness = rng.random_range(-cfg.max_brightness..=cfg.max_brightness);

    let mut out = rotate_nearest(img, theta);
    if flip {
        out = hflip(&out);
    }
    out = resize_nearest(&out, cfg.out_side, cfg.out_side);
    out = pad_crop(&out, cfg.pad, off_y, off_x);
    if cfg.max_contrast != 0.0 || cfg.max_brightness != 0.0 {
        for v in out.data_mut() {
            *v = (contrast * *v + brightness).clamp(0.0, 1.0);
        }
    }
    out
}
