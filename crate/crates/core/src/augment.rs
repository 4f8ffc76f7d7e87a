//! Photometric augmentations (brightness shift, Gaussian and salt-and-pepper
//! noise, HSV jitter) and four-image mosaic. Every random op takes the
//! generator explicitly, so output is a pure function of input and seed.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::LabelRecord;
use crate::image::{RasterImage, Rgb};
use crate::rng::SplitMix64;

pub const GAUSS_VARIANCE: f64 = 0.02;
pub const SALT_PEPPER_DENSITY: f64 = 0.02;
pub const HSV_GAINS: (f64, f64, f64) = (0.015, 0.7, 0.4);
pub const MOSAIC_FILL: Rgb = [114, 114, 114];
/// Labels keeping less than this fraction of their area after the crop are dropped.
pub const MOSAIC_MIN_KEEP: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("mosaic needs 4 images, got {0}")]
    MosaicInputs(usize),
    #[error("unknown augmentation '{0}' (expected one of b+20, b+40, b-20, b-40, saltpepper, gauss, hsv, mosaic)")]
    UnknownOp(String),
    #[error("mosaic output size must be positive")]
    ZeroSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: RasterImage,
    pub labels: Vec<LabelRecord>,
}

pub fn adjust_brightness(img: &RasterImage, delta: i32) -> RasterImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = (*p as i32 + delta).clamp(0, 255) as u8;
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Adds `N(0, variance)` to every channel in the `[0, 1]` domain.
pub fn gaussian_noise(img: &RasterImage, variance: f64, rng: &mut SplitMix64) -> RasterImage {
    let sigma = variance.max(0.0).sqrt();
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = to_u8(*p as f64 / 255.0 + sigma * rng.normal());
    }
    out
}

/// Replaces each pixel with probability `density` by black or white.
pub fn salt_pepper(img: &RasterImage, density: f64, rng: &mut SplitMix64) -> RasterImage {
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        if rng.next_f64() < density {
            let v = if rng.next_u64() >> 63 == 0 { 0 } else { 255 };
            px.fill(v);
        }
    }
    out
}

/// Hexcone RGB to HSV, all components in `[0, 1]`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Scales H, S and V by `1 + u * gain` with one `u` in `[-1, 1]` per channel
/// for the whole image.
pub fn hsv_jitter(img: &RasterImage, gains: (f64, f64, f64), rng: &mut SplitMix64) -> RasterImage {
    let gh = 1.0 + rng.uniform(-1.0, 1.0) * gains.0;
    let gs = 1.0 + rng.uniform(-1.0, 1.0) * gains.1;
    let gv = 1.0 + rng.uniform(-1.0, 1.0) * gains.2;
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0);
        let (r, g, b) = hsv_to_rgb((h * gh).rem_euclid(1.0), (s * gs).clamp(0.0, 1.0), (v * gv).clamp(0.0, 1.0));
        px.copy_from_slice(&[to_u8(r), to_u8(g), to_u8(b)]);
    }
    out
}

pub fn mosaic(images: &[LabeledImage], out_size: usize, rng: &mut SplitMix64) -> Result<LabeledImage, AugmentError> {
    mosaic_with(images, out_size, MOSAIC_MIN_KEEP, rng)
}

/// Stitches the first four images around a random centre of a `2s x 2s`
/// canvas and crops the `s x s` window centred there.
pub fn mosaic_with(
    images: &[LabeledImage],
    out_size: usize,
    min_keep: f64,
    rng: &mut SplitMix64,
) -> Result<LabeledImage, AugmentError> {
    if images.len() < 4 {
        return Err(AugmentError::MosaicInputs(images.len()));
    }
    if out_size == 0 {
        return Err(AugmentError::ZeroSize);
    }
    let s = out_size as i64;
    let xc = s / 2 + rng.below(out_size as u64 + 1) as i64;
    let yc = s / 2 + rng.below(out_size as u64 + 1) as i64;
    let (crop_x, crop_y) = (xc - s / 2, yc - s / 2);
    let mut canvas = RasterImage::filled(out_size, out_size, MOSAIC_FILL);
    let mut labels = Vec::new();

    for (i, item) in images.iter().take(4).enumerate() {
        let src = &item.image;
        if src.is_empty() {
            continue;
        }
        let r = out_size as f64 / src.width().max(src.height()) as f64;
        let nw = ((src.width() as f64 * r).round() as usize).max(1);
        let nh = ((src.height() as f64 * r).round() as usize).max(1);
        let resized = src.resize_bilinear(nw, nh).expect("non-empty sizes");
        let (nw, nh) = (nw as i64, nh as i64);
        let ox = if i % 2 == 0 { xc - nw } else { xc };
        let oy = if i < 2 { yc - nh } else { yc };
        // offset of the placed image inside the output window
        let (dx, dy) = (ox - crop_x, oy - crop_y);
        let x_lo = dx.max(0);
        let x_hi = (dx + nw).min(s);
        let y_lo = dy.max(0);
        let y_hi = (dy + nh).min(s);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                canvas.set(x as usize, y as usize, resized.get((x - dx) as usize, (y - dy) as usize));
            }
        }
        for l in &item.labels {
            let bw = l.w as f64 * nw as f64;
            let bh = l.h as f64 * nh as f64;
            let x0 = l.cx as f64 * nw as f64 - bw / 2.0 + dx as f64;
            let y0 = l.cy as f64 * nh as f64 - bh / 2.0 + dy as f64;
            let (x1, y1) = (x0 + bw, y0 + bh);
            let sf = s as f64;
            let (cx0, cy0, cx1, cy1) = (x0.clamp(0.0, sf), y0.clamp(0.0, sf), x1.clamp(0.0, sf), y1.clamp(0.0, sf));
            let kept = (cx1 - cx0) * (cy1 - cy0);
            let area = bw * bh;
            if area <= 0.0 || kept <= 0.0 || kept < min_keep * area {
                continue;
            }
            labels.push(LabelRecord {
                class: l.class,
                cx: (((cx0 + cx1) / 2.0) / sf) as f32,
                cy: (((cy0 + cy1) / 2.0) / sf) as f32,
                w: ((cx1 - cx0) / sf) as f32,
                h: ((cy1 - cy0) / sf) as f32,
            });
        }
    }
    Ok(LabeledImage { image: canvas, labels })
}

/// Per-image augmentation selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Brightness(i32),
    SaltPepper,
    Gauss,
    Hsv,
    Mosaic,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 8] = [
        AugmentOp::Brightness(20),
        AugmentOp::Brightness(40),
        AugmentOp::Brightness(-20),
        AugmentOp::Brightness(-40),
        AugmentOp::SaltPepper,
        AugmentOp::Gauss,
        AugmentOp::Hsv,
        AugmentOp::Mosaic,
    ];

    pub fn name(self) -> String {
        match self {
            AugmentOp::Brightness(d) => format!("b{d:+}"),
            AugmentOp::SaltPepper => "saltpepper".into(),
            AugmentOp::Gauss => "gauss".into(),
            AugmentOp::Hsv => "hsv".into(),
            AugmentOp::Mosaic => "mosaic".into(),
        }
    }

    /// File-name suffix for outputs of this op.
    pub fn suffix(self) -> String {
        match self {
            AugmentOp::Brightness(d) => format!("_b{d:+}"),
            AugmentOp::SaltPepper => "_sp".into(),
            AugmentOp::Gauss => "_gauss".into(),
            AugmentOp::Hsv => "_hsv".into(),
            AugmentOp::Mosaic => "_mosaic".into(),
        }
    }

    /// Applies a single-image op; labels pass through unchanged.
    /// Returns `None` for mosaic, which needs four inputs.
    pub fn apply(self, img: &RasterImage, rng: &mut SplitMix64) -> Option<RasterImage> {
        Some(match self {
            AugmentOp::Brightness(d) => adjust_brightness(img, d),
            AugmentOp::SaltPepper => salt_pepper(img, SALT_PEPPER_DENSITY, rng),
            AugmentOp::Gauss => gaussian_noise(img, GAUSS_VARIANCE, rng),
            AugmentOp::Hsv => hsv_jitter(img, HSV_GAINS, rng),
            AugmentOp::Mosaic => return None,
        })
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for AugmentOp {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| AugmentError::UnknownOp(s.to_string()))
    }
}
