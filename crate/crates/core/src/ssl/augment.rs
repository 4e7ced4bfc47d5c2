//! Stochastic view augmentation for siamese training.
//!
//! Each training example is expanded into two independently augmented views;
//! the objective then pulls their embeddings together. The recipe is the
//! usual one for thumbnail-sized images: random resized crop, horizontal
//! flip, color jitter, random grayscale — every stage parameterized and
//! probabilistic so a policy of "do nothing" is expressible (and is tested to
//! reproduce inputs exactly).
//!
//! All randomness is drawn from a caller-provided generator in a fixed order,
//! so a view stream is fully determined by the generator's seed.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Multiplicative color-perturbation strengths, torchvision-style: a factor
/// for each property is drawn from `[max(0, 1-s), 1+s]` (hue from `[-s, s]`,
/// as a fraction of a full circle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Area fraction range for the random square crop.
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    pub jitter: ColorJitter,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentationPolicy {
    /// The standard siamese-pretraining recipe.
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            hflip_prob: 0.5,
            jitter: ColorJitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
            },
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentationPolicy {
    /// A policy under which `augment` is the identity map.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            hflip_prob: 0.0,
            jitter: ColorJitter {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
            },
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {p} is not a probability"
                )));
            }
        }
        Ok(())
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Bilinear sample of channel `ch` in the square source window
/// `[oy, oy+side) x [ox, ox+side)`, evaluated at destination pixel `(y, x)`
/// of an output with the full image side. Half-pixel-center convention.
fn sample_bilinear<F: Scalar>(
    img: &ArrayView3<F>,
    ch: usize,
    oy: usize,
    ox: usize,
    side: usize,
    out_side: usize,
    y: usize,
    x: usize,
) -> f64 {
    let scale = side as f64 / out_side as f64;
    let sy = ((y as f64 + 0.5) * scale - 0.5 + oy as f64).clamp(oy as f64, (oy + side - 1) as f64);
    let sx = ((x as f64 + 0.5) * scale - 0.5 + ox as f64).clamp(ox as f64, (ox + side - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(oy + side - 1);
    let x1 = (x0 + 1).min(ox + side - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let at = |yy: usize, xx: usize| img[[ch, yy, xx]].to_f64().unwrap_or(0.0);
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Augment one `(C, H, W)` image. Pixels are assumed normalized to `[0, 1]`
/// and the output is clamped back into that range after color operations.
pub fn augment<F: Scalar>(
    img: &ArrayView3<F>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<Array3<F>> {
    policy.validate()?;
    let (c, h, w) = img.dim();
    if h != w {
        return Err(Error::InvalidArgument(format!(
            "augmentation expects square images, got {h}x{w}"
        )));
    }

    // --- random square crop, resized back to the full side -----------------
    let (lo, hi) = policy.crop_scale;
    let s = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let side = ((h as f64 * s.sqrt()).round() as usize).clamp(1, h);
    let oy = if side < h { rng.random_range(0..=(h - side)) } else { 0 };
    let ox = if side < w { rng.random_range(0..=(w - side)) } else { 0 };

    let mut out: Array3<f64> = if side == h {
        img.mapv(|v| v.to_f64().unwrap_or(0.0))
    } else {
        Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            sample_bilinear(img, ch, oy, ox, side, h, y, x)
        })
    };

    // --- horizontal flip ----------------------------------------------------
    if policy.hflip_prob > 0.0 && rng.random_bool(policy.hflip_prob) {
        out = Array3::from_shape_fn((c, h, w), |(ch, y, x)| out[[ch, y, w - 1 - x]]);
    }

    // --- color jitter (needs RGB) -------------------------------------------
    if c == 3 && policy.jitter_prob > 0.0 && rng.random_bool(policy.jitter_prob) {
        let j = policy.jitter;
        let draw = |rng: &mut dyn rand::RngCore, s: f64| {
            if s == 0.0 {
                1.0
            } else {
                rng.random_range((1.0 - s).max(0.0)..(1.0 + s))
            }
        };
        let fb = draw(rng, j.brightness);
        let fc = draw(rng, j.contrast);
        let fs = draw(rng, j.saturation);
        let dh = if j.hue == 0.0 {
            0.0
        } else {
            rng.random_range(-j.hue..j.hue)
        };

        // Brightness: scale everything.
        out.mapv_inplace(|v| v * fb);
        // Contrast: blend toward the mean luma of the (brightened) image.
        let mean = {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                }
            }
            acc / (h * w) as f64
        };
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                // Contrast, then saturation (blend toward per-pixel gray).
                let (r, g, b) = (
                    (r - mean) * fc + mean,
                    (g - mean) * fc + mean,
                    (b - mean) * fc + mean,
                );
                let gray = luma(r, g, b);
                let (r, g, b) = (
                    gray + (r - gray) * fs,
                    gray + (g - gray) * fs,
                    gray + (b - gray) * fs,
                );
                // Hue rotation in HSV space on range-clamped values.
                let (r, g, b) = if dh != 0.0 {
                    let (hh, ss, vv) =
                        rgb_to_hsv(r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
                    hsv_to_rgb(hh + dh, ss, vv)
                } else {
                    (r, g, b)
                };
                out[[0, y, x]] = r;
                out[[1, y, x]] = g;
                out[[2, y, x]] = b;
            }
        }
    }

    // --- random grayscale -----------------------------------------------------
    if c == 3 && policy.grayscale_prob > 0.0 && rng.random_bool(policy.grayscale_prob) {
        for y in 0..h {
            for x in 0..w {
                let g = luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                out[[0, y, x]] = g;
                out[[1, y, x]] = g;
                out[[2, y, x]] = g;
            }
        }
    }

    Ok(out.mapv(|v| cast::<F>(v.clamp(0.0, 1.0))))
}

/// Augment every image in an `(N, C, H, W)` batch, in order.
pub fn augment_batch<F: Scalar>(
    images: &ArrayView4<F>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<Array4<F>> {
    let (n, c, h, w) = images.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for i in 0..n {
        let view = augment(&images.index_axis(ndarray::Axis(0), i), policy, rng)?;
        out.index_axis_mut(ndarray::Axis(0), i).assign(&view);
    }
    Ok(out)
}
