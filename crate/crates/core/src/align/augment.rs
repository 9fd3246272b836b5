//! Seeded photometric and geometric augmentations for aligned crops.
//!
//! Each transform fires independently with its own probability. Sampling an
//! [`AugmentationPlan`] consumes the random stream; applying it is
//! deterministic, so the same `(input, config, seed)` always yields the same
//! output bytes. Inputs are `[0, 1]` crops, before normalization.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::warp::AlignedFace;
use crate::error::{Error, Result};
use crate::sampler::Interval;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub horizontal_flip: f64,
    pub grayscale: f64,
    pub gaussian_blur: f64,
    /// Blur standard deviation in pixels.
    pub blur_sigma: Interval,
    pub gaussian_noise: f64,
    /// Noise variance on the 0–255 scale.
    pub noise_variance: Interval,
    pub motion_blur: f64,
    /// Odd kernel lengths in pixels.
    pub motion_kernel: (usize, usize),
    pub jpeg_compression: f64,
    pub jpeg_quality: (u8, u8),
    pub down_up_scale: f64,
    pub down_up_factor: Interval,
    pub color_jitter: f64,
    /// Jitter magnitudes; each is drawn uniformly in its range with a random sign.
    pub brightness: Interval,
    pub contrast: Interval,
    pub hue: Interval,
    pub saturation: Interval,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: 0.5,
            grayscale: 0.1,
            gaussian_blur: 0.05,
            blur_sigma: Interval(0.5, 1.5),
            gaussian_noise: 0.035,
            noise_variance: Interval(10.0, 50.0),
            motion_blur: 0.05,
            motion_kernel: (3, 7),
            jpeg_compression: 0.05,
            jpeg_quality: (50, 95),
            down_up_scale: 0.01,
            down_up_factor: Interval(0.25, 0.75),
            color_jitter: 0.1,
            brightness: Interval(0.0, 0.15),
            contrast: Interval(0.0, 0.3),
            hue: Interval(0.0, 0.1),
            saturation: Interval(0.0, 0.1),
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            horizontal_flip: 0.0,
            grayscale: 0.0,
            gaussian_blur: 0.0,
            gaussian_noise: 0.0,
            motion_blur: 0.0,
            jpeg_compression: 0.0,
            down_up_scale: 0.0,
            color_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn probabilities(&self) -> [(&'static str, f64); 8] {
        [
            ("horizontal_flip", self.horizontal_flip),
            ("grayscale", self.grayscale),
            ("gaussian_blur", self.gaussian_blur),
            ("gaussian_noise", self.gaussian_noise),
            ("motion_blur", self.motion_blur),
            ("jpeg_compression", self.jpeg_compression),
            ("down_up_scale", self.down_up_scale),
            ("color_jitter", self.color_jitter),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in self.probabilities() {
            crate::sampler::check_probability(&format!("augmentation.{name}"), p)?;
        }
        for (name, r) in [
            ("blur_sigma", self.blur_sigma),
            ("noise_variance", self.noise_variance),
            ("down_up_factor", self.down_up_factor),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("hue", self.hue),
            ("saturation", self.saturation),
        ] {
            if !(r.lo() <= r.hi() && r.lo() >= 0.0 && r.hi().is_finite()) {
                return Err(Error::validation(format!(
                    "augmentation.{name}: invalid range [{}, {}]",
                    r.lo(),
                    r.hi()
                )));
            }
        }
        if self.blur_sigma.lo() <= 0.0 {
            return Err(Error::validation("augmentation.blur_sigma must be positive"));
        }
        if !(self.down_up_factor.lo() > 0.0 && self.down_up_factor.hi() <= 1.0) {
            return Err(Error::validation("augmentation.down_up_factor must lie in (0, 1]"));
        }
        let (k0, k1) = self.motion_kernel;
        if k0 < 3 || k0 > k1 || k0 % 2 == 0 || k1 % 2 == 0 {
            return Err(Error::validation("augmentation.motion_kernel must be odd, >= 3, lo <= hi"));
        }
        let (q0, q1) = self.jpeg_quality;
        if q0 == 0 || q0 > q1 || q1 > 100 {
            return Err(Error::validation("augmentation.jpeg_quality must satisfy 1 <= lo <= hi <= 100"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

/// The concrete transforms chosen for one image, in application order.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AugmentationPlan {
    pub horizontal_flip: bool,
    pub grayscale: bool,
    pub gaussian_blur: Option<f32>,
    /// `(std on the [0, 1] scale, noise seed)`.
    pub gaussian_noise: Option<(f32, u64)>,
    /// `(kernel length, angle in radians)`.
    pub motion_blur: Option<(usize, f32)>,
    pub jpeg_quality: Option<u8>,
    pub down_up_factor: Option<f32>,
    pub color_jitter: Option<ColorJitter>,
}

fn uniform(r: Interval, rng: &mut ChaCha8Rng) -> f64 {
    if r.lo() == r.hi() {
        r.lo()
    } else {
        rng.random_range(r.lo()..r.hi())
    }
}

fn signed(r: Interval, rng: &mut ChaCha8Rng) -> f32 {
    let m = uniform(r, rng);
    (if rng.random_bool(0.5) { m } else { -m }) as f32
}

impl AugmentationPlan {
    /// Draws every firing decision (in the fixed transform order) and the
    /// parameters of the transforms that fire.
    pub fn sample(cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut plan = Self {
            horizontal_flip: rng.random_bool(cfg.horizontal_flip),
            grayscale: rng.random_bool(cfg.grayscale),
            ..Self::default()
        };
        if rng.random_bool(cfg.gaussian_blur) {
            plan.gaussian_blur = Some(uniform(cfg.blur_sigma, rng) as f32);
        }
        if rng.random_bool(cfg.gaussian_noise) {
            let var = uniform(cfg.noise_variance, rng);
            plan.gaussian_noise = Some(((var.sqrt() / 255.0) as f32, rng.random()));
        }
        if rng.random_bool(cfg.motion_blur) {
            let (k0, k1) = cfg.motion_kernel;
            let k = k0 + 2 * rng.random_range(0..=(k1 - k0) / 2);
            plan.motion_blur = Some((k, rng.random_range(0.0..std::f32::consts::PI)));
        }
        if rng.random_bool(cfg.jpeg_compression) {
            plan.jpeg_quality = Some(rng.random_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1));
        }
        if rng.random_bool(cfg.down_up_scale) {
            plan.down_up_factor = Some(uniform(cfg.down_up_factor, rng) as f32);
        }
        if rng.random_bool(cfg.color_jitter) {
            plan.color_jitter = Some(ColorJitter {
                brightness: signed(cfg.brightness, rng),
                contrast: signed(cfg.contrast, rng),
                saturation: signed(cfg.saturation, rng),
                hue: signed(cfg.hue, rng),
            });
        }
        plan
    }

    pub fn fired(&self) -> [bool; 8] {
        [
            self.horizontal_flip,
            self.grayscale,
            self.gaussian_blur.is_some(),
            self.gaussian_noise.is_some(),
            self.motion_blur.is_some(),
            self.jpeg_quality.is_some(),
            self.down_up_factor.is_some(),
            self.color_jitter.is_some(),
        ]
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut out = img.clone();
        if self.horizontal_flip {
            out = out.flip_horizontal();
        }
        if self.grayscale {
            to_grayscale(&mut out);
        }
        if let Some(sigma) = self.gaussian_blur {
            out = gaussian_blur(&out, sigma);
        }
        if let Some((std, noise_seed)) = self.gaussian_noise {
            add_noise(&mut out, std, noise_seed);
        }
        if let Some((k, angle)) = self.motion_blur {
            out = motion_blur(&out, k, angle);
        }
        if let Some(q) = self.jpeg_quality {
            out = jpeg_roundtrip(&out, q)?;
        }
        if let Some(f) = self.down_up_factor {
            let w = ((out.width() as f32 * f).round() as usize).max(1);
            let h = ((out.height() as f32 * f).round() as usize).max(1);
            out = out.resize_bilinear(w, h).resize_bilinear(img.width(), img.height());
        }
        if let Some(j) = self.color_jitter {
            color_jitter(&mut out, j);
        }
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// Applies a freshly sampled plan to an unnormalized crop.
pub fn augment(face: &AlignedFace, cfg: &AugmentationConfig, seed: u64) -> Result<AlignedFace> {
    Ok(augment_traced(face, cfg, seed)?.0)
}

/// Like [`augment`], also returning the plan that was applied.
pub fn augment_traced(
    face: &AlignedFace,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<(AlignedFace, AugmentationPlan)> {
    if face.normalized {
        return Err(Error::validation("augmentations apply before normalization"));
    }
    let plan = AugmentationPlan::sample(cfg, &mut seed::rng(seed));
    let image = plan.apply(&face.image)?;
    Ok((
        AlignedFace {
            image,
            normalized: false,
            provenance: face.provenance.clone(),
        },
        plan,
    ))
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(p: [f32; 3]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

fn to_grayscale(img: &mut Image) {
    for px in img.data_mut().chunks_exact_mut(3) {
        let g = luma([px[0], px[1], px[2]]);
        px.fill(g);
    }
}

/// Convolves with a 1-D kernel along x then y, clamping at the borders.
fn separable(img: &Image, kernel: &[f32]) -> Image {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut tmp = Image::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (i, k) in kernel.iter().enumerate() {
                let sx = (x + i as isize - r).clamp(0, w - 1) as usize;
                let p = img.pixel(sx, y as usize);
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            tmp.put_pixel(x as usize, y as usize, acc);
        }
    }
    let mut out = Image::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (i, k) in kernel.iter().enumerate() {
                let sy = (y + i as isize - r).clamp(0, h - 1) as usize;
                let p = tmp.pixel(x as usize, sy);
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            out.put_pixel(x as usize, y as usize, acc);
        }
    }
    out
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    separable(img, &k)
}

fn add_noise(img: &mut Image, std: f32, noise_seed: u64) {
    let mut rng = seed::rng(noise_seed);
    let normal = Normal::new(0.0f32, std).expect("finite std");
    for v in img.data_mut() {
        *v += normal.sample(&mut rng);
    }
}

/// Averages along a line of `k` pixels through each pixel at `angle`.
fn motion_blur(img: &Image, k: usize, angle: f32) -> Image {
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = (k / 2) as f32;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let offsets: Vec<(isize, isize)> = (0..k)
        .map(|i| {
            let t = i as f32 - half;
            ((t * dx).round() as isize, (t * dy).round() as isize)
        })
        .collect();
    let mut out = Image::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (ox, oy) in &offsets {
                let p = img.pixel((x + ox).clamp(0, w - 1) as usize, (y + oy).clamp(0, h - 1) as usize);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            out.put_pixel(x as usize, y as usize, acc.map(|v| v / k as f32));
        }
    }
    out
}

fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    let err = |e: image::ImageError| Error::Image {
        path: "<jpeg augmentation>".into(),
        message: e.to_string(),
    };
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(err)?;
    let decoded = image::load(Cursor::new(buf), image::ImageFormat::Jpeg).map_err(err)?;
    Ok(Image::from_rgb8(&decoded.to_rgb8()))
}

fn rgb_to_hsv(p: [f32; 3]) -> [f32; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == p[1] {
        ((p[2] - p[0]) / d + 2.0) / 6.0
    } else {
        ((p[0] - p[1]) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn color_jitter(img: &mut Image, j: ColorJitter) {
    let bf = 1.0 + j.brightness;
    for v in img.data_mut() {
        *v = (*v * bf).clamp(0.0, 1.0);
    }
    let n = (img.width() * img.height()) as f32;
    let mean = img.data().chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>() / n;
    let cf = 1.0 + j.contrast;
    for v in img.data_mut() {
        *v = (mean + cf * (*v - mean)).clamp(0.0, 1.0);
    }
    let sf = 1.0 + j.saturation;
    for px in img.data_mut().chunks_exact_mut(3) {
        let g = luma([px[0], px[1], px[2]]);
        for v in px.iter_mut() {
            *v = (g + sf * (*v - g)).clamp(0.0, 1.0);
        }
    }
    if j.hue != 0.0 {
        for px in img.data_mut().chunks_exact_mut(3) {
            let mut hsv = rgb_to_hsv([px[0], px[1], px[2]]);
            hsv[0] += j.hue;
            px.copy_from_slice(&hsv_to_rgb(hsv));
        }
    }
}
