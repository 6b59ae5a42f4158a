//! Colour corruptions used to build shifted validation sets, input
//! normalisation, and the quantised-colour labels that supervise the bias head.

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// BT.601 luma with round-half-up, in exact integer arithmetic.
fn luma(p: [u8; 3]) -> u8 {
    ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8
}

pub fn to_greyscale(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let y = luma(p.0);
        p.0 = [y, y, y];
    }
    out
}

pub fn invert(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        p.0 = p.0.map(|v| 255 - v);
    }
    out
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn sample<R: Rng>(&self, identity: f64, rng: &mut R) -> f64 {
        if self.lo == identity && self.hi == identity {
            identity
        } else if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterParams {
    pub brightness: Interval,
    pub contrast: Interval,
    pub saturation: Interval,
    /// Degrees.
    pub hue_shift: Interval,
}

impl Default for JitterParams {
    fn default() -> Self {
        JitterParams {
            brightness: Interval::new(0.6, 1.4),
            contrast: Interval::new(0.6, 1.4),
            saturation: Interval::new(0.6, 1.4),
            hue_shift: Interval::new(-18.0, 18.0),
        }
    }
}

impl JitterParams {
    pub fn identity() -> Self {
        JitterParams {
            brightness: Interval::point(1.0),
            contrast: Interval::point(1.0),
            saturation: Interval::point(1.0),
            hue_shift: Interval::point(0.0),
        }
    }

    /// Every interval must be finite, ordered and contain its identity value.
    pub fn validate(&self) -> Result<()> {
        let factors = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ];
        for (name, iv) in factors {
            if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi || iv.lo < 0.0 || !iv.contains(1.0) {
                return Err(Error::Config(format!(
                    "jitter {name} range [{}, {}] must be a non-negative interval containing 1",
                    iv.lo, iv.hi
                )));
            }
        }
        let h = self.hue_shift;
        if !(h.lo.is_finite() && h.hi.is_finite()) || h.lo > h.hi || !h.contains(0.0) || h.lo < -180.0 || h.hi > 180.0 {
            return Err(Error::Config(format!(
                "jitter hue_shift range [{}, {}] must lie in [-180, 180] and contain 0",
                h.lo, h.hi
            )));
        }
        Ok(())
    }

    /// Draws one factor per sub-transform, in application order.
    pub fn sample(&self, seed: u64) -> JitterFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        JitterFactors {
            brightness: self.brightness.sample(1.0, &mut rng),
            contrast: self.contrast.sample(1.0, &mut rng),
            saturation: self.saturation.sample(1.0, &mut rng),
            hue_shift: self.hue_shift.sample(0.0, &mut rng),
        }
    }
}

/// Concrete jitter factors for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

pub fn colour_jitter(image: &RgbImage, params: &JitterParams, seed: u64) -> Result<RgbImage> {
    params.validate()?;
    Ok(apply_jitter(image, params.sample(seed)))
}

/// Brightness, contrast, saturation, then hue; clamped after every step.
/// Identity factors are skipped, so identity jitter is exact.
pub fn apply_jitter(image: &RgbImage, f: JitterFactors) -> RgbImage {
    let mut px: Vec<[f64; 3]> = image.pixels().map(|p| p.0.map(f64::from)).collect();
    let clamp = |v: f64| v.clamp(0.0, 255.0);
    if f.brightness != 1.0 {
        for p in px.iter_mut() {
            *p = p.map(|v| clamp(v * f.brightness));
        }
    }
    if f.contrast != 1.0 && !px.is_empty() {
        let mean = px.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).sum::<f64>() / px.len() as f64;
        for p in px.iter_mut() {
            *p = p.map(|v| clamp((v - mean) * f.contrast + mean));
        }
    }
    if f.saturation != 1.0 {
        for p in px.iter_mut() {
            let grey = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            *p = p.map(|v| clamp((v - grey) * f.saturation + grey));
        }
    }
    if f.hue_shift != 0.0 {
        for p in px.iter_mut() {
            let (h, s, v) = rgb_to_hsv(*p);
            *p = hsv_to_rgb((h + f.hue_shift).rem_euclid(360.0), s, v).map(clamp);
        }
    }
    let mut out = image.clone();
    for (dst, src) in out.pixels_mut().zip(&px) {
        dst.0 = src.map(|v| v.round() as u8);
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
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

/// Uniform per-channel RGB quantisation into `bins_per_channel^3` colour classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasLabelSpec {
    bins_per_channel: usize,
}

impl BiasLabelSpec {
    pub fn new(bins_per_channel: usize) -> Result<Self> {
        // Labels are stored as u8 in masks, so B^3 must fit.
        if !(2..=6).contains(&bins_per_channel) {
            return Err(Error::Config(format!(
                "bias bins per channel must be in 2..=6, got {bins_per_channel}"
            )));
        }
        Ok(BiasLabelSpec { bins_per_channel })
    }

    pub fn bins_per_channel(&self) -> usize {
        self.bins_per_channel
    }

    pub fn num_bias_classes(&self) -> usize {
        self.bins_per_channel.pow(3)
    }

    pub fn label(&self, p: [u8; 3]) -> u8 {
        let b = self.bins_per_channel;
        let bin = |v: u8| ((v as usize * b) / 256).min(b - 1);
        (bin(p[0]) * b * b + bin(p[1]) * b + bin(p[2])) as u8
    }
}

/// Per-pixel colour class of the raw image.
pub fn extract_bias_labels(image: &RgbImage, spec: BiasLabelSpec) -> GrayImage {
    let (w, h) = image.dimensions();
    let mut out = GrayImage::new(w, h);
    for (dst, src) in out.pixels_mut().zip(image.pixels()) {
        dst.0 = [spec.label(src.0)];
    }
    out
}

/// Per-channel mean/std applied to `v / 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "normalisation std must be > 0 and finite, got {:?}",
                self.std
            )));
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, image: &RgbImage) -> Result<Tensor<T>> {
        normalize(image, self.mean, self.std)
    }

    /// Inverse map back to `v / 255`.
    pub fn denormalize(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

/// `(v / 255 - mean_c) / std_c`, as a `(1, 3, H, W)` tensor.
pub fn normalize<T: Scalar>(image: &RgbImage, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<T>> {
    Normalization { mean, std }.validate()?;
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::from_f64((p.0[c] as f64 / 255.0 - mean[c]) / std[c]);
        }
    }
    Tensor::from_vec([1, 3, h as usize, w as usize], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn px(p: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(1, 1, Rgb(p))
    }

    #[test]
    fn greyscale_examples() {
        assert_eq!(to_greyscale(&px([255, 255, 255])).get_pixel(0, 0).0, [255; 3]);
        // 0.299 * 255 = 76.245
        assert_eq!(to_greyscale(&px([255, 0, 0])).get_pixel(0, 0).0, [76; 3]);
        assert_eq!(to_greyscale(&px([0, 0, 0])).get_pixel(0, 0).0, [0; 3]);
    }

    #[test]
    fn invert_examples() {
        assert_eq!(invert(&px([0, 128, 255])).get_pixel(0, 0).0, [255, 127, 0]);
        assert_eq!(invert(&px([128, 128, 128])).get_pixel(0, 0).0, [127, 127, 127]);
    }

    #[test]
    fn brightness_doubling_clamps() {
        let f = JitterFactors {
            brightness: 2.0,
            contrast: 1.0,
            saturation: 1.0,
            hue_shift: 0.0,
        };
        assert_eq!(apply_jitter(&px([100, 50, 200]), f).get_pixel(0, 0).0, [200, 100, 255]);
    }

    #[test]
    fn jitter_params_must_contain_identity() {
        assert!(JitterParams::default().validate().is_ok());
        let mut p = JitterParams::identity();
        p.brightness = Interval::point(2.0);
        assert!(p.validate().is_err());
        let mut p = JitterParams::identity();
        p.hue_shift = Interval::new(5.0, 10.0);
        assert!(p.validate().is_err());
        let mut p = JitterParams::identity();
        p.contrast = Interval::new(1.2, 0.8);
        assert!(p.validate().is_err());
    }

    #[test]
    fn hue_rotation_by_120_degrees_cycles_primaries() {
        let f = JitterFactors {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue_shift: 120.0,
        };
        assert_eq!(apply_jitter(&px([255, 0, 0]), f).get_pixel(0, 0).0, [0, 255, 0]);
        assert_eq!(apply_jitter(&px([0, 0, 255]), f).get_pixel(0, 0).0, [255, 0, 0]);
    }

    #[test]
    fn bias_label_examples() {
        let spec = BiasLabelSpec::new(4).unwrap();
        assert_eq!(spec.num_bias_classes(), 64);
        assert_eq!(spec.label([0, 0, 0]), 0);
        assert_eq!(spec.label([255, 0, 0]), 48);
        assert_eq!(spec.label([128, 128, 128]), 42);
        assert_eq!(spec.label([255, 255, 255]), 63);
        assert!(BiasLabelSpec::new(1).is_err());
        assert!(BiasLabelSpec::new(7).is_err());
    }

    #[test]
    fn normalize_examples() {
        let t: Tensor<f64> = normalize(&px([255, 255, 255]), [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
        let t: Tensor<f64> = normalize(&px([0, 0, 0]), [0.5; 3], [0.5; 3]).unwrap();
        assert_eq!(t.data(), &[-1.0, -1.0, -1.0]);
        assert!(normalize::<f32>(&px([1, 2, 3]), [0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn normalize_centres_half_intensity() {
        // (0.5 - 0.5) / 0.5
        let n = Normalization { mean: [0.5; 3], std: [0.5; 3] };
        assert_eq!((0.5 - n.mean[0]) / n.std[0], 0.0);
        let t: Tensor<f64> = n.apply(&px([10, 128, 250])).unwrap();
        for c in 0..3 {
            let back = n.denormalize(t.data()[c], c);
            assert!((back - [10.0, 128.0, 250.0][c] / 255.0).abs() < 1e-6);
        }
    }
}
