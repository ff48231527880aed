//! Photometric augmentation driven by a single shared magnitude.
//!
//! One magnitude `m` bounds all four transforms. Per application, brightness, contrast and
//! saturation factors are drawn from `[1 - m, 1 + m]` and a hue shift from `[-180 m, 180 m]`
//! degrees; they are applied in that order with clamping to `[0, 1]` after each step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::synthbench::BBox;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("image dimensions must be positive"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::contract(format!(
                "expected {} channel values for {width}x{height}, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("channel value {v} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        Image {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image::new(width, height, data)
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Copy of the pixels inside `bbox` (which must lie within the image).
    pub fn crop(&self, bbox: &BBox) -> Image {
        let (x0, y0) = (bbox.x as usize, bbox.y as usize);
        let (w, h) = (bbox.w as usize, bbox.h as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image {
            width: w,
            height: h,
            data,
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AugMagnitude(f64);

impl AugMagnitude {
    pub const NONE: AugMagnitude = AugMagnitude(0.0);

    pub fn new(rho_aug: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&rho_aug) {
            Ok(AugMagnitude(rho_aug))
        } else {
            Err(Error::contract(format!("augmentation magnitude {rho_aug} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_identity(self) -> bool {
        self.0 == 0.0
    }
}

fn luminance(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Per-channel histogram of an 8-bit image over all 256 levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelCounts {
    pub counts: [[u32; 256]; 3],
    pub pixels: usize,
}

impl ChannelCounts {
    pub fn from_rgb8(bytes: &[u8]) -> Self {
        let mut counts = [[0u32; 256]; 3];
        for px in bytes.chunks_exact(3) {
            for c in 0..3 {
                counts[c][px[c] as usize] += 1;
            }
        }
        ChannelCounts {
            counts,
            pixels: bytes.len() / 3,
        }
    }
}

/// One draw of the four transform strengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_degrees: f64,
}

impl PhotometricDraw {
    pub const IDENTITY: PhotometricDraw = PhotometricDraw {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_degrees: 0.0,
    };

    /// Always consumes four uniforms so the stream position does not depend on the magnitude.
    pub fn sample<R: Rng + ?Sized>(mag: AugMagnitude, rng: &mut R) -> Self {
        let m = mag.value();
        let mut factor = |scale: f64| -> f64 {
            let u: f64 = rng.random();
            scale * m * (2.0 * u - 1.0)
        };
        let brightness = 1.0 + factor(1.0);
        let contrast = 1.0 + factor(1.0);
        let saturation = 1.0 + factor(1.0);
        let hue_degrees = factor(180.0);
        if m == 0.0 {
            return PhotometricDraw::IDENTITY;
        }
        PhotometricDraw {
            brightness,
            contrast,
            saturation,
            hue_degrees,
        }
    }

    /// Contrast pivot for `img`: mean luminance after the brightness step.
    pub fn contrast_pivot(&self, img: &Image) -> f64 {
        let n = (img.width * img.height) as f64;
        let b = self.brightness;
        img.pixels()
            .map(|p| luminance([clamp01(p[0] * b), clamp01(p[1] * b), clamp01(p[2] * b)]))
            .sum::<f64>()
            / n
    }

    /// Same quantity as [`contrast_pivot`](Self::contrast_pivot) for an 8-bit image, from its
    /// per-channel value counts.
    pub fn contrast_pivot_from_counts(&self, counts: &ChannelCounts) -> f64 {
        let b = self.brightness;
        let mut mean = [0.0; 3];
        for (c, m) in mean.iter_mut().enumerate() {
            *m = counts.counts[c]
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(k, &n)| f64::from(n) * clamp01(k as f64 / 255.0 * b))
                .sum::<f64>()
                / counts.pixels as f64;
        }
        luminance(mean)
    }

    pub fn apply(&self, img: &Image) -> Image {
        let pivot = if self.contrast != 1.0 {
            self.contrast_pivot(img)
        } else {
            0.0
        };
        self.apply_with_pivot(img, pivot)
    }

    /// Apply with an externally computed contrast pivot. Transforming a crop with the pivot of
    /// its parent image equals cropping the transformed parent.
    pub fn apply_with_pivot(&self, img: &Image, pivot: f64) -> Image {
        let mut out = img.clone();
        let hue = self.hue_degrees.rem_euclid(360.0);
        for px in out.data.chunks_exact_mut(3) {
            let mut p = [px[0], px[1], px[2]];
            if self.brightness != 1.0 {
                p = p.map(|v| clamp01(v * self.brightness));
            }
            if self.contrast != 1.0 {
                p = p.map(|v| clamp01(pivot + self.contrast * (v - pivot)));
            }
            if self.saturation != 1.0 && !(p[0] == p[1] && p[1] == p[2]) {
                let gray = luminance(p);
                p = p.map(|v| clamp01(gray + self.saturation * (v - gray)));
            }
            if hue != 0.0 {
                p = rotate_pixel_hue(p, hue);
            }
            px.copy_from_slice(&p);
        }
        out
    }
}

/// Draw transform strengths from `rng` and apply them to `img`.
pub fn apply_photometric<R: Rng + ?Sized>(img: &Image, mag: AugMagnitude, rng: &mut R) -> Image {
    PhotometricDraw::sample(mag, rng).apply(img)
}

pub fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        let x = (g - b) / delta;
        60.0 * if x < 0.0 { x + 6.0 } else { x }
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h = wrap_degrees(h) / 60.0;
    let sector = (h.floor() as usize) % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let rgb = match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(clamp01)
}

/// `h.rem_euclid(360.0)` without the division for the common in-range and one-turn cases.
fn wrap_degrees(h: f64) -> f64 {
    if (0.0..360.0).contains(&h) {
        h
    } else if (360.0..720.0).contains(&h) {
        h - 360.0
    } else {
        h.rem_euclid(360.0)
    }
}

fn rotate_pixel_hue(p: [f64; 3], degrees: f64) -> [f64; 3] {
    if p[0] == p[1] && p[1] == p[2] {
        return p;
    }
    let [h, s, v] = rgb_to_hsv(p);
    hsv_to_rgb([h + degrees, s, v])
}

/// Rotate every pixel's hue by `degrees` (mod 360), keeping saturation and value.
pub fn hue_rotate(img: &Image, degrees: f64) -> Image {
    let shift = degrees.rem_euclid(360.0);
    let mut out = img.clone();
    if shift == 0.0 {
        return out;
    }
    for px in out.data.chunks_exact_mut(3) {
        let p = rotate_pixel_hue([px[0], px[1], px[2]], shift);
        px.copy_from_slice(&p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut r = rng::stream(seed, "img", &[]);
        Image::new(w, h, (0..w * h * 3).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn pivot_from_counts_matches_direct_pivot() {
        let mut r = rng::stream(4, "px", &[]);
        let bytes: Vec<u8> = (0..16 * 12 * 3).map(|_| r.random()).collect();
        let img = Image::from_rgb8(16, 12, &bytes).unwrap();
        let counts = ChannelCounts::from_rgb8(&bytes);
        for seed in 0..20 {
            let d = PhotometricDraw::sample(AugMagnitude::new(0.8).unwrap(), &mut rng::stream(seed, "d", &[]));
            assert!((d.contrast_pivot(&img) - d.contrast_pivot_from_counts(&counts)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_magnitude_is_exact_identity() {
        let img = random_image(1, 9, 7);
        for seed in 0..20 {
            let mut r = rng::stream(seed, "aug", &[]);
            assert_eq!(apply_photometric(&img, AugMagnitude::NONE, &mut r), img);
        }
    }

    #[test]
    fn unit_factors_are_exact_identities() {
        let img = random_image(2, 8, 8);
        assert_eq!(PhotometricDraw::IDENTITY.apply(&img), img);
        let only_hue = PhotometricDraw {
            hue_degrees: 360.0,
            ..PhotometricDraw::IDENTITY
        };
        assert_eq!(only_hue.apply(&img), img);
    }

    #[test]
    fn grayscale_is_a_saturation_fixed_point() {
        let data: Vec<f64> = (0..16).flat_map(|i| [i as f64 / 15.0; 3]).collect();
        let img = Image::new(4, 4, data).unwrap();
        for s in [0.0, 0.3, 1.7, 2.0] {
            let d = PhotometricDraw {
                saturation: s,
                ..PhotometricDraw::IDENTITY
            };
            assert_eq!(d.apply(&img), img);
        }
    }

    #[test]
    fn hue_rotation_examples() {
        let img = random_image(3, 6, 5);
        assert_eq!(hue_rotate(&img, 0.0), img);
        let full = hue_rotate(&img, 360.0);
        assert_eq!(full, img);
        let red = Image::filled(1, 1, [1.0, 0.0, 0.0]).unwrap();
        let green = hue_rotate(&red, 120.0).pixel(0, 0);
        for (a, b) in green.iter().zip([0.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        let blue = hue_rotate(&red, -120.0).pixel(0, 0);
        for (a, b) in blue.iter().zip([0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hue_rotation_preserves_saturation_and_value() {
        let img = random_image(4, 10, 10);
        for deg in [17.0, 95.5, 180.0, 271.0, -33.0, 725.0] {
            let out = hue_rotate(&img, deg);
            for (a, b) in img.pixels().zip(out.pixels()) {
                let (ha, hb) = (rgb_to_hsv(a), rgb_to_hsv(b));
                assert!((ha[1] - hb[1]).abs() < 1e-6 && (ha[2] - hb[2]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        let img = random_image(5, 20, 20);
        for p in img.pixels() {
            let q = hsv_to_rgb(rgb_to_hsv(p));
            for (a, b) in p.iter().zip(q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn determinism_and_range() {
        for seed in 0..200u64 {
            let img = random_image(seed, 5, 4);
            let m = AugMagnitude::new((seed % 11) as f64 / 10.0).unwrap();
            let a = apply_photometric(&img, m, &mut rng::stream(seed, "aug", &[]));
            let b = apply_photometric(&img, m, &mut rng::stream(seed, "aug", &[]));
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crop_then_transform_matches_transform_then_crop() {
        let img = random_image(6, 16, 12);
        let d = PhotometricDraw {
            brightness: 1.3,
            contrast: 0.6,
            saturation: 1.4,
            hue_degrees: -70.0,
        };
        let bbox = BBox::new(3, 2, 7, 8);
        let whole = d.apply(&img).crop(&bbox);
        let part = d.apply_with_pivot(&img.crop(&bbox), d.contrast_pivot(&img));
        assert_eq!(whole, part);
    }

    #[test]
    fn magnitude_bounds_factor_ranges() {
        let m = AugMagnitude::new(0.3).unwrap();
        let mut r = rng::stream(9, "draws", &[]);
        for _ in 0..1000 {
            let d = PhotometricDraw::sample(m, &mut r);
            for f in [d.brightness, d.contrast, d.saturation] {
                assert!((0.7..=1.3).contains(&f));
            }
            assert!(d.hue_degrees.abs() <= 54.0);
        }
        assert!(AugMagnitude::new(1.01).is_err());
        assert!(AugMagnitude::new(-0.1).is_err());
    }
}
