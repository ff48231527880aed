//! Desk-scale few-shot detection benchmark: small RGB scenes of coloured shapes.
//!
//! A class is a `(shape, hue band)` pair: class `id` has shape `id % 5` and band `id / 5`.
//! The last `n_novel` class ids are novel. The `pretrain` pool only contains base-class
//! objects; `support` and `query` draw from every class.
//!
//! On disk:
//!
//! ```text
//! images/NNNN.ppm    binary P6, 8-bit
//! annotations.csv    image_id,x,y,w,h,class_id
//! classes.csv        class_id,name
//! splits.csv         image_id,pool        (pool in pretrain|support|query)
//! scene.txt          generator settings, key = value
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{hsv_to_rgb, Image};
use crate::error::{Error, Result};
use crate::losses::ClassKind;
use crate::rng;

/// Pixel box, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl BBox {
    pub const fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> i64 {
        i64::from(self.w.max(0)) * i64::from(self.h.max(0))
    }

    pub fn intersection(&self, other: &BBox) -> i64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0 || iy <= 0 {
            0
        } else {
            i64::from(ix) * i64::from(iy)
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0 {
            return 0.0;
        }
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.w > 0
            && self.h > 0
            && self.x >= 0
            && self.y >= 0
            && (self.x + self.w) as usize <= width
            && (self.y + self.h) as usize <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoxAnnotation {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
    pub class_id: usize,
}

impl BoxAnnotation {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Bar => "bar",
        }
    }

    /// Whether the unit-box coordinate `(u, v)` (cell centres in `[0, 1]`) lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Square | Shape::Bar => true,
            Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
            Shape::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub kind: ClassKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pool {
    Pretrain,
    Support,
    Query,
}

impl Pool {
    pub fn name(self) -> &'static str {
        match self {
            Pool::Pretrain => "pretrain",
            Pool::Support => "support",
            Pool::Query => "query",
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pretrain" => Ok(Pool::Pretrain),
            "support" => Ok(Pool::Support),
            "query" => Ok(Pool::Query),
            other => Err(Error::contract(format!("unknown pool `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub n_classes: usize,
    pub n_novel: usize,
    pub max_objects: usize,
    pub n_pretrain: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub noise_std: f64,
    /// Per-image illumination gain is drawn from `[1 - lighting_jitter, 1 + lighting_jitter]`.
    pub lighting_jitter: f64,
    /// Half-width of each class hue band, degrees.
    pub hue_band_halfwidth: f64,
    pub min_object_size: usize,
    pub max_object_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            n_classes: 10,
            n_novel: 3,
            max_objects: 3,
            n_pretrain: 2000,
            n_support: 300,
            n_query: 300,
            noise_std: 0.03,
            lighting_jitter: 0.25,
            hue_band_halfwidth: 15.0,
            min_object_size: 12,
            max_object_size: 22,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.n_classes < 4 {
            return fail(format!("n_classes must be >= 4, got {}", self.n_classes));
        }
        if self.image_size < 32 {
            return fail(format!("image_size must be >= 32, got {}", self.image_size));
        }
        if self.n_novel >= self.n_classes {
            return fail("at least one base class is required".into());
        }
        if self.max_objects == 0 {
            return fail("max_objects must be positive".into());
        }
        if self.min_object_size < 6 || self.min_object_size > self.max_object_size {
            return fail("object size range is invalid".into());
        }
        if self.max_object_size * 3 / 2 + 2 > self.image_size {
            return fail("objects do not fit in the image".into());
        }
        if !(0.0..1.0).contains(&self.lighting_jitter) || self.noise_std < 0.0 {
            return fail("lighting_jitter must be in [0, 1) and noise_std non-negative".into());
        }
        Ok(())
    }

    pub fn n_bands(&self) -> usize {
        self.n_classes.div_ceil(Shape::ALL.len())
    }

    pub fn shape_of(&self, class_id: usize) -> Shape {
        Shape::ALL[class_id % Shape::ALL.len()]
    }

    pub fn band_of(&self, class_id: usize) -> usize {
        class_id / Shape::ALL.len()
    }

    pub fn band_center(&self, band: usize) -> f64 {
        20.0 + band as f64 * 360.0 / self.n_bands() as f64
    }

    pub fn class_kind(&self, class_id: usize) -> ClassKind {
        if class_id >= self.n_classes - self.n_novel {
            ClassKind::Novel
        } else {
            ClassKind::Base
        }
    }

    pub fn classes(&self) -> Vec<ClassInfo> {
        (0..self.n_classes)
            .map(|id| ClassInfo {
                id,
                name: format!("{}-hue{}", self.shape_of(id).name(), self.band_center(self.band_of(id)) as i64),
                kind: self.class_kind(id),
            })
            .collect()
    }

    fn to_kv(&self) -> String {
        format!(
            "image_size = {}\nn_classes = {}\nn_novel = {}\nmax_objects = {}\nn_pretrain = {}\nn_support = {}\nn_query = {}\nnoise_std = {}\nlighting_jitter = {}\nhue_band_halfwidth = {}\nmin_object_size = {}\nmax_object_size = {}\n",
            self.image_size,
            self.n_classes,
            self.n_novel,
            self.max_objects,
            self.n_pretrain,
            self.n_support,
            self.n_query,
            self.noise_std,
            self.lighting_jitter,
            self.hue_band_halfwidth,
            self.min_object_size,
            self.max_object_size
        )
    }

    fn from_kv(path: &Path, text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |_| Error::parse(path, format!("line {}: bad value for {k}", lineno + 1));
            match k {
                "image_size" => spec.image_size = v.parse().map_err(bad)?,
                "n_classes" => spec.n_classes = v.parse().map_err(bad)?,
                "n_novel" => spec.n_novel = v.parse().map_err(bad)?,
                "max_objects" => spec.max_objects = v.parse().map_err(bad)?,
                "n_pretrain" => spec.n_pretrain = v.parse().map_err(bad)?,
                "n_support" => spec.n_support = v.parse().map_err(bad)?,
                "n_query" => spec.n_query = v.parse().map_err(bad)?,
                "noise_std" => spec.noise_std = v.parse().map_err(|_| Error::parse(path, "bad noise_std"))?,
                "lighting_jitter" => spec.lighting_jitter = v.parse().map_err(|_| Error::parse(path, "bad lighting_jitter"))?,
                "hue_band_halfwidth" => spec.hue_band_halfwidth = v.parse().map_err(|_| Error::parse(path, "bad hue_band_halfwidth"))?,
                "min_object_size" => spec.min_object_size = v.parse().map_err(bad)?,
                "max_object_size" => spec.max_object_size = v.parse().map_err(bad)?,
                other => return Err(Error::parse(path, format!("unknown key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// 8-bit RGB raster as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage8 {
    pub fn to_image(&self) -> Image {
        Image::from_rgb8(self.width, self.height, &self.data).expect("8-bit raster is always in range")
    }

    /// Float crop without converting the whole raster.
    pub fn crop_image(&self, bbox: &BBox) -> Image {
        let (x0, y0, w, h) = (bbox.x as usize, bbox.y as usize, bbox.w as usize, bbox.h as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend(self.data[start..start + w * 3].iter().map(|&b| f64::from(b) / 255.0));
        }
        Image::from_parts_unchecked(w, h, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: SceneSpec,
    pub classes: Vec<ClassInfo>,
    pub images: Vec<RgbImage8>,
    pub annotations: Vec<Vec<BoxAnnotation>>,
    pub pools: Vec<Pool>,
}

impl Benchmark {
    pub fn image_ids(&self, pool: Pool) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.pools[i] == pool).collect()
    }

    pub fn base_classes(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.kind == ClassKind::Base).map(|c| c.id).collect()
    }

    pub fn novel_classes(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.kind == ClassKind::Novel).map(|c| c.id).collect()
    }

    pub fn class_counts(&self, image_ids: &[usize]) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &i in image_ids {
            for a in &self.annotations[i] {
                *counts.entry(a.class_id).or_insert(0) += 1;
            }
        }
        counts
    }
}

fn render_object<R: Rng + ?Sized>(
    spec: &SceneSpec,
    class_id: usize,
    canvas: &mut [f64],
    placed: &[BBox],
    rng: &mut R,
) -> Option<BoxAnnotation> {
    let size = spec.image_size as i32;
    let shape = spec.shape_of(class_id);
    let s = rng.random_range(spec.min_object_size..=spec.max_object_size) as i32;
    let (w, h) = match shape {
        Shape::Bar => {
            let long = (f64::from(s) * 1.4).round() as i32;
            let short = (long / 3).max(3);
            if rng.random_bool(0.5) {
                (long, short)
            } else {
                (short, long)
            }
        }
        Shape::Square => {
            let side = (f64::from(s) * 0.85).round() as i32;
            (side, side)
        }
        _ => (s, s),
    };
    let hue = spec.band_center(spec.band_of(class_id))
        + rng.random_range(-spec.hue_band_halfwidth..=spec.hue_band_halfwidth);
    let sat = rng.random_range(0.55..1.0);
    let val = rng.random_range(0.55..1.0);
    let color = hsv_to_rgb([hue, sat, val]);

    for _ in 0..40 {
        let x = rng.random_range(0..=size - w);
        let y = rng.random_range(0..=size - h);
        let bbox = BBox::new(x, y, w, h);
        if placed.iter().any(|p| p.intersection(&bbox) > 0) {
            continue;
        }
        for py in 0..h {
            for px in 0..w {
                let u = (f64::from(px) + 0.5) / f64::from(w);
                let v = (f64::from(py) + 0.5) / f64::from(h);
                if shape.contains(u, v) {
                    let i = (((y + py) * size + x + px) * 3) as usize;
                    canvas[i..i + 3].copy_from_slice(&color);
                }
            }
        }
        return Some(BoxAnnotation {
            x,
            y,
            w,
            h,
            class_id,
        });
    }
    None
}

fn render_scene<R: Rng + ?Sized>(
    spec: &SceneSpec,
    allowed: &[usize],
    rng: &mut R,
) -> (RgbImage8, Vec<BoxAnnotation>) {
    let n = spec.image_size;
    let bg = hsv_to_rgb([
        rng.random_range(0.0..360.0),
        rng.random_range(0.0..0.15),
        rng.random_range(0.25..0.75),
    ]);
    let mut canvas: Vec<f64> = (0..n * n).flat_map(|_| bg).collect();

    let want = rng.random_range(1..=spec.max_objects);
    let mut annotations: Vec<BoxAnnotation> = Vec::with_capacity(want);
    while annotations.len() < want {
        let class_id = allowed[rng.random_range(0..allowed.len())];
        let placed: Vec<BBox> = annotations.iter().map(BoxAnnotation::bbox).collect();
        match render_object(spec, class_id, &mut canvas, &placed, rng) {
            Some(a) => annotations.push(a),
            None => break,
        }
    }

    let gain = 1.0 + rng.random_range(-spec.lighting_jitter..=spec.lighting_jitter);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid noise std");
    let data = canvas
        .iter()
        .map(|&v| {
            let eps = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            ((v * gain + eps).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    (
        RgbImage8 {
            width: n,
            height: n,
            data,
        },
        annotations,
    )
}

/// Generate a benchmark; the output is a pure function of `(spec, seed)`.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let classes = spec.classes();
    let base: Vec<usize> = classes.iter().filter(|c| c.kind == ClassKind::Base).map(|c| c.id).collect();
    let all: Vec<usize> = classes.iter().map(|c| c.id).collect();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut pools = Vec::new();
    for (pool, count, allowed) in [
        (Pool::Pretrain, spec.n_pretrain, &base),
        (Pool::Support, spec.n_support, &all),
        (Pool::Query, spec.n_query, &all),
    ] {
        let mut r = rng::stream(seed, "synthbench", &[pool as u64]);
        for _ in 0..count {
            let (img, ann) = render_scene(spec, allowed, &mut r);
            images.push(img);
            annotations.push(ann);
            pools.push(pool);
        }
    }
    Ok(Benchmark {
        spec: spec.clone(),
        classes,
        images,
        annotations,
        pools,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    /// Maximum relative shift/scale jitter of positive proposals.
    pub jitter: f64,
    pub n_negatives: usize,
    /// Negatives overlap every ground-truth box by less than this IoU.
    pub max_negative_iou: f64,
    pub min_negative_size: i32,
    pub max_negative_size: i32,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            jitter: 0.2,
            n_negatives: 6,
            max_negative_iou: 0.3,
            min_negative_size: 8,
            max_negative_size: 26,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Ground-truth class for positives, `None` for background.
    pub class_id: Option<usize>,
}

fn jittered<R: Rng + ?Sized>(gt: &BBox, jitter: f64, width: usize, height: usize, rng: &mut R) -> Option<BBox> {
    let mut u = || rng.random_range(-jitter..=jitter);
    let (gw, gh) = (f64::from(gt.w), f64::from(gt.h));
    let w = (gw * (1.0 + u())).round().max(1.0);
    let h = (gh * (1.0 + u())).round().max(1.0);
    let cx = f64::from(gt.x) + gw / 2.0 + u() * gw;
    let cy = f64::from(gt.y) + gh / 2.0 + u() * gh;
    let x = (cx - w / 2.0).round().clamp(0.0, width as f64 - w);
    let y = (cy - h / 2.0).round().clamp(0.0, height as f64 - h);
    let b = BBox::new(x as i32, y as i32, w as i32, h as i32);
    (b.within(width, height) && b.iou(gt) >= 0.5).then_some(b)
}

/// Jittered ground-truth boxes (IoU >= 0.5 with their source) followed by background boxes.
pub fn propose_regions<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    annotations: &[BoxAnnotation],
    cfg: &ProposalConfig,
    rng: &mut R,
) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(annotations.len() + cfg.n_negatives);
    for a in annotations {
        let gt = a.bbox();
        let mut bbox = gt;
        if cfg.jitter > 0.0 {
            for _ in 0..100 {
                if let Some(b) = jittered(&gt, cfg.jitter, width, height, rng) {
                    bbox = b;
                    break;
                }
            }
        }
        out.push(Proposal {
            bbox,
            class_id: Some(a.class_id),
        });
    }
    let max_side = cfg.max_negative_size.min(width as i32).min(height as i32);
    for _ in 0..cfg.n_negatives {
        for _ in 0..100 {
            let w = rng.random_range(cfg.min_negative_size..=max_side);
            let h = rng.random_range(cfg.min_negative_size..=max_side);
            let x = rng.random_range(0..=width as i32 - w);
            let y = rng.random_range(0..=height as i32 - h);
            let b = BBox::new(x, y, w, h);
            if annotations.iter().all(|a| a.bbox().iou(&b) < cfg.max_negative_iou) {
                out.push(Proposal {
                    bbox: b,
                    class_id: None,
                });
                break;
            }
        }
    }
    out
}

pub const HIST_BINS: usize = 8;
pub const FEATURE_DIM: usize = 3 * HIST_BINS + 7 + 2;

/// Backgrounds are drawn with low saturation and objects with high saturation, so chroma
/// (max - min channel) separates them.
pub const MASK_CHROMA: f64 = 0.16;

fn chroma(p: [f64; 3]) -> f64 {
    p[0].max(p[1]).max(p[2]) - p[0].min(p[1]).min(p[2])
}

/// Descriptor of the region `bbox` of `image`; see [`crop_features`].
pub fn extract_features(image: &Image, bbox: &BBox) -> Vec<f64> {
    crop_features(&image.crop(bbox), bbox, image.width(), image.height())
}

/// 33-dimensional region descriptor:
/// - 3 x 8-bin per-channel histograms (each channel's bins sum to 1),
/// - scale-normalized central moments `eta20, eta02, eta11, eta30, eta03, eta22, eta40 + eta04`
///   of the foreground mask (pixels with chroma above [`MASK_CHROMA`]), zero when the mask is
///   too small to be an object,
/// - box width and height relative to the image.
pub fn crop_features(crop: &Image, bbox: &BBox, image_width: usize, image_height: usize) -> Vec<f64> {
    let (w, h) = (crop.width(), crop.height());
    let n = (w * h) as f64;
    let mut f = vec![0.0; FEATURE_DIM];

    let bin = |v: f64| ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
    for p in crop.pixels() {
        for (c, &v) in p.iter().enumerate() {
            f[c * HIST_BINS + bin(v)] += 1.0;
        }
    }
    for v in &mut f[..3 * HIST_BINS] {
        *v /= n;
    }

    let fg: Vec<(f64, f64)> = crop
        .pixels()
        .enumerate()
        .filter(|(_, p)| chroma(*p) > MASK_CHROMA)
        .map(|(i, _)| ((i % w) as f64, (i / w) as f64))
        .collect();
    let m00 = fg.len() as f64;
    // Below this mass the mask is noise and scale normalization would blow it up.
    let min_mass = (0.05 * n).max(6.0);
    let moments = &mut f[3 * HIST_BINS..3 * HIST_BINS + 7];
    if m00 >= min_mass {
        let cx = fg.iter().map(|c| c.0).sum::<f64>() / m00;
        let cy = fg.iter().map(|c| c.1).sum::<f64>() / m00;
        let mut mu = [[0.0; 5]; 5];
        for &(x, y) in &fg {
            let (dx, dy) = (x - cx, y - cy);
            let (dx2, dy2) = (dx * dx, dy * dy);
            mu[2][0] += dx2;
            mu[1][1] += dx * dy;
            mu[0][2] += dy2;
            mu[3][0] += dx2 * dx;
            mu[0][3] += dy2 * dy;
            mu[2][2] += dx2 * dy2;
            mu[4][0] += dx2 * dx2;
            mu[0][4] += dy2 * dy2;
        }
        let eta = |p: usize, q: usize| mu[p][q] / m00.powf(1.0 + (p + q) as f64 / 2.0);
        // Scaled so each entry is O(1) for the rendered shapes.
        let raw = [
            4.0 * eta(2, 0),
            4.0 * eta(0, 2),
            10.0 * eta(1, 1),
            50.0 * eta(3, 0),
            50.0 * eta(0, 3),
            100.0 * eta(2, 2),
            10.0 * (eta(4, 0) + eta(0, 4)),
        ];
        for (m, v) in moments.iter_mut().zip(raw) {
            *m = v.clamp(-2.0, 2.0);
        }
    }

    f[FEATURE_DIM - 2] = f64::from(bbox.w) / image_width as f64;
    f[FEATURE_DIM - 1] = f64::from(bbox.h) / image_height as f64;
    f
}

fn write_ppm(path: &Path, img: &RgbImage8) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    w.flush()?;
    Ok(())
}

fn read_ppm(path: &Path) -> Result<RgbImage8> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::parse(path, "not a binary P6 pixmap"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::parse(path, format!("bad {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::parse(path, "only 8-bit pixmaps are supported"));
    }
    let start = pos + 1;
    let len = width * height * 3;
    if bytes.len() < start + len {
        return Err(Error::parse(path, "truncated pixel data"));
    }
    Ok(RgbImage8 {
        width,
        height,
        data: bytes[start..start + len].to_vec(),
    })
}

pub fn image_file_name(image_id: usize) -> String {
    format!("{image_id:04}.ppm")
}

pub fn write_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    for (i, img) in bench.images.iter().enumerate() {
        write_ppm(&img_dir.join(image_file_name(i)), img)?;
    }

    let mut ann = BufWriter::new(fs::File::create(dir.join("annotations.csv"))?);
    writeln!(ann, "image_id,x,y,w,h,class_id")?;
    for (i, boxes) in bench.annotations.iter().enumerate() {
        for a in boxes {
            writeln!(ann, "{},{},{},{},{},{}", i, a.x, a.y, a.w, a.h, a.class_id)?;
        }
    }
    ann.flush()?;

    let mut cls = BufWriter::new(fs::File::create(dir.join("classes.csv"))?);
    writeln!(cls, "class_id,name")?;
    for c in &bench.classes {
        writeln!(cls, "{},{}", c.id, c.name)?;
    }
    cls.flush()?;

    let mut splits = BufWriter::new(fs::File::create(dir.join("splits.csv"))?);
    writeln!(splits, "image_id,pool")?;
    for (i, p) in bench.pools.iter().enumerate() {
        writeln!(splits, "{i},{p}")?;
    }
    splits.flush()?;

    fs::write(dir.join("scene.txt"), bench.spec.to_kv())?;
    Ok(())
}

fn csv_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        _ => return Err(Error::parse(path, format!("expected header `{header}`"))),
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cells: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
            if cells.len() == width {
                Ok(cells)
            } else {
                Err(Error::parse(path, format!("line {}: expected {width} fields", i + 2)))
            }
        })
        .collect()
}

fn parse_cell<T: FromStr>(path: &Path, cell: &str) -> Result<T> {
    cell.parse()
        .map_err(|_| Error::parse(path, format!("cannot parse `{cell}`")))
}

pub fn read_benchmark(dir: &Path) -> Result<Benchmark> {
    let scene_path = dir.join("scene.txt");
    let spec = SceneSpec::from_kv(&scene_path, &fs::read_to_string(&scene_path)?)?;

    let classes_path = dir.join("classes.csv");
    let mut classes = Vec::new();
    for row in csv_rows(&classes_path, "class_id,name")? {
        let id: usize = parse_cell(&classes_path, &row[0])?;
        classes.push(ClassInfo {
            id,
            name: row[1].clone(),
            kind: spec.class_kind(id),
        });
    }
    if classes.len() != spec.n_classes || classes.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::parse(&classes_path, "class ids must be 0..n_classes in order"));
    }

    let splits_path = dir.join("splits.csv");
    let mut pools = Vec::new();
    for (i, row) in csv_rows(&splits_path, "image_id,pool")?.into_iter().enumerate() {
        if parse_cell::<usize>(&splits_path, &row[0])? != i {
            return Err(Error::parse(&splits_path, "image ids must be consecutive from 0"));
        }
        pools.push(parse_cell::<Pool>(&splits_path, &row[1])?);
    }

    let images = (0..pools.len())
        .map(|i| read_ppm(&dir.join("images").join(image_file_name(i))))
        .collect::<Result<Vec<_>>>()?;

    let ann_path = dir.join("annotations.csv");
    let mut annotations = vec![Vec::new(); pools.len()];
    for row in csv_rows(&ann_path, "image_id,x,y,w,h,class_id")? {
        let id: usize = parse_cell(&ann_path, &row[0])?;
        let a = BoxAnnotation {
            x: parse_cell(&ann_path, &row[1])?,
            y: parse_cell(&ann_path, &row[2])?,
            w: parse_cell(&ann_path, &row[3])?,
            h: parse_cell(&ann_path, &row[4])?,
            class_id: parse_cell(&ann_path, &row[5])?,
        };
        if id >= pools.len() || a.class_id >= spec.n_classes || !a.bbox().within(spec.image_size, spec.image_size) {
            return Err(Error::parse(&ann_path, format!("invalid annotation for image {id}")));
        }
        annotations[id].push(a);
    }

    Ok(Benchmark {
        spec,
        classes,
        images,
        annotations,
        pools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            n_pretrain: 60,
            n_support: 20,
            n_query: 20,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20, 20, 5, 5)), 0.0);
        assert_eq!(a.iou(&BBox::new(10, 0, 5, 5)), 0.0);
        assert!((a.iou(&BBox::new(5, 0, 10, 10)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic_and_seed_dependent() {
        let spec = small_spec();
        let a = generate(&spec, 5).unwrap();
        assert_eq!(a, generate(&spec, 5).unwrap());
        assert_ne!(a.images, generate(&spec, 6).unwrap().images);
    }

    #[test]
    fn object_counts_and_pool_classes() {
        let spec = small_spec();
        let b = generate(&spec, 1).unwrap();
        for (i, anns) in b.annotations.iter().enumerate() {
            assert!((1..=spec.max_objects).contains(&anns.len()), "image {i}");
            for a in anns {
                assert!(a.bbox().within(spec.image_size, spec.image_size));
                if b.pools[i] == Pool::Pretrain {
                    assert_eq!(spec.class_kind(a.class_id), ClassKind::Base);
                }
            }
        }
    }

    #[test]
    fn scene_validation() {
        assert!(SceneSpec { n_classes: 3, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { image_size: 31, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { n_novel: 10, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec::default().validate().is_ok());
    }

    #[test]
    fn zero_jitter_proposals_equal_ground_truth() {
        let b = generate(&small_spec(), 2).unwrap();
        let cfg = ProposalConfig {
            jitter: 0.0,
            ..ProposalConfig::default()
        };
        let mut r = rng::stream(0, "p", &[]);
        for anns in &b.annotations {
            let props = propose_regions(64, 64, anns, &cfg, &mut r);
            for (p, a) in props.iter().zip(anns) {
                assert_eq!(p.bbox, a.bbox());
                assert_eq!(p.class_id, Some(a.class_id));
            }
        }
    }

    #[test]
    fn positives_overlap_their_source() {
        let b = generate(&small_spec(), 3).unwrap();
        let cfg = ProposalConfig::default();
        let mut r = rng::stream(0, "p", &[]);
        for anns in &b.annotations {
            let props = propose_regions(64, 64, anns, &cfg, &mut r);
            for (p, a) in props.iter().zip(anns) {
                assert!(p.bbox.iou(&a.bbox()) >= 0.5);
                assert!(p.bbox.within(64, 64));
            }
            for p in &props[anns.len()..] {
                assert_eq!(p.class_id, None);
                assert!(anns.iter().all(|a| a.bbox().iou(&p.bbox) < cfg.max_negative_iou));
            }
        }
    }

    #[test]
    fn feature_layout() {
        let img = Image::filled(20, 20, [0.45, 0.5, 0.55]).unwrap();
        let f = extract_features(&img, &BBox::new(2, 3, 10, 8));
        assert_eq!(f.len(), FEATURE_DIM);
        assert_eq!(FEATURE_DIM, 33);
        for c in 0..3 {
            let hist = &f[c * HIST_BINS..(c + 1) * HIST_BINS];
            assert_eq!(hist.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(hist.iter().filter(|&&v| v == 0.0).count(), HIST_BINS - 1);
        }
        // A grey crop has no chroma, hence no foreground mass.
        assert!(f[24..31].iter().all(|&v| v == 0.0));
        assert_eq!(f[31], 0.5);
        assert_eq!(f[32], 0.4);
    }

    #[test]
    fn disk_round_trip() {
        let b = generate(&small_spec(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_benchmark(&b, dir.path()).unwrap();
        let back = read_benchmark(dir.path()).unwrap();
        assert_eq!(back, b);
        let head = fs::read_to_string(dir.path().join("annotations.csv")).unwrap();
        assert!(head.starts_with("image_id,x,y,w,h,class_id\n"));
        let first = fs::read(dir.path().join("images").join("0000.ppm")).unwrap();
        assert!(first.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(first.len(), b"P6\n64 64\n255\n".len() + 64 * 64 * 3);
    }
}
