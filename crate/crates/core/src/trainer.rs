//! Linear softmax detection head over fixed region descriptors.
//!
//! Model index 0 is always background. Scores are `f(x, y) = x . W[:, y] + b[y]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::augment::{AugMagnitude, ChannelCounts, Image, PhotometricDraw};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::losses::{loss_and_grad, ClassKind, LossParams, RoiBatch, TrainClock};
use crate::synthbench::{crop_features, extract_features, propose_regions, BBox, Benchmark, Proposal, ProposalConfig, FEATURE_DIM};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelClass {
    /// Benchmark class id; `None` for background.
    pub class_id: Option<usize>,
    pub name: String,
    pub kind: ClassKind,
}

impl ModelClass {
    pub fn background() -> Self {
        ModelClass {
            class_id: None,
            name: "background".into(),
            kind: ClassKind::Base,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub feature_dim: usize,
    pub classes: Vec<ModelClass>,
    /// Row-major `feature_dim x n_classes`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DetectorModel {
    /// Zero-initialized head for background followed by `classes`.
    pub fn zeros(feature_dim: usize, classes: Vec<ModelClass>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::contract("feature_dim must be positive"));
        }
        if classes.first().is_none_or(|c| c.class_id.is_some()) {
            return Err(Error::contract("model index 0 must be the background class"));
        }
        let c = classes.len();
        Ok(DetectorModel {
            feature_dim,
            classes,
            weights: vec![0.0; feature_dim * c],
            bias: vec![0.0; c],
        })
    }

    /// Layout `[background, classes...]` with kinds taken from the benchmark or overridden.
    pub fn for_classes(bench: &Benchmark, class_ids: &[(usize, ClassKind)]) -> Result<Self> {
        let mut classes = vec![ModelClass::background()];
        for &(id, kind) in class_ids {
            let info = bench
                .classes
                .get(id)
                .ok_or_else(|| Error::contract(format!("unknown class id {id}")))?;
            classes.push(ModelClass {
                class_id: Some(id),
                name: info.name.clone(),
                kind,
            });
        }
        DetectorModel::zeros(FEATURE_DIM, classes)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_kinds(&self) -> Vec<ClassKind> {
        self.classes.iter().map(|c| c.kind).collect()
    }

    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.classes.iter().position(|c| c.class_id == Some(class_id))
    }

    /// `(benchmark class id, kind)` for every foreground class.
    pub fn foreground(&self) -> Vec<(usize, ClassKind)> {
        self.classes.iter().filter_map(|c| c.class_id.map(|id| (id, c.kind))).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Scores for `n` feature rows (row-major `n x feature_dim`).
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let (d, c) = (self.feature_dim, self.n_classes());
        let n = features.len() / d;
        let mut out = Vec::with_capacity(n * c);
        for row in features.chunks_exact(d) {
            out.extend_from_slice(&self.bias);
            let start = out.len() - c;
            let o = &mut out[start..];
            for (k, &x) in row.iter().enumerate() {
                if x != 0.0 {
                    let w = &self.weights[k * c..(k + 1) * c];
                    for (ov, &wv) in o.iter_mut().zip(w) {
                        *ov += x * wv;
                    }
                }
            }
        }
        out
    }

    /// `W -= lr * X^T G`, `b -= lr * sum_rows(G)`.
    pub fn gradient_step(&mut self, features: &[f64], grad: &[f64], lr: f64) {
        let (d, c) = (self.feature_dim, self.n_classes());
        for (x, g) in features.chunks_exact(d).zip(grad.chunks_exact(c)) {
            for (k, &xv) in x.iter().enumerate() {
                if xv != 0.0 {
                    let w = &mut self.weights[k * c..(k + 1) * c];
                    for (wv, &gv) in w.iter_mut().zip(g) {
                        *wv -= lr * xv * gv;
                    }
                }
            }
            for (bv, &gv) in self.bias.iter_mut().zip(g) {
                *bv -= lr * gv;
            }
        }
    }

    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let c = self.n_classes();
        let _ = writeln!(s, "detector-head 1\nfeature_dim {}\nn_classes {c}", self.feature_dim);
        for (i, mc) in self.classes.iter().enumerate() {
            let id = mc.class_id.map_or("-".to_string(), |v| v.to_string());
            let kind = match mc.kind {
                ClassKind::Base => "base",
                ClassKind::Novel => "novel",
            };
            let _ = writeln!(s, "class {i} {id} {kind} {}", mc.name);
        }
        s.push_str("weights\n");
        for row in self.weights.chunks_exact(c) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s.push_str("bias\n");
        let cells: Vec<String> = self.bias.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
        s
    }

    pub fn from_checkpoint(text: &str, origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::parse(origin, m.to_string());
        let mut lines = text.lines();
        let mut next = || lines.next().ok_or_else(|| bad("unexpected end of checkpoint"));
        if next()?.trim() != "detector-head 1" {
            return Err(bad("not a detector-head checkpoint"));
        }
        let field = |line: &str, key: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(&format!("expected `{key} <n>`")))
        };
        let d = field(next()?, "feature_dim")?;
        let c = field(next()?, "n_classes")?;
        let mut classes = Vec::with_capacity(c);
        for i in 0..c {
            let line = next()?;
            let parts: Vec<&str> = line.splitn(5, ' ').collect();
            if parts.len() != 5 || parts[0] != "class" || parts[1] != i.to_string() {
                return Err(bad(&format!("malformed class line {i}")));
            }
            let class_id = match parts[2] {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad("bad class id"))?),
            };
            let kind = match parts[3] {
                "base" => ClassKind::Base,
                "novel" => ClassKind::Novel,
                _ => return Err(bad("bad class kind")),
            };
            classes.push(ModelClass {
                class_id,
                name: parts[4].to_string(),
                kind,
            });
        }
        let parse_row = |line: &str| -> Result<Vec<f64>> {
            line.split_whitespace()
                .map(|v| v.parse().map_err(|_| bad("bad parameter value")))
                .collect()
        };
        if next()?.trim() != "weights" {
            return Err(bad("expected `weights`"));
        }
        let mut weights = Vec::with_capacity(d * c);
        for _ in 0..d {
            let row = parse_row(next()?)?;
            if row.len() != c {
                return Err(bad("weight row has the wrong width"));
            }
            weights.extend(row);
        }
        if next()?.trim() != "bias" {
            return Err(bad("expected `bias`"));
        }
        let bias = parse_row(next()?)?;
        if bias.len() != c {
            return Err(bad("bias has the wrong width"));
        }
        let mut model = DetectorModel::zeros(d, classes)?;
        model.weights = weights;
        model.bias = bias;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&fs::read_to_string(path)?, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub total_iterations: usize,
    pub learning_rate: f64,
    pub batch_images: usize,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_images == 0 || !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("schedule needs batch_images > 0 and a finite lr >= 0"));
        }
        Ok(())
    }
}

/// Proposals of one image with their model labels and clean-image descriptors.
#[derive(Debug, Clone)]
pub struct RoiImage {
    pub image_id: usize,
    pub proposals: Vec<Proposal>,
    pub labels: Vec<usize>,
    pub features: Vec<f64>,
}

impl RoiImage {
    /// Classes the model does not know are labelled background.
    pub fn build<R: Rng + ?Sized>(
        bench: &Benchmark,
        image_id: usize,
        model: &DetectorModel,
        proposal_cfg: &ProposalConfig,
        rng: &mut R,
    ) -> Self {
        let raster = &bench.images[image_id];
        let proposals = propose_regions(raster.width, raster.height, &bench.annotations[image_id], proposal_cfg, rng);
        let labels = proposals
            .iter()
            .map(|p| p.class_id.and_then(|c| model.index_of(c)).unwrap_or(0))
            .collect();
        let mut features = Vec::with_capacity(proposals.len() * FEATURE_DIM);
        for p in &proposals {
            let crop = raster.crop_image(&p.bbox);
            features.extend(crop_features(&crop, &p.bbox, raster.width, raster.height));
        }
        RoiImage {
            image_id,
            proposals,
            labels,
            features,
        }
    }

    pub fn n_rois(&self) -> usize {
        self.labels.len()
    }
}

/// Support images plus their float rasters, kept for augmentation.
#[derive(Debug, Clone)]
pub struct SupportSet {
    pub images: Vec<RoiImage>,
    rasters: Vec<Image>,
    counts: Vec<ChannelCounts>,
}

impl SupportSet {
    pub fn build<R: Rng + ?Sized>(
        bench: &Benchmark,
        image_ids: &[usize],
        model: &DetectorModel,
        proposal_cfg: &ProposalConfig,
        rng: &mut R,
    ) -> Self {
        let images: Vec<RoiImage> = image_ids
            .iter()
            .map(|&i| RoiImage::build(bench, i, model, proposal_cfg, rng))
            .collect();
        let rasters = image_ids.iter().map(|&i| bench.images[i].to_image()).collect();
        let counts = image_ids.iter().map(|&i| ChannelCounts::from_rgb8(&bench.images[i].data)).collect();
        SupportSet { images, rasters, counts }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-iteration instrumentation from [`fine_tune_observed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub iteration: usize,
    pub clock: TrainClock,
    pub temperature: f64,
    pub loss: f64,
}

pub fn fine_tune<R: Rng + ?Sized>(
    model: &DetectorModel,
    support: &SupportSet,
    loss_params: &LossParams,
    aug: AugMagnitude,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<DetectorModel> {
    fine_tune_observed(model, support, loss_params, aug, schedule, rng, |_| {})
}

/// Gradient descent on `(weights, bias)` over mini-batches of support images; iteration `i`
/// (1-based) runs at clock `t = i / total`.
pub fn fine_tune_observed<R: Rng + ?Sized>(
    model: &DetectorModel,
    support: &SupportSet,
    loss_params: &LossParams,
    aug: AugMagnitude,
    schedule: &TrainSchedule,
    rng: &mut R,
    mut observe: impl FnMut(&StepInfo),
) -> Result<DetectorModel> {
    schedule.validate()?;
    loss_params.validate()?;
    if support.is_empty() {
        return Err(Error::contract("fine-tuning needs a nonempty support set"));
    }
    let mut out = model.clone();
    let kinds = out.class_kinds();
    let n = support.len();
    let total = schedule.total_iterations;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for iteration in 1..=total {
        let chosen: Vec<usize> = if schedule.batch_images >= n {
            (0..n).collect()
        } else {
            index::sample(rng, n, schedule.batch_images).into_vec()
        };
        features.clear();
        labels.clear();
        for &j in &chosen {
            let roi = &support.images[j];
            labels.extend_from_slice(&roi.labels);
            if aug.is_identity() {
                features.extend_from_slice(&roi.features);
            } else {
                let raster = &support.rasters[j];
                let draw = PhotometricDraw::sample(aug, rng);
                let pivot = draw.contrast_pivot_from_counts(&support.counts[j]);
                for p in &roi.proposals {
                    let crop = draw.apply_with_pivot(&raster.crop(&p.bbox), pivot);
                    features.extend(crop_features(&crop, &p.bbox, raster.width(), raster.height()));
                }
            }
        }
        if labels.is_empty() {
            continue;
        }
        let clock = TrainClock::at(iteration, total)?;
        let logits = out.logits(&features);
        let batch = RoiBatch::new(&logits, &labels, &kinds)?;
        let (loss, grad) = loss_and_grad(&batch, loss_params, clock)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss} at fine-tuning iteration {iteration}")));
        }
        observe(&StepInfo {
            iteration,
            clock,
            temperature: loss_params.temperature(clock),
            loss,
        });
        out.gradient_step(&features, &grad, schedule.learning_rate);
    }
    if !out.is_finite() {
        return Err(Error::Divergence("non-finite parameters after fine-tuning".into()));
    }
    Ok(out)
}

fn masked_loss_and_grad(
    logits: &[f64],
    labels: &[usize],
    active: &[usize],
    n_classes: usize,
) -> Result<(f64, Vec<f64>)> {
    let sub_logits: Vec<f64> = logits
        .chunks_exact(n_classes)
        .flat_map(|row| active.iter().map(move |&j| row[j]))
        .collect();
    let position = |y: usize| active.iter().position(|&a| a == y);
    let sub_labels = labels
        .iter()
        .map(|&y| position(y).ok_or_else(|| Error::contract(format!("label {y} is not an active class"))))
        .collect::<Result<Vec<_>>>()?;
    let kinds = vec![ClassKind::Base; active.len()];
    let batch = RoiBatch::new(&sub_logits, &sub_labels, &kinds)?;
    let (loss, sub_grad) = loss_and_grad(&batch, &LossParams::baseline(), TrainClock::new(0.0)?)?;
    let mut grad = vec![0.0; logits.len()];
    for (row, sub) in grad.chunks_exact_mut(n_classes).zip(sub_grad.chunks_exact(active.len())) {
        for (&j, &g) in active.iter().zip(sub) {
            row[j] = g;
        }
    }
    Ok((loss, grad))
}

/// Train the head on the base classes of `model` (plus background) with the baseline loss.
/// Novel rows stay exactly zero. Fails unless the training loss at least halves.
pub fn pretrain<R: Rng + ?Sized>(
    bench: &Benchmark,
    image_ids: &[usize],
    model: &DetectorModel,
    schedule: &TrainSchedule,
    proposal_cfg: &ProposalConfig,
    rng: &mut R,
) -> Result<DetectorModel> {
    schedule.validate()?;
    if image_ids.is_empty() {
        return Err(Error::contract("pretraining needs a nonempty image set"));
    }
    let active: Vec<usize> = model
        .classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == ClassKind::Base)
        .map(|(i, _)| i)
        .collect();
    let mut rois: Vec<RoiImage> = image_ids
        .iter()
        .map(|&i| RoiImage::build(bench, i, model, proposal_cfg, rng))
        .collect();
    // Only base-class and background ROIs take part.
    for r in &mut rois {
        let keep: Vec<bool> = r.labels.iter().map(|y| active.contains(y)).collect();
        let mut feats = Vec::with_capacity(r.features.len());
        for (k, row) in r.features.chunks_exact(FEATURE_DIM).enumerate() {
            if keep[k] {
                feats.extend_from_slice(row);
            }
        }
        let mut it = keep.iter();
        r.proposals.retain(|_| *it.next().unwrap());
        r.labels.retain(|y| active.contains(y));
        r.features = feats;
    }

    let c = model.n_classes();
    let mut out = model.clone();
    let all_features: Vec<f64> = rois.iter().flat_map(|r| r.features.iter().copied()).collect();
    let all_labels: Vec<usize> = rois.iter().flat_map(|r| r.labels.iter().copied()).collect();
    let full_loss = |m: &DetectorModel| -> Result<f64> {
        masked_loss_and_grad(&m.logits(&all_features), &all_labels, &active, c).map(|(l, _)| l)
    };
    let initial = full_loss(&out)?;

    let n = rois.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for iteration in 1..=schedule.total_iterations {
        let chosen: Vec<usize> = if schedule.batch_images >= n {
            (0..n).collect()
        } else {
            index::sample(rng, n, schedule.batch_images).into_vec()
        };
        features.clear();
        labels.clear();
        for &j in &chosen {
            features.extend_from_slice(&rois[j].features);
            labels.extend_from_slice(&rois[j].labels);
        }
        if labels.is_empty() {
            continue;
        }
        let (loss, grad) = masked_loss_and_grad(&out.logits(&features), &labels, &active, c)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("pretraining loss is {loss} at iteration {iteration}")));
        }
        out.gradient_step(&features, &grad, schedule.learning_rate);
    }
    let last = full_loss(&out)?;
    if !last.is_finite() || !out.is_finite() {
        return Err(Error::Divergence(format!("pretraining ended with loss {last}")));
    }
    if last > 0.5 * initial {
        return Err(Error::NotConverged(format!(
            "training loss went from {initial:.4} to {last:.4}, less than a 50% decrease"
        )));
    }
    Ok(out)
}

/// Argmax class (lowest index on ties) and its softmax probability for each score row;
/// `None` when background wins.
pub fn classify_rows(model: &DetectorModel, logits: &[f64]) -> Vec<Option<(usize, f64)>> {
    logits
        .chunks_exact(model.n_classes())
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            if best == 0 {
                return None;
            }
            let max = row[best];
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            Some((best, 1.0 / sum))
        })
        .collect()
}

/// Detections `(box, benchmark class id, confidence)` for the given proposals.
pub fn predict(model: &DetectorModel, image: &Image, proposals: &[BBox]) -> Vec<(BBox, usize, f64)> {
    let features: Vec<f64> = proposals.iter().flat_map(|b| extract_features(image, b)).collect();
    let logits = model.logits(&features);
    classify_rows(model, &logits)
        .into_iter()
        .zip(proposals)
        .filter_map(|(hit, b)| hit.and_then(|(j, p)| model.classes[j].class_id.map(|id| (*b, id, p))))
        .collect()
}

/// Proposals and clean descriptors for a fixed evaluation image set.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub image_ids: Vec<usize>,
    roi_image: Vec<usize>,
    boxes: Vec<BBox>,
    features: Vec<f64>,
}

impl EvalSet {
    pub fn build<R: Rng + ?Sized>(bench: &Benchmark, image_ids: &[usize], proposal_cfg: &ProposalConfig, rng: &mut R) -> Self {
        let mut roi_image = Vec::new();
        let mut boxes = Vec::new();
        let mut features = Vec::new();
        for &i in image_ids {
            let raster = &bench.images[i];
            for p in propose_regions(raster.width, raster.height, &bench.annotations[i], proposal_cfg, rng) {
                let crop = raster.crop_image(&p.bbox);
                features.extend(crop_features(&crop, &p.bbox, raster.width, raster.height));
                roi_image.push(i);
                boxes.push(p.bbox);
            }
        }
        EvalSet {
            image_ids: image_ids.to_vec(),
            roi_image,
            boxes,
            features,
        }
    }

    pub fn n_rois(&self) -> usize {
        self.boxes.len()
    }

    pub fn detect(&self, model: &DetectorModel) -> Vec<Detection> {
        let logits = model.logits(&self.features);
        classify_rows(model, &logits)
            .into_iter()
            .enumerate()
            .filter_map(|(k, hit)| {
                let (j, score) = hit?;
                Some(Detection {
                    image_id: self.roi_image[k],
                    bbox: self.boxes[k],
                    class_id: model.classes[j].class_id?,
                    score,
                })
            })
            .collect()
    }
}
