//! Detection metrics: VOC-style AP with all-point interpolation, mAP over class subsets, the
//! base/novel harmonic mean and the normal-approximation confidence interval.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::ClassKind;
use crate::synthbench::{BBox, BoxAnnotation};

pub fn iou(a: &BoxAnnotation, b: &BoxAnnotation) -> f64 {
    a.bbox().iou(&b.bbox())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// No ground truth for this class; excluded from means.
    pub empty: bool,
}

/// TP/FP flag per detection, in confidence order (ties keep input order).
pub fn match_detections(dets: &[ScoredBox], gts: &[GroundTruth], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image_id != det.image_id {
                    continue;
                }
                let o = det.bbox.iou(&gt.bbox);
                if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision/recall curve after making precision non-increasing in recall.
pub fn average_precision(dets: &[ScoredBox], gts: &[GroundTruth], iou_thr: f64) -> ApResult {
    if gts.is_empty() {
        return ApResult { ap: 0.0, empty: true };
    }
    let flags = match_detections(dets, gts, iou_thr);
    let npos = gts.len() as f64;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in &flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ApResult { ap, empty: false }
}

/// Mean AP over `subset`, skipping empty classes.
pub fn mean_ap(per_class: &BTreeMap<usize, ApResult>, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::contract("mean AP over an empty class subset"));
    }
    let aps: Vec<f64> = subset
        .iter()
        .filter_map(|c| per_class.get(c))
        .filter(|r| !r.empty)
        .map(|r| r.ap)
        .collect();
    if aps.is_empty() {
        return Err(Error::AllClassesEmpty);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn harmonic_mean(map_base: f64, map_novel: f64) -> f64 {
    if map_base <= 0.0 || map_novel <= 0.0 {
        return 0.0;
    }
    2.0 * map_base * map_novel / (map_base + map_novel)
}

/// Half-width `1.96 s / sqrt(n)` with the sample standard deviation.
pub fn confidence_interval(scores: &[f64]) -> Result<f64> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::contract(format!("confidence interval needs n >= 2, got {n}")));
    }
    if scores.iter().all(|&s| s == scores[0]) {
        return Ok(0.0);
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(1.96 * var.sqrt() / (n as f64).sqrt())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<usize, ApResult>,
    pub map_base: f64,
    pub map_novel: f64,
    pub map_all: f64,
    pub hm: f64,
    pub n_images: usize,
}

/// Subset mean that treats an all-empty subset as 0 for reporting.
fn report_mean(per_class: &BTreeMap<usize, ApResult>, subset: &[usize]) -> f64 {
    mean_ap(per_class, subset).unwrap_or(0.0)
}

/// Evaluate detections on `image_ids` against the annotations of those images.
/// `class_kinds` lists every evaluated class with its kind.
pub fn evaluate(
    detections: &[Detection],
    annotations: &[Vec<BoxAnnotation>],
    image_ids: &[usize],
    class_kinds: &[(usize, ClassKind)],
    iou_thr: f64,
) -> EvalReport {
    let mut gts: BTreeMap<usize, Vec<GroundTruth>> = BTreeMap::new();
    let mut dets: BTreeMap<usize, Vec<ScoredBox>> = BTreeMap::new();
    let in_set: std::collections::HashSet<usize> = image_ids.iter().copied().collect();
    for &i in image_ids {
        for a in &annotations[i] {
            gts.entry(a.class_id).or_default().push(GroundTruth {
                image_id: i,
                bbox: a.bbox(),
            });
        }
    }
    for d in detections.iter().filter(|d| in_set.contains(&d.image_id)) {
        dets.entry(d.class_id).or_default().push(ScoredBox {
            image_id: d.image_id,
            bbox: d.bbox,
            score: d.score,
        });
    }
    let per_class_ap: BTreeMap<usize, ApResult> = class_kinds
        .iter()
        .map(|&(c, _)| {
            let g = gts.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            let d = dets.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            (c, average_precision(d, g, iou_thr))
        })
        .collect();
    let of_kind = |k: ClassKind| -> Vec<usize> {
        class_kinds.iter().filter(|(_, kind)| *kind == k).map(|(c, _)| *c).collect()
    };
    let base = of_kind(ClassKind::Base);
    let novel = of_kind(ClassKind::Novel);
    let all: Vec<usize> = class_kinds.iter().map(|(c, _)| *c).collect();
    let map_base = if base.is_empty() { 0.0 } else { report_mean(&per_class_ap, &base) };
    let map_novel = if novel.is_empty() { 0.0 } else { report_mean(&per_class_ap, &novel) };
    let map_all = if all.is_empty() { 0.0 } else { report_mean(&per_class_ap, &all) };
    EvalReport {
        per_class_ap,
        map_base,
        map_novel,
        map_all,
        hm: harmonic_mean(map_base, map_novel),
        n_images: image_ids.len(),
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "images evaluated: {}\nmAP base:  {:.4}\nmAP novel: {:.4}\nmAP all:   {:.4}\nHM:        {:.4}\nper-class AP:\n",
            self.n_images, self.map_base, self.map_novel, self.map_all, self.hm
        );
        for (c, r) in &self.per_class_ap {
            if r.empty {
                s.push_str(&format!("  class {c}: empty (no ground truth)\n"));
            } else {
                s.push_str(&format!("  class {c}: {:.4}\n", r.ap));
            }
        }
        s
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("map_base,{}\nmap_novel,{}\nmap_all,{}\nhm,{}\nn_images,{}\n", self.map_base, self.map_novel, self.map_all, self.hm, self.n_images));
        for (c, r) in &self.per_class_ap {
            if !r.empty {
                s.push_str(&format!("ap_class_{c},{}\n", r.ap));
            }
        }
        s
    }
}

pub const DETECTIONS_HEADER: &str = "image_id,x,y,w,h,class_id,score";

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{DETECTIONS_HEADER}")?;
    for d in dets {
        writeln!(w, "{},{},{},{},{},{},{}", d.image_id, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.class_id, d.score)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == DETECTIONS_HEADER => {}
        // A zero-byte file is an empty detection list.
        None => return Ok(Vec::new()),
        _ => return Err(Error::parse(path, format!("expected header `{DETECTIONS_HEADER}`"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::parse(path, format!("line {}: malformed detection", i + 2));
            if cells.len() != 7 {
                return Err(bad());
            }
            let int = |j: usize| cells[j].parse::<i32>().map_err(|_| bad());
            Ok(Detection {
                image_id: cells[0].parse().map_err(|_| bad())?,
                bbox: BBox::new(int(1)?, int(2)?, int(3)?, int(4)?),
                class_id: cells[5].parse().map_err(|_| bad())?,
                score: cells[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
