//! COCO-style detection scoring with per-angle breakdowns.
//!
//! Per class and IoU threshold, predictions in each frame are taken in score
//! order (at most [`MAX_DETS`]) and greedily matched to the unmatched ground
//! truth box with the highest IoU at or above the threshold, ties going to the
//! lower ground-truth index. AP uses 101-point interpolated precision. Classes
//! without ground truth are left out of the means.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

pub use crate::bbox::iou;
use crate::bbox::BBox;
use crate::dataset::{AnnotationSet, FrameDetections, GroundTruthFrame};

pub const MAX_DETS: usize = 100;
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class id {0} is not declared in the annotation set")]
    UnknownClassId(u32),
    #[error("predictions reference frame '{0}' which has no ground truth")]
    UnknownFrame(String),
    #[error("frame '{0}' has no angle metadata")]
    MissingAngleMetadata(String),
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub num_gt: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
    pub ar: f64,
    pub recall50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_frames: usize,
    pub map50: f64,
    pub map75: f64,
    /// Mean over the evaluated thresholds.
    pub map: f64,
    /// Mean recall over classes and thresholds at [`MAX_DETS`] per frame.
    pub ar: f64,
    /// Mean recall over classes at IoU 0.5.
    pub recall50: f64,
    pub per_class: Vec<ClassReport>,
}

impl EvalReport {
    fn empty(num_frames: usize) -> Self {
        Self { num_frames, map50: 0.0, map75: 0.0, map: 0.0, ar: 0.0, recall50: 0.0, per_class: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleReport {
    pub angle_deg: f64,
    pub report: EvalReport,
}

/// Result of matching one class at one threshold over all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatches {
    pub num_gt: usize,
    /// (score, true positive) in global rank order.
    pub ranked: Vec<(f64, bool)>,
}

impl ClassMatches {
    pub fn recall(&self) -> f64 {
        if self.num_gt == 0 {
            return 0.0;
        }
        self.ranked.iter().filter(|r| r.1).count() as f64 / self.num_gt as f64
    }

    /// 101-point interpolated average precision.
    pub fn average_precision(&self) -> f64 {
        if self.num_gt == 0 {
            return 0.0;
        }
        let mut recall = Vec::with_capacity(self.ranked.len());
        let mut precision = Vec::with_capacity(self.ranked.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(_, hit) in &self.ranked {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(tp as f64 / self.num_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        for k in (1..precision.len()).rev() {
            if precision[k] > precision[k - 1] {
                precision[k - 1] = precision[k];
            }
        }
        let mut sum = 0.0;
        for p in 0..RECALL_POINTS {
            let r = p as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            if idx < precision.len() {
                sum += precision[idx];
            }
        }
        sum / RECALL_POINTS as f64
    }
}

fn det_order(a: &(f64, BBox), b: &(f64, BBox)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.x.total_cmp(&b.1.x))
        .then(a.1.y.total_cmp(&b.1.y))
        .then(a.1.w.total_cmp(&b.1.w))
        .then(a.1.h.total_cmp(&b.1.h))
}

/// Greedy matching within one frame. `dets` must already be in rank order.
/// Returns the matched ground-truth index for each detection.
pub fn match_frame(dets: &[(f64, BBox)], gts: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|(_, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(d, gt);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.map(|(g, _)| g)
        })
        .collect()
}

/// Per-frame inputs of one class: (ground truth boxes, ranked detections).
type ClassFrames = Vec<(Vec<BBox>, Vec<(f64, BBox)>)>;

fn class_matches(frames: &ClassFrames, threshold: f64) -> ClassMatches {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut num_gt = 0;
    for (f, (gts, dets)) in frames.iter().enumerate() {
        num_gt += gts.len();
        for (k, m) in match_frame(dets, gts, threshold).into_iter().enumerate() {
            ranked.push((dets[k].0, f, k, m.is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    ClassMatches { num_gt, ranked: ranked.into_iter().map(|r| (r.0, r.3)).collect() }
}

fn check_classes(preds: &[FrameDetections], gts: &AnnotationSet) -> Result<(), EvalError> {
    for f in &gts.frames {
        for b in &f.boxes {
            if !gts.has_class(b.class_id) {
                return Err(EvalError::UnknownClassId(b.class_id));
            }
        }
    }
    let known: HashMap<&str, ()> = gts.frames.iter().map(|f| (f.frame_id.as_str(), ())).collect();
    for p in preds {
        if !known.contains_key(p.frame_id.as_str()) {
            return Err(EvalError::UnknownFrame(p.frame_id.clone()));
        }
        for d in &p.detections {
            if !gts.has_class(d.class_id) {
                return Err(EvalError::UnknownClassId(d.class_id));
            }
        }
    }
    Ok(())
}

/// Scores `preds` against `gts`. `thresholds` drive the averaged mAP and AR;
/// the 0.5 and 0.75 columns are always computed.
pub fn evaluate(preds: &[FrameDetections], gts: &AnnotationSet, thresholds: &[f64]) -> Result<EvalReport, EvalError> {
    check_classes(preds, gts)?;
    let mut by_frame: HashMap<&str, Vec<&FrameDetections>> = HashMap::new();
    for p in preds {
        by_frame.entry(p.frame_id.as_str()).or_default().push(p);
    }
    let mut class_ids: Vec<u32> = gts.frames.iter().flat_map(|f| f.boxes.iter().map(|b| b.class_id)).collect();
    class_ids.sort();
    class_ids.dedup();
    if class_ids.is_empty() {
        return Ok(EvalReport::empty(gts.frames.len()));
    }

    let mut per_class = Vec::with_capacity(class_ids.len());
    for &c in &class_ids {
        let frames: ClassFrames = gts
            .frames
            .iter()
            .map(|f| {
                let g: Vec<BBox> = f.boxes.iter().filter(|b| b.class_id == c).map(|b| b.bbox).collect();
                let mut d: Vec<(f64, BBox)> = by_frame
                    .get(f.frame_id.as_str())
                    .into_iter()
                    .flatten()
                    .flat_map(|p| p.detections.iter())
                    .filter(|d| d.class_id == c)
                    .map(|d| (d.score, d.bbox))
                    .collect();
                d.sort_by(det_order);
                d.truncate(MAX_DETS);
                (g, d)
            })
            .collect();
        let at = |t: f64| class_matches(&frames, t);
        let m50 = at(0.5);
        let m75 = at(0.75);
        let per_t: Vec<ClassMatches> = thresholds.iter().map(|&t| at(t)).collect();
        let n = per_t.len().max(1) as f64;
        per_class.push(ClassReport {
            class_id: c,
            num_gt: m50.num_gt,
            ap50: m50.average_precision(),
            ap75: m75.average_precision(),
            ap: per_t.iter().map(ClassMatches::average_precision).sum::<f64>() / n,
            ar: per_t.iter().map(ClassMatches::recall).sum::<f64>() / n,
            recall50: m50.recall(),
        });
    }
    let mean = |f: fn(&ClassReport) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        num_frames: gts.frames.len(),
        map50: mean(|c| c.ap50),
        map75: mean(|c| c.ap75),
        map: mean(|c| c.ap),
        ar: mean(|c| c.ar),
        recall50: mean(|c| c.recall50),
        per_class,
    })
}

/// Partitions frames by viewing angle and evaluates each partition.
pub fn report_by_angle(
    preds: &[FrameDetections],
    gts: &AnnotationSet,
    thresholds: &[f64],
) -> Result<Vec<AngleReport>, EvalError> {
    check_classes(preds, gts)?;
    let mut groups: BTreeMap<i64, (f64, Vec<GroundTruthFrame>)> = BTreeMap::new();
    for f in &gts.frames {
        let angle = f.meta.angle_deg.ok_or_else(|| EvalError::MissingAngleMetadata(f.frame_id.clone()))?;
        // Angles are grouped at micro-degree resolution.
        let key = (angle * 1e6).round() as i64;
        groups.entry(key).or_insert_with(|| (angle, Vec::new())).1.push(f.clone());
    }
    let mut out = Vec::with_capacity(groups.len());
    for (_, (angle, frames)) in groups {
        let ids: std::collections::HashSet<&str> = frames.iter().map(|f| f.frame_id.as_str()).collect();
        let subset: Vec<FrameDetections> =
            preds.iter().filter(|p| ids.contains(p.frame_id.as_str())).cloned().collect();
        let sub_gts = AnnotationSet { classes: gts.classes.clone(), frames };
        out.push(AngleReport { angle_deg: angle, report: evaluate(&subset, &sub_gts, thresholds)? });
    }
    Ok(out)
}

const HEADER: [&str; 4] = ["mAP (IoU=0.50)", "mAP (IoU=0.75)", "mAP (IoU=0.50:0.05:0.95)", "AR (IoU=0.50:0.05:0.95)"];

/// Human-readable table: one overall row plus one row per angle.
pub fn format_table(overall: &EvalReport, by_angle: &[AngleReport]) -> String {
    let mut s = String::new();
    let label_w = 10;
    let _ = write!(s, "{:<label_w$}", "");
    for h in HEADER {
        let _ = write!(s, " | {h:>24}");
    }
    s.push('\n');
    s.push_str(&"-".repeat(label_w + HEADER.len() * 27));
    s.push('\n');
    let mut row = |label: &str, r: &EvalReport| {
        let _ = write!(s, "{label:<label_w$}");
        for v in [r.map50, r.map75, r.map, r.ar] {
            let _ = write!(s, " | {v:>24.3}");
        }
        s.push('\n');
    };
    row("overall", overall);
    for a in by_angle {
        row(&format!("{:+}°", a.angle_deg), &a.report);
    }
    s
}

#[derive(Serialize)]
struct ReportFile<'a> {
    overall: &'a EvalReport,
    by_angle: &'a [AngleReport],
}

pub fn report_json(overall: &EvalReport, by_angle: &[AngleReport]) -> String {
    serde_json::to_string_pretty(&ReportFile { overall, by_angle }).expect("report serialize") + "\n"
}
