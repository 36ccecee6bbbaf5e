//! Detection evaluation: matching, precision, recall, AP and mAP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, BBox, Detection};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Ground-truth boxes keyed by image id.
pub type GroundTruth = BTreeMap<String, Vec<BBox>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionMatch {
    pub class_id: usize,
    pub score: f64,
    /// Index of the matched box within its image's ground truth.
    pub matched_gt: Option<usize>,
}

impl DetectionMatch {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One entry per input detection, in input order.
    pub detections: Vec<DetectionMatch>,
    /// Unmatched ground-truth boxes per image.
    pub unmatched_gt: BTreeMap<String, usize>,
    /// Ground-truth boxes per class.
    pub gt_per_class: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchResult {
    /// Counts for one class, or for all classes with `None`.
    pub fn counts(&self, class_id: Option<usize>) -> Counts {
        let keep = |c: usize| class_id.is_none_or(|k| k == c);
        let (tp, fp) = self
            .detections
            .iter()
            .filter(|d| keep(d.class_id))
            .fold((0, 0), |(tp, fp), d| if d.is_tp() { (tp + 1, fp) } else { (tp, fp + 1) });
        let gt: usize = self.gt_per_class.iter().filter(|(&c, _)| keep(c)).map(|(_, &n)| n).sum();
        Counts { tp, fp, fn_: gt - tp }
    }

    /// `(score, is_tp)` for one class, in input order.
    pub fn scored(&self, class_id: usize) -> Vec<(f64, bool)> {
        self.detections
            .iter()
            .filter(|d| d.class_id == class_id)
            .map(|d| (d.score, d.is_tp()))
            .collect()
    }
}

fn check_threshold(iou_threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(format!(
            "IoU threshold must lie in [0, 1], got {iou_threshold}"
        )));
    }
    Ok(())
}

/// Greedy one-to-one matching in descending score order (ties by input
/// order). A detection is a true positive when its best-overlapping,
/// still-unmatched, same-class ground truth on the same image reaches
/// `iou_threshold`.
pub fn match_detections(detections: &[Detection], gts: &GroundTruth, iou_threshold: f64) -> Result<MatchResult> {
    check_threshold(iou_threshold)?;
    if let Some(d) = detections.iter().find(|d| !gts.contains_key(&d.image_id)) {
        return Err(Error::invalid(format!(
            "detection refers to unknown image id {:?}",
            d.image_id
        )));
    }
    let mut taken: BTreeMap<&str, Vec<bool>> =
        gts.iter().map(|(id, boxes)| (id.as_str(), vec![false; boxes.len()])).collect();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| score_order((a, detections[a].score), (b, detections[b].score)));

    let mut out: Vec<DetectionMatch> = detections
        .iter()
        .map(|d| DetectionMatch {
            class_id: d.bbox.class_id,
            score: d.score,
            matched_gt: None,
        })
        .collect();
    for i in order {
        let d = &detections[i];
        let boxes = &gts[&d.image_id];
        let used = taken.get_mut(d.image_id.as_str()).expect("known image");
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in boxes.iter().enumerate() {
            if used[j] || g.class_id != d.bbox.class_id {
                continue;
            }
            let v = iou(&d.bbox, g);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= iou_threshold {
                used[j] = true;
                out[i].matched_gt = Some(j);
            }
        }
    }

    let unmatched_gt = taken
        .iter()
        .map(|(id, used)| (id.to_string(), used.iter().filter(|u| !**u).count()))
        .collect();
    let mut gt_per_class = BTreeMap::new();
    for g in gts.values().flatten() {
        *gt_per_class.entry(g.class_id).or_insert(0) += 1;
    }
    Ok(MatchResult {
        detections: out,
        unmatched_gt,
        gt_per_class,
    })
}

/// `(TP/(TP+FP), TP/(TP+FN))`, each 0 when its denominator is 0.
pub fn precision_recall(c: Counts) -> (f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Area under the monotone precision envelope of the P-R curve traced by
/// ranking `scored` detections by descending score (ties by input order).
/// `None` when the class has no ground truth.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| score_order((a, scored[a].0), (b, scored[b].0)));
    let mut points = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// Arithmetic mean of per-class APs.
pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::invalid("no class has ground truth; mAP is undefined"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ground_truth: usize,
    pub detections: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    /// Absent when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    /// Number of classes with ground truth, the mAP denominator.
    pub num_classes: usize,
    pub map: f64,
    pub classes: Vec<ClassReport>,
    /// Classes that appear only in detections; excluded from mAP.
    pub flagged_classes: Vec<usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Per-class table followed by a `Model  mAP` line.
    pub fn summary(&self, model: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "class\tGT\tTP\tFP\tFN\tP\tR\tAP");
        for c in &self.classes {
            let ap = c.ap.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{ap}",
                c.class_id, c.ground_truth, c.counts.tp, c.counts.fp, c.counts.fn_, c.precision, c.recall
            );
        }
        let _ = writeln!(out, "\nModel\tmAP@{}", self.iou_threshold);
        let _ = writeln!(out, "{model}\t{:.4}", self.map);
        out
    }
}

pub fn evaluate(detections: &[Detection], gts: &GroundTruth, iou_threshold: f64) -> Result<EvalReport> {
    let matched = match_detections(detections, gts, iou_threshold)?;
    let classes: BTreeSet<usize> = matched
        .gt_per_class
        .keys()
        .copied()
        .chain(matched.detections.iter().map(|d| d.class_id))
        .collect();
    let mut reports = Vec::new();
    let mut aps = Vec::new();
    let mut flagged = Vec::new();
    for c in classes {
        let counts = matched.counts(Some(c));
        let (precision, recall) = precision_recall(counts);
        let ground_truth = matched.gt_per_class.get(&c).copied().unwrap_or(0);
        let scored = matched.scored(c);
        let ap = average_precision(&scored, ground_truth);
        match ap {
            Some(v) => aps.push(v),
            None => flagged.push(c),
        }
        reports.push(ClassReport {
            class_id: c,
            ground_truth,
            detections: scored.len(),
            counts,
            precision,
            recall,
            ap,
        });
    }
    Ok(EvalReport {
        iou_threshold,
        num_classes: aps.len(),
        map: mean_average_precision(&aps)?,
        classes: reports,
        flagged_classes: flagged,
    })
}
