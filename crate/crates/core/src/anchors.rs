//! k-means++ anchor mining over box shapes.
//!
//! Under the IoU metric a point's cost is `1 − IoU` and clusters recenter on
//! the per-axis median; under the euclidean metric the cost is the squared
//! distance and clusters recenter on the mean. Inertia is the mean cost.
//! A recentering is kept only if it does not raise the inertia, so the
//! inertia never increases from one iteration to the next.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::Rng;

pub const DEFAULT_K: usize = 9;
/// k-means++ restarts in [`mine_anchors`]; the lowest inertia wins.
pub const RESTARTS: u64 = 50;

/// Normalized box extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxWH {
    pub w: f64,
    pub h: f64,
}

impl BoxWH {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::invalid(format!("box extents must lie in (0, 1], got {w}×{h}")));
        }
        Ok(Self { w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl From<&BBox> for BoxWH {
    fn from(b: &BBox) -> Self {
        Self { w: b.w, h: b.h }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Iou,
    Euclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Iou => "iou",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(Metric::Iou),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::invalid(format!(
                "unknown distance metric {other:?} (expected iou or euclidean)"
            ))),
        }
    }
}

/// IoU of two boxes sharing a corner.
pub fn wh_iou(a: &BoxWH, b: &BoxWH) -> f64 {
    let inter = a.w.min(b.w) * a.h.min(b.h);
    inter / (a.area() + b.area() - inter)
}

pub fn box_distance(a: &BoxWH, b: &BoxWH, metric: Metric) -> f64 {
    match metric {
        Metric::Iou => 1.0 - wh_iou(a, b),
        Metric::Euclidean => ((a.w - b.w).powi(2) + (a.h - b.h).powi(2)).sqrt(),
    }
}

/// Per-point k-means objective term.
pub fn point_cost(a: &BoxWH, center: &BoxWH, metric: Metric) -> f64 {
    match metric {
        Metric::Iou => 1.0 - wh_iou(a, center),
        Metric::Euclidean => (a.w - center.w).powi(2) + (a.h - center.h).powi(2),
    }
}

/// Index of the nearest center, ties to the lower index.
fn nearest(b: &BoxWH, centers: &[BoxWH], metric: Metric) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = point_cost(b, c, metric);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Mean cost of assigning each box to its nearest center.
pub fn inertia(boxes: &[BoxWH], centers: &[BoxWH], metric: Metric) -> f64 {
    boxes.iter().map(|b| nearest(b, centers, metric).1).sum::<f64>() / boxes.len() as f64
}

fn assigned_inertia(boxes: &[BoxWH], centers: &[BoxWH], assign: &[usize], metric: Metric) -> f64 {
    boxes
        .iter()
        .zip(assign)
        .map(|(b, &j)| point_cost(b, &centers[j], metric))
        .sum::<f64>()
        / boxes.len() as f64
}

fn check_inputs(boxes: &[BoxWH], k: usize) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::invalid("no boxes to cluster"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(())
}

/// Samples an index with probability proportional to `weights`, or
/// uniformly if every weight is zero.
fn sample_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.below(weights.len());
    }
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).expect("positive total")
}

/// k-means++ seeding: a uniform first center, then each next center drawn
/// with probability proportional to `D(x)²`.
pub fn kmeanspp_seed(boxes: &[BoxWH], k: usize, metric: Metric, rng: &mut Rng) -> Result<Vec<BoxWH>> {
    check_inputs(boxes, k)?;
    let mut centers = vec![boxes[rng.below(boxes.len())]];
    let mut d2: Vec<f64> = boxes
        .iter()
        .map(|b| box_distance(b, &centers[0], metric).powi(2))
        .collect();
    while centers.len() < k {
        let next = boxes[sample_weighted(&d2, rng)];
        for (d, b) in d2.iter_mut().zip(boxes) {
            *d = d.min(box_distance(b, &next, metric).powi(2));
        }
        centers.push(next);
    }
    Ok(centers)
}

/// `k` boxes drawn uniformly, without replacement while boxes remain.
pub fn random_seed(boxes: &[BoxWH], k: usize, rng: &mut Rng) -> Result<Vec<BoxWH>> {
    check_inputs(boxes, k)?;
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        rng.shuffle(&mut idx);
        let take = (k - out.len()).min(idx.len());
        out.extend(idx[..take].iter().map(|&i| boxes[i]));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansConfig {
    pub max_iters: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub centers: Vec<BoxWH>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after the initial assignment and after every iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn recenter(members: &[BoxWH], metric: Metric) -> BoxWH {
    match metric {
        Metric::Iou => {
            let mut ws: Vec<f64> = members.iter().map(|b| b.w).collect();
            let mut hs: Vec<f64> = members.iter().map(|b| b.h).collect();
            BoxWH {
                w: median(&mut ws),
                h: median(&mut hs),
            }
        }
        Metric::Euclidean => {
            let n = members.len() as f64;
            BoxWH {
                w: members.iter().map(|b| b.w).sum::<f64>() / n,
                h: members.iter().map(|b| b.h).sum::<f64>() / n,
            }
        }
    }
}

/// Gives each empty cluster the point farthest from its own center, taken
/// from a cluster that keeps at least one member.
fn fill_empty_clusters(boxes: &[BoxWH], centers: &mut [BoxWH], assign: &mut [usize], metric: Metric) {
    for j in 0..centers.len() {
        let mut counts = vec![0usize; centers.len()];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, b) in boxes.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = point_cost(b, &centers[assign[i]], metric);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            centers[j] = boxes[i];
            assign[i] = j;
        }
    }
}

/// Lloyd iterations from `initial` centers.
pub fn kmeans_run(
    boxes: &[BoxWH],
    initial: &[BoxWH],
    metric: Metric,
    config: &KmeansConfig,
) -> Result<KmeansResult> {
    check_inputs(boxes, initial.len())?;
    if !(config.tol >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be non-negative, got {}", config.tol)));
    }
    let mut centers = initial.to_vec();
    let assign_all = |centers: &[BoxWH]| -> Vec<usize> {
        boxes.iter().map(|b| nearest(b, centers, metric).0).collect()
    };
    let mut assign = assign_all(&centers);
    let mut current = assigned_inertia(boxes, &centers, &assign, metric);
    let mut history = vec![current];
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        fill_empty_clusters(boxes, &mut centers, &mut assign, metric);
        current = assigned_inertia(boxes, &centers, &assign, metric);

        let mut movement: f64 = 0.0;
        for j in 0..centers.len() {
            let members: Vec<BoxWH> = boxes
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == j)
                .map(|(b, _)| *b)
                .collect();
            if members.is_empty() {
                continue;
            }
            let old = centers[j];
            centers[j] = recenter(&members, metric);
            let candidate = assigned_inertia(boxes, &centers, &assign, metric);
            if candidate <= current {
                current = candidate;
                movement = movement.max(((old.w - centers[j].w).powi(2) + (old.h - centers[j].h).powi(2)).sqrt());
            } else {
                centers[j] = old;
            }
        }

        let next = assign_all(&centers);
        let stable = next == assign;
        assign = next;
        current = assigned_inertia(boxes, &centers, &assign, metric);
        history.push(current);
        if stable || movement < config.tol {
            break;
        }
    }
    Ok(KmeansResult {
        centers,
        assignments: assign,
        inertia: current,
        history,
        iterations,
    })
}

/// Mined anchors, smallest area first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub metric: Metric,
    pub seed: u64,
    pub k: usize,
    pub inertia: f64,
    pub anchors: Vec<BoxWH>,
}

impl AnchorSet {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("anchor sets serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("anchors file: {e}")))?;
        if set.anchors.len() != set.k || set.k == 0 {
            return Err(Error::invalid(format!(
                "anchors file lists {} anchors for k = {}",
                set.anchors.len(),
                set.k
            )));
        }
        Ok(set)
    }
}

fn sort_by_area(anchors: &mut [BoxWH]) {
    anchors.sort_by(|a, b| a.area().total_cmp(&b.area()).then(a.w.total_cmp(&b.w)));
}

/// Best of [`RESTARTS`] k-means++ seeded runs.
pub fn mine_anchors(boxes: &[BoxWH], k: usize, metric: Metric, seed: u64) -> Result<AnchorSet> {
    mine_anchors_with(boxes, k, metric, seed, &KmeansConfig::default())
}

pub fn mine_anchors_with(
    boxes: &[BoxWH],
    k: usize,
    metric: Metric,
    seed: u64,
    config: &KmeansConfig,
) -> Result<AnchorSet> {
    check_inputs(boxes, k)?;
    let root = Rng::new(seed);
    let mut best: Option<KmeansResult> = None;
    for r in 0..RESTARTS {
        let initial = kmeanspp_seed(boxes, k, metric, &mut root.fork(r))?;
        let run = kmeans_run(boxes, &initial, metric, config)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let mut anchors = best.centers;
    sort_by_area(&mut anchors);
    Ok(AnchorSet {
        metric,
        seed,
        k,
        inertia: best.inertia,
        anchors,
    })
}

/// Mean over boxes of the best corner-aligned IoU with any anchor.
pub fn mean_best_iou(boxes: &[BoxWH], anchors: &[BoxWH]) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::invalid("no boxes to score"));
    }
    if anchors.is_empty() {
        return Err(Error::invalid("no anchors to score against"));
    }
    Ok(boxes
        .iter()
        .map(|b| anchors.iter().map(|a| wh_iou(b, a)).fold(0.0, f64::max))
        .sum::<f64>()
        / boxes.len() as f64)
}
