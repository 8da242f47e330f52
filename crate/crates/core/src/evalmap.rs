//! Detection scoring: greedy IoU matching, all-point interpolated AP per life
//! stage, mAP@0.5, and precision/recall at one confidence operating point.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Detection, ParasiteClass, NUM_CLASSES};

pub type ImageId = u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("image ids differ: {missing_truth:?} have detections but no ground truth, {missing_dets:?} have ground truth but no detection list")]
    ImageIds { missing_truth: Vec<ImageId>, missing_dets: Vec<ImageId> },
    #[error("thresholds must lie in [0, 1]")]
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Operating point for precision, recall and the tp/fp/fn counts.
    pub conf_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresh: 0.5, conf_thresh: 0.25 }
    }
}

/// Outcome of one detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Match {
    pub det: usize,
    pub gt: Option<usize>,
    pub is_true_positive: bool,
}

/// Indices of `dets` by descending confidence; equal confidences keep input
/// order.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap_or(Ordering::Equal));
    order
}

/// Greedy matching on one image. Detections are visited by descending
/// confidence and each claims the unclaimed same-class box of highest IoU
/// (lowest index on ties) when that IoU is at least `iou_thresh`. The result
/// is in visiting order.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> Vec<Match> {
    let mut claimed = vec![false; gts.len()];
    rank(dets)
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (k, gt) in gts.iter().enumerate() {
                if claimed[k] || gt.class != dets[d].class() {
                    continue;
                }
                let iou = dets[d].bbox.iou(gt);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                claimed[k] = true;
            }
            Match { det: d, gt: best.map(|b| b.0), is_true_positive: best.is_some() }
        })
        .collect()
}

/// One point of a precision/recall curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Raw curve from `(confidence, is_tp)` pairs: one point per distinct
/// confidence, counting every detection at or above it.
pub fn pr_curve(scored: &[(f64, bool)], n_gt: usize) -> Vec<PrPoint> {
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < s.len() {
        let conf = s[i].0;
        while i < s.len() && s[i].0 == conf {
            tp += s[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        out.push(PrPoint { confidence: conf, recall, precision: tp as f64 / seen as f64 });
    }
    out
}

/// Area under the monotone precision envelope (all-point interpolation).
/// Zero when there is no ground truth.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(scored, n_gt);
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in curve.iter().zip(&env) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    ap
}

/// Dataset-level scores. Serialized keys are fixed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub map50: f64,
    pub ap_ring: f64,
    pub ap_trophozoite: f64,
    pub ap_schizont: f64,
    pub ap_gametocyte: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Ground-truth count per class; classes with none are left out of
    /// `map50`.
    pub n_gt: [usize; NUM_CLASSES],
    #[serde(skip)]
    pub curves: [Vec<PrPoint>; NUM_CLASSES],
}

impl APReport {
    pub fn per_class_ap(&self) -> [f64; NUM_CLASSES] {
        [self.ap_ring, self.ap_trophozoite, self.ap_schizont, self.ap_gametocyte]
    }

    pub fn ap(&self, c: ParasiteClass) -> f64 {
        self.per_class_ap()[c.id()]
    }

    fn set_ap(&mut self, c: usize, v: f64) {
        *[&mut self.ap_ring, &mut self.ap_trophozoite, &mut self.ap_schizont, &mut self.ap_gametocyte][c] = v;
    }
}

/// Scores detections against ground truth keyed by image id. Both maps must
/// hold the same ids (an empty list is fine).
pub fn evaluate(
    dets: &BTreeMap<ImageId, Vec<Detection>>,
    gts: &BTreeMap<ImageId, Vec<BBox>>,
    cfg: &EvalConfig,
) -> Result<APReport, EvalError> {
    if !(0.0..=1.0).contains(&cfg.iou_thresh) || !(0.0..=1.0).contains(&cfg.conf_thresh) {
        return Err(EvalError::Threshold);
    }
    let missing_truth: Vec<ImageId> = dets.keys().filter(|k| !gts.contains_key(k)).copied().collect();
    let missing_dets: Vec<ImageId> = gts.keys().filter(|k| !dets.contains_key(k)).copied().collect();
    if !missing_truth.is_empty() || !missing_dets.is_empty() {
        return Err(EvalError::ImageIds { missing_truth, missing_dets });
    }
    let mut scored: [Vec<(f64, bool)>; NUM_CLASSES] = Default::default();
    let mut report = APReport::default();
    let mut tp = 0;
    let mut above = 0;
    for (id, truth) in gts {
        let d = &dets[id];
        for b in truth {
            report.n_gt[b.class.id()] += 1;
        }
        // greedy matching by confidence means the matches above any
        // threshold are exactly those of the thresholded list
        for m in match_detections(d, truth, cfg.iou_thresh) {
            let det = &d[m.det];
            scored[det.class().id()].push((det.confidence, m.is_true_positive));
            if det.confidence >= cfg.conf_thresh {
                above += 1;
                tp += m.is_true_positive as usize;
            }
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..NUM_CLASSES {
        let ap = average_precision(&scored[c], report.n_gt[c]);
        report.set_ap(c, ap);
        report.curves[c] = pr_curve(&scored[c], report.n_gt[c]);
        if report.n_gt[c] > 0 {
            sum += ap;
            present += 1;
        }
    }
    let total_gt: usize = report.n_gt.iter().sum();
    report.map50 = if present == 0 { 0.0 } else { sum / present as f64 };
    report.tp = tp;
    report.fp = above - tp;
    report.fn_ = total_gt - tp;
    report.precision = if above == 0 { 1.0 } else { tp as f64 / above as f64 };
    report.recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
    Ok(report)
}
