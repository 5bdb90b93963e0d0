//! Per-class detection rates, exam-level accuracy and communication share.
//!
//! Detections are matched greedily by confidence, independently of the
//! Hungarian matching used in training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Strategy;
use crate::matching::{box_cxcywh_to_xyxy, iou, GroundTruth};
use crate::model::{ParamTree, PredictionRow, Predictions};

/// Foreground classes: low severity (0) and mild/high severity (1).
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub iou: f64,
    pub conf: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { iou: 0.5, conf: 0.5 }
    }
}

/// A prediction slot that survives the keep rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub slot: usize,
    pub class: usize,
    pub confidence: f64,
    /// Normalized `cxcywh`.
    pub bbox: [f64; 4],
}

fn check_logits(row: &PredictionRow<'_>) -> Result<()> {
    if row.num_logits != NUM_CLASSES + 1 {
        return Err(Error::contract("metrics", format!("expected {} logits per slot, got {}", NUM_CLASSES + 1, row.num_logits)));
    }
    Ok(())
}

/// Slots whose best foreground probability beats no-object and reaches
/// `conf_thr`, by descending confidence (ties by slot index).
pub fn kept_detections(row: PredictionRow<'_>, conf_thr: f64) -> Result<Vec<Detection>> {
    check_logits(&row)?;
    let mut kept = Vec::new();
    for slot in 0..row.num_queries() {
        let p = row.probs(slot);
        let class = if p[1] > p[0] { 1 } else { 0 };
        let confidence = p[class];
        if p[NUM_CLASSES] < confidence && confidence >= conf_thr {
            kept.push(Detection { slot, class, confidence, bbox: row.bbox(slot) });
        }
    }
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.slot.cmp(&b.slot)));
    Ok(kept)
}

/// Per-class true/false positive and miss counts plus matched IoUs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tallies {
    pub tp: [usize; NUM_CLASSES],
    pub fp: [usize; NUM_CLASSES],
    pub fn_: [usize; NUM_CLASSES],
    pub matched_iou: [Vec<f64>; NUM_CLASSES],
}

impl Tallies {
    pub fn merge(&mut self, other: &Tallies) {
        for c in 0..NUM_CLASSES {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
            self.matched_iou[c].extend_from_slice(&other.matched_iou[c]);
        }
    }
}

/// Matches kept detections to ground truth of the same class, highest
/// confidence first, each object at most once, at `IoU ≥ iou_thr`.
pub fn match_detections(row: PredictionRow<'_>, gt: &GroundTruth, iou_thr: f64, conf_thr: f64) -> Result<Tallies> {
    let kept = kept_detections(row, conf_thr)?;
    let gt_xyxy = gt.boxes.iter().map(|&b| box_cxcywh_to_xyxy(b)).collect::<Result<Vec<_>>>()?;
    let mut taken = vec![false; gt.len()];
    let mut t = Tallies::default();
    for d in &kept {
        let pred = box_cxcywh_to_xyxy(d.bbox)?;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt_xyxy.iter().enumerate() {
            if taken[j] || gt.labels[j] != d.class {
                continue;
            }
            let v = iou(pred, *g)?;
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) => {
                taken[j] = true;
                t.tp[d.class] += 1;
                t.matched_iou[d.class].push(v);
            }
            None => t.fp[d.class] += 1,
        }
    }
    for (j, &done) in taken.iter().enumerate() {
        if !done {
            t.fn_[gt.labels[j]] += 1;
        }
    }
    Ok(t)
}

/// A ratio that may be `0/0`, reported as 0 with `undefined` set.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Rate {
    pub value: f64,
    pub undefined: bool,
}

impl Rate {
    pub fn of(num: usize, den: usize) -> Self {
        if den == 0 {
            Rate { value: 0.0, undefined: true }
        } else {
            Rate { value: num as f64 / den as f64, undefined: false }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ClassRates {
    pub ppv: Rate,
    pub tpr: Rate,
}

pub fn ppv_tpr(t: &Tallies) -> [ClassRates; NUM_CLASSES] {
    std::array::from_fn(|c| ClassRates {
        ppv: Rate::of(t.tp[c], t.tp[c] + t.fp[c]),
        tpr: Rate::of(t.tp[c], t.tp[c] + t.fn_[c]),
    })
}

/// Fraction of images whose most confident kept detection has the class of
/// the image's (single) object. Images without a kept detection count as wrong.
pub fn exam_accuracy(preds: &Predictions, gts: &[GroundTruth], conf_thr: f64) -> Result<f64> {
    if preds.batch() != gts.len() {
        return Err(Error::dim("exam_accuracy", format!("{} predictions vs {} exams", preds.batch(), gts.len())));
    }
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (b, gt) in gts.iter().enumerate() {
        let kept = kept_detections(preds.row(b), conf_thr)?;
        if let (Some(top), Some(&label)) = (kept.first(), gt.labels.first()) {
            if top.class == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / gts.len() as f64)
}

/// Share of scalar parameters a strategy communicates.
pub fn comm_fraction(strategy: Strategy, params: &ParamTree, backbone_excludes_norm: bool) -> f64 {
    let total = params.scalar_count();
    if total == 0 {
        return 0.0;
    }
    strategy.shared_subset(params, backbone_excludes_norm).scalar_count() as f64 / total as f64
}

/// Evaluation summary of one model on one test set.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    /// Indexed by class: 0 = low, 1 = high severity.
    pub ppv: [f64; NUM_CLASSES],
    pub tpr: [f64; NUM_CLASSES],
    /// Mean IoU over matched pairs only (0 when nothing matched).
    pub iou: [f64; NUM_CLASSES],
    pub acc: f64,
    pub support: [usize; NUM_CLASSES],
    pub ppv_undefined: [bool; NUM_CLASSES],
    pub tpr_undefined: [bool; NUM_CLASSES],
    pub iou_undefined: [bool; NUM_CLASSES],
    pub comm_fraction: f64,
}

pub fn evaluate(preds: &Predictions, gts: &[GroundTruth], thr: &Thresholds, comm_fraction: f64) -> Result<MetricsReport> {
    if preds.batch() != gts.len() {
        return Err(Error::dim("evaluate", format!("{} predictions vs {} exams", preds.batch(), gts.len())));
    }
    let mut t = Tallies::default();
    let mut support = [0; NUM_CLASSES];
    for (b, gt) in gts.iter().enumerate() {
        t.merge(&match_detections(preds.row(b), gt, thr.iou, thr.conf)?);
        for &l in &gt.labels {
            support[l] += 1;
        }
    }
    let rates = ppv_tpr(&t);
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(MetricsReport {
        ppv: std::array::from_fn(|c| rates[c].ppv.value),
        tpr: std::array::from_fn(|c| rates[c].tpr.value),
        iou: std::array::from_fn(|c| mean(&t.matched_iou[c])),
        acc: exam_accuracy(preds, gts, thr.conf)?,
        support,
        ppv_undefined: std::array::from_fn(|c| rates[c].ppv.undefined),
        tpr_undefined: std::array::from_fn(|c| rates[c].tpr.undefined),
        iou_undefined: std::array::from_fn(|c| t.matched_iou[c].is_empty()),
        comm_fraction,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Node-averaged metrics with inter-node spread.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GlobalMetrics {
    pub mean: MetricsReport,
    pub acc_std: f64,
    pub iou_std: [f64; NUM_CLASSES],
}

pub fn summarize(nodes: &[MetricsReport]) -> GlobalMetrics {
    let col = |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&nodes.iter().map(f).collect::<Vec<_>>());
    let (acc, acc_std) = col(&|m| m.acc);
    let iou: [(f64, f64); NUM_CLASSES] = std::array::from_fn(|c| col(&|m| m.iou[c]));
    let any = |f: &dyn Fn(&MetricsReport) -> bool| nodes.iter().any(f);
    GlobalMetrics {
        mean: MetricsReport {
            ppv: std::array::from_fn(|c| col(&|m| m.ppv[c]).0),
            tpr: std::array::from_fn(|c| col(&|m| m.tpr[c]).0),
            iou: std::array::from_fn(|c| iou[c].0),
            acc,
            support: nodes.first().map_or([0; NUM_CLASSES], |m| m.support),
            ppv_undefined: std::array::from_fn(|c| any(&|m| m.ppv_undefined[c])),
            tpr_undefined: std::array::from_fn(|c| any(&|m| m.tpr_undefined[c])),
            iou_undefined: std::array::from_fn(|c| any(&|m| m.iou_undefined[c])),
            comm_fraction: col(&|m| m.comm_fraction).0,
        },
        acc_std,
        iou_std: std::array::from_fn(|c| iou[c].1),
    }
}
