use serde::{Deserialize, Serialize};

use super::boxes::{box_cxcywh_to_xyxy, giou};
use super::hungarian::{hungarian, Assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::model::{PredictionRow, Predictions};
use crate::tensor::{Tape, Tensor, Var};

/// Ground-truth objects of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Normalized `(cx, cy, w, h)`.
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn single(bbox: [f64; 4], label: usize) -> Self {
        Self { boxes: vec![bbox], labels: vec![label] }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::contract("ground_truth", "boxes and labels differ in length"));
        }
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            if b.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return Err(Error::contract("ground_truth", format!("box {b:?} not inside (0,1)")));
            }
            if l >= num_classes {
                return Err(Error::contract("ground_truth", format!("label {l} out of range")));
            }
        }
        Ok(())
    }
}

/// Weights of the matching cost and of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    pub giou: f64,
    /// Relative weight of the no-object class in the classification term.
    pub eos_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, bbox: 5.0, giou: 2.0, eos_coef: 0.1 }
    }
}

/// `cost(i, j) = −λ_cls·p̂ᵢ(c_j) + λ_box·‖b_j − b̂ᵢ‖₁ − λ_giou·giou(b_j, b̂ᵢ)`.
pub fn cost_matrix(preds: PredictionRow<'_>, gt: &GroundTruth, weights: &LossWeights) -> Result<CostMatrix> {
    let n = preds.num_queries();
    let m = gt.len();
    if m > n {
        return Err(Error::Capacity { targets: m, slots: n });
    }
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let probs = preds.probs(i);
        let pb = preds.bbox(i);
        let pb_xyxy = box_cxcywh_to_xyxy(pb)?;
        for j in 0..m {
            let tb = gt.boxes[j];
            let l1: f64 = tb.iter().zip(&pb).map(|(a, b)| (a - b).abs()).sum();
            let g = giou(box_cxcywh_to_xyxy(tb)?, pb_xyxy)?;
            let c = -weights.cls * probs[gt.labels[j]] + weights.bbox * l1 - weights.giou * g;
            if !c.is_finite() {
                return Err(Error::contract("cost_matrix", format!("non-finite cost at ({i}, {j})")));
            }
            data.push(c);
        }
    }
    CostMatrix::new(n, m, data)
}

/// Matching of every image in a batch.
pub fn match_batch(preds: &Predictions, gts: &[GroundTruth], weights: &LossWeights) -> Result<Vec<Assignment>> {
    if preds.batch() != gts.len() {
        return Err(Error::dim("hungarian_loss", format!("{} predictions vs {} targets", preds.batch(), gts.len())));
    }
    (0..gts.len()).map(|b| hungarian(&cost_matrix(preds.row(b), &gts[b], weights)?)).collect()
}

/// GIoU between predicted `cxcywh` rows `[M, 4]` and fixed `xyxy` targets, as `[M, 1]`.
fn giou_rows(tape: &mut Tape, pred: Var, targets: &[[f64; 4]]) -> Result<Var> {
    let m = targets.len();
    let col = |k: usize| Tensor::new(vec![m, 1], targets.iter().map(|t| t[k]).collect()).unwrap();
    let (tx1, ty1, tx2, ty2) = (tape.constant(col(0)), tape.constant(col(1)), tape.constant(col(2)), tape.constant(col(3)));
    let t_area = Tensor::new(vec![m, 1], targets.iter().map(|t| (t[2] - t[0]) * (t[3] - t[1])).collect())?;
    let t_area = tape.constant(t_area);

    let cx = tape.select_last(pred, &[0])?;
    let cy = tape.select_last(pred, &[1])?;
    let w = tape.select_last(pred, &[2])?;
    let h = tape.select_last(pred, &[3])?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;

    let ix1 = tape.maximum(x1, tx1)?;
    let ix2 = tape.minimum(x2, tx2)?;
    let iy1 = tape.maximum(y1, ty1)?;
    let iy2 = tape.minimum(y2, ty2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let p_area = tape.mul(w, h)?;
    let areas = tape.add(p_area, t_area)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(x1, tx1)?;
    let hx2 = tape.maximum(x2, tx2)?;
    let hy1 = tape.minimum(y1, ty1)?;
    let hy2 = tape.maximum(y2, ty2)?;
    let hull_w = tape.sub(hx2, hx1)?;
    let hull_h = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hull_w, hull_h)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull)?;
    tape.sub(iou, penalty)
}

/// Loss recorded on a tape together with the matching used to build it.
#[derive(Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub assignments: Vec<Assignment>,
}

/// Batch-averaged set-prediction loss over `class_logits[B,N,C+1]` and `boxes[B,N,4]`.
///
/// Per image: weighted cross-entropy over all `N` slots (matched slots target
/// their object's class, the rest target no-object with weight `eos_coef`,
/// normalized by the total weight), plus `λ_box·L1` and `λ_giou·(1 − GIoU)`
/// over matched pairs, each averaged over the image's objects. The matching is
/// computed from current values and held constant.
pub fn hungarian_loss(
    tape: &mut Tape,
    class_logits: Var,
    boxes: Var,
    gts: &[GroundTruth],
    weights: &LossWeights,
) -> Result<LossOutput> {
    let preds = Predictions { class_logits: tape.value(class_logits).clone(), boxes: tape.value(boxes).clone() };
    let assignments = match_batch(&preds, gts, weights)?;
    let (batch, n, k) = (preds.batch(), preds.num_queries(), preds.num_logits());
    let no_object = k - 1;
    let inv_batch = 1.0 / batch as f64;

    let mut targets = vec![no_object; batch * n];
    let mut ce_w = vec![0.0; batch * n];
    for (b, a) in assignments.iter().enumerate() {
        for &(p, t) in &a.pairs {
            targets[b * n + p] = gts[b].labels[t];
        }
        let row = &mut ce_w[b * n..(b + 1) * n];
        for (slot, w) in row.iter_mut().enumerate() {
            *w = if targets[b * n + slot] == no_object { weights.eos_coef } else { 1.0 };
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|w| *w *= weights.cls * inv_batch / total);
        }
    }
    let flat_logits = tape.reshape(class_logits, &[batch * n, k])?;
    let mut loss = tape.cross_entropy_with_logits(flat_logits, &targets, &ce_w)?;

    let flat_boxes = tape.reshape(boxes, &[batch * n, 4])?;
    for (b, a) in assignments.iter().enumerate() {
        if a.pairs.is_empty() {
            continue;
        }
        let rows: Vec<usize> = a.pairs.iter().map(|&(p, _)| b * n + p).collect();
        let tgt_boxes: Vec<[f64; 4]> = a.pairs.iter().map(|&(_, t)| gts[b].boxes[t]).collect();
        let per_object = inv_batch / a.pairs.len() as f64;

        let pred = tape.index_rows(flat_boxes, &rows)?;
        let tgt = tape.constant(Tensor::new(vec![rows.len(), 4], tgt_boxes.concat())?);
        let l1 = tape.l1_loss(pred, tgt)?;
        let l1 = tape.scale(l1, weights.bbox * per_object);
        loss = tape.add(loss, l1)?;

        let tgt_xyxy = tgt_boxes.iter().map(|&t| box_cxcywh_to_xyxy(t)).collect::<Result<Vec<_>>>()?;
        let g = giou_rows(tape, pred, &tgt_xyxy)?;
        let g_sum = tape.sum(g);
        // Σ(1 − giou) = M − Σ giou
        let term = tape.scale(g_sum, -weights.giou * per_object);
        let term = tape.add_scalar(term, weights.giou * per_object * a.pairs.len() as f64);
        loss = tape.add(loss, term)?;
    }
    Ok(LossOutput { loss, assignments })
}

/// Value of [`hungarian_loss`] for fixed predictions.
pub fn hungarian_loss_value(preds: &Predictions, gts: &[GroundTruth], weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(preds.class_logits.clone());
    let b = tape.constant(preds.boxes.clone());
    let out = hungarian_loss(&mut tape, l, b, gts, weights)?;
    Ok(tape.value(out.loss).item())
}
