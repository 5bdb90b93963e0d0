use crate::error::{Error, Result};

/// `(cx, cy, w, h)` → `(x1, y1, x2, y2)`.
pub fn box_cxcywh_to_xyxy(b: [f64; 4]) -> Result<[f64; 4]> {
    let [cx, cy, w, h] = b;
    if !(w >= 0.0 && h >= 0.0) {
        return Err(Error::contract("box_cxcywh_to_xyxy", format!("negative extent in {b:?}")));
    }
    Ok([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0])
}

/// `(x1, y1, x2, y2)` → `(cx, cy, w, h)`.
pub fn box_xyxy_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    let [x1, y1, x2, y2] = b;
    [(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1]
}

fn well_ordered(op: &'static str, b: &[f64; 4]) -> Result<()> {
    if b[0] <= b[2] && b[1] <= b[3] {
        Ok(())
    } else {
        Err(Error::contract(op, format!("box {b:?} is not ordered as x1<=x2, y1<=y2")))
    }
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union of two `xyxy` boxes. Two boxes with an empty union
/// have IoU 1 if identical, else 0.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    well_ordered("iou", &a)?;
    well_ordered("iou", &b)?;
    let inter = intersection(&a, &b);
    let union = area(&a) + area(&b) - inter;
    if union <= 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok(inter / union)
}

/// Generalized IoU: `IoU − (hull − union) / hull` over the enclosing hull.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    well_ordered("giou", &a)?;
    well_ordered("giou", &b)?;
    let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
    let hull_area = area(&hull);
    if hull_area <= 0.0 {
        if a == b {
            return Ok(1.0);
        }
        return Err(Error::contract("giou", format!("zero-area enclosing hull for distinct boxes {a:?}, {b:?}")));
    }
    let inter = intersection(&a, &b);
    let union = area(&a) + area(&b) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    Ok(iou - (hull_area - union) / hull_area)
}
