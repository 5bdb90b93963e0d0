use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::profile::NodeProfile;
use crate::error::{Error, Result};
use crate::matching::GroundTruth;
use crate::tensor::Tensor;

pub const FFR_THRESHOLD: f64 = 0.80;
pub const IFR_THRESHOLD: f64 = 0.89;
pub const LOW_SEVERITY: usize = 0;
pub const HIGH_SEVERITY: usize = 1;

/// Probabilities of (FFR only, iFR only, both).
pub const MEASURED_FREQUENCIES: [f64; 3] = [0.334, 0.388, 0.278];

pub const MIN_SIZE: usize = 32;

/// Which invasive indices were recorded for an exam.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Measured {
    pub ffr: bool,
    pub ifr: bool,
}

impl Measured {
    pub fn mask(self) -> u8 {
        self.ffr as u8 | (self.ifr as u8) << 1
    }

    /// Inverse of [`Measured::mask`]; the empty set is not a valid record.
    pub fn from_mask(mask: u8) -> Option<Self> {
        match mask {
            1..=3 => Some(Self { ffr: mask & 1 != 0, ifr: mask & 2 != 0 }),
            _ => None,
        }
    }
}

/// Class 1 iff a measured index falls below its threshold.
pub fn severity_label(ffr: f64, ifr: f64, measured: Measured) -> usize {
    if (measured.ffr && ffr < FFR_THRESHOLD) || (measured.ifr && ifr < IFR_THRESHOLD) {
        HIGH_SEVERITY
    } else {
        LOW_SEVERITY
    }
}

/// A grayscale key frame with its single annotated stenosis.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyFrameSample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt: GroundTruth,
    pub ffr: f64,
    pub ifr: f64,
    pub measured: Measured,
}

impl KeyFrameSample {
    pub fn label(&self) -> usize {
        self.gt.labels[0]
    }

    pub fn bbox(&self) -> [f64; 4] {
        self.gt.boxes[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_measured<R: Rng + ?Sized>(rng: &mut R) -> Measured {
    let u: f64 = rng.gen();
    if u < MEASURED_FREQUENCIES[0] {
        Measured { ffr: true, ifr: false }
    } else if u < MEASURED_FREQUENCIES[0] + MEASURED_FREQUENCIES[1] {
        Measured { ffr: false, ifr: true }
    } else {
        Measured { ffr: true, ifr: true }
    }
}

/// Residual-width ratio and physiology consistent with `label`.
///
/// `ffr = 0.55 + 0.42·r + N(0, 0.02)`, `ifr = 0.49 + 0.5·ffr + N(0, 0.01)`,
/// both clamped to `[0, 1]`; draws that contradict the label are rejected.
fn draw_physiology<R: Rng + ?Sized>(rng: &mut R, label: usize, measured: Measured) -> (f64, f64, f64) {
    loop {
        let r = if label == HIGH_SEVERITY { rng.gen_range(0.10..0.30) } else { rng.gen_range(0.62..0.85) };
        let ffr = (0.55 + 0.42 * r + 0.02 * normal(rng)).clamp(0.0, 1.0);
        let ifr = (0.49 + 0.5 * ffr + 0.01 * normal(rng)).clamp(0.0, 1.0);
        if severity_label(ffr, ifr, measured) == label {
            return (r, ffr, ifr);
        }
    }
}

/// Centerline and width profile of the rendered vessel.
pub(crate) struct Vessel {
    center: [f64; 2],
    dir: [f64; 2],
    normal: [f64; 2],
    amp: f64,
    freq: f64,
    phase: f64,
    base_width: f64,
    ripple_freq: f64,
    ripple_phase: f64,
    ratio: f64,
    /// Length of the narrowed segment along the path parameter.
    pub(crate) narrowing_len: f64,
    half_span: f64,
}

impl Vessel {
    const STEP: f64 = 0.25;

    fn point(&self, t: f64) -> [f64; 2] {
        let off = self.amp * ((self.freq * t + self.phase).sin() - self.phase.sin());
        [
            self.center[0] + t * self.dir[0] + off * self.normal[0],
            self.center[1] + t * self.dir[1] + off * self.normal[1],
        ]
    }

    fn width(&self, t: f64) -> f64 {
        let ripple = 1.0 + 0.12 * (self.ripple_freq * t + self.ripple_phase).sin();
        let bump = if t.abs() < self.narrowing_len / 2.0 { (PI * t / self.narrowing_len).cos().powi(2) } else { 0.0 };
        self.base_width * ripple * (1.0 - (1.0 - self.ratio) * bump)
    }

    /// `(t, center, radius)` along the whole path.
    pub(crate) fn samples(&self) -> impl Iterator<Item = (f64, [f64; 2], f64)> + '_ {
        let n = (2.0 * self.half_span / Self::STEP).ceil() as usize;
        (0..=n).map(move |i| {
            let t = -self.half_span + i as f64 * Self::STEP;
            (t, self.point(t), self.width(t) / 2.0)
        })
    }

    /// Contrast filling past the narrowing: a tighter lesion lets less agent
    /// through, so the distal segment fades to `2·ratio − 0.3` over one lesion length.
    fn opacity(&self, t: f64) -> f64 {
        let half = self.narrowing_len / 2.0;
        let distal = (2.0 * self.ratio - 0.3).clamp(0.0, 1.0);
        let ramp = ((t - half) / half).clamp(0.0, 1.0);
        1.0 - (1.0 - distal) * ramp
    }

    pub(crate) fn in_narrowing(&self, t: f64) -> bool {
        t.abs() <= self.narrowing_len / 2.0
    }
}

/// Antialiased coverage of a pixel with center `(px, py)` by a disk.
pub(crate) fn disk_coverage(px: f64, py: f64, c: [f64; 2], radius: f64) -> f64 {
    let d = ((px - c[0]).powi(2) + (py - c[1]).powi(2)).sqrt();
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

fn draw_vessel<R: Rng + ?Sized>(rng: &mut R, profile: &NodeProfile, size: f64, ratio: f64) -> Vessel {
    let (lo, hi) = profile.size_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let cx = (profile.position_bias[0] + 0.08 * normal(rng)).clamp(0.22, 0.78) * size;
    let cy = (profile.position_bias[1] + 0.08 * normal(rng)).clamp(0.22, 0.78) * size;
    let theta = rng.gen_range(0.0..PI);
    Vessel {
        center: [cx, cy],
        dir: [theta.cos(), theta.sin()],
        normal: [-theta.sin(), theta.cos()],
        amp: profile.curvature_style * 0.06 * size,
        freq: 2.0 * PI / (rng.gen_range(0.6..1.2) * size),
        phase: rng.gen_range(0.0..2.0 * PI),
        base_width: 0.4 * scale * size,
        ripple_freq: 2.0 * PI / (rng.gen_range(0.3..0.6) * size),
        ripple_phase: rng.gen_range(0.0..2.0 * PI),
        ratio,
        narrowing_len: 0.9 * scale * size,
        half_span: 1.5 * size,
    }
}

/// Vessel opacity map (`[0,1]` per pixel) and the pixel-space extent
/// `(x1, y1, x2, y2)` of the narrowed segment.
pub(crate) fn rasterize(vessel: &Vessel, size: usize) -> (Vec<f64>, [f64; 4]) {
    let mut cov = vec![0.0; size * size];
    let mut ext = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    let limit = size as f64;
    for (t, c, r) in vessel.samples() {
        let reach = r + 1.0;
        if c[0] + reach < 0.0 || c[1] + reach < 0.0 || c[0] - reach > limit || c[1] - reach > limit {
            continue;
        }
        if vessel.in_narrowing(t) {
            ext[0] = ext[0].min(c[0] - r);
            ext[1] = ext[1].min(c[1] - r);
            ext[2] = ext[2].max(c[0] + r);
            ext[3] = ext[3].max(c[1] + r);
        }
        let x0 = (c[0] - reach).floor().max(0.0) as usize;
        let x1 = ((c[0] + reach).ceil().max(0.0) as usize).min(size);
        let y0 = (c[1] - reach).floor().max(0.0) as usize;
        let y1 = ((c[1] + reach).ceil().max(0.0) as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let v = disk_coverage(x as f64 + 0.5, y as f64 + 0.5, c, r) * vessel.opacity(t);
                let slot = &mut cov[y * size + x];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    (cov, ext)
}

/// Box around the narrowed segment: its disk extent grown by one pixel,
/// kept strictly inside the frame, normalized `cxcywh`.
fn lesion_box(ext: [f64; 4], size: usize) -> [f64; 4] {
    let s = size as f64;
    let x1 = (ext[0] - 1.0).max(0.5);
    let y1 = (ext[1] - 1.0).max(0.5);
    let x2 = (ext[2] + 1.0).min(s - 0.5);
    let y2 = (ext[3] + 1.0).min(s - 0.5);
    [(x1 + x2) / (2.0 * s), (y1 + y2) / (2.0 * s), (x2 - x1) / s, (y2 - y1) / s]
}

/// Draws one key frame under `profile`.
///
/// The label is drawn first at the profile's positive rate; the narrowing
/// ratio and the FFR/iFR values are then drawn conditionally so the
/// threshold rule reproduces it.
pub fn render_keyframe<R: Rng + ?Sized>(rng: &mut R, profile: &NodeProfile, size: usize) -> Result<KeyFrameSample> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!("key frames need at least {MIN_SIZE} pixels per side, got {size}")));
    }
    profile.validate()?;
    let label = if rng.gen::<f64>() < profile.positive_rate { HIGH_SEVERITY } else { LOW_SEVERITY };
    let measured = draw_measured(rng);
    let (ratio, ffr, ifr) = draw_physiology(rng, label, measured);

    let s = size as f64;
    let vessel = draw_vessel(rng, profile, s, ratio);
    let (cov, ext) = rasterize(&vessel, size);

    let grad = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let depth = 0.45 * profile.contrast_scale;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let bg = 0.65
                + profile.intensity_bias
                + grad[0] * ((x as f64 + 0.5) / s - 0.5)
                + grad[1] * ((y as f64 + 0.5) / s - 0.5);
            let v = bg - depth * cov[y * size + x] + 0.03 * normal(rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(KeyFrameSample {
        image: Tensor::new(vec![1, size, size], data)?,
        gt: GroundTruth::single(lesion_box(ext, size), label),
        ffr,
        ifr,
        measured,
    })
}
