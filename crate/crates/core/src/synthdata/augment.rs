use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::KeyFrameSample;
use crate::matching::GroundTruth;
use crate::tensor::Tensor;

/// Flip/rotate/scale/pad augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Draw a uniform number of quarter turns.
    pub rotate: bool,
    /// Target length of the shorter side after scaling.
    pub short: usize,
    /// Cap on the longer side after scaling.
    pub long_max: usize,
    /// Maximum zero padding along one axis, as a fraction of that axis.
    pub pad_max: f64,
}

impl AugmentPolicy {
    pub fn desk_scale() -> Self {
        Self { hflip_p: 0.5, vflip_p: 0.5, rotate: true, short: 64, long_max: 160, pad_max: 0.25 }
    }

    pub fn paper_parity() -> Self {
        Self { short: 512, long_max: 1333, ..Self::desk_scale() }
    }

    /// No flips, rotations or padding; scaling to `short` only.
    pub fn identity(short: usize) -> Self {
        Self { hflip_p: 0.0, vflip_p: 0.0, rotate: false, short, long_max: usize::MAX, pad_max: 0.0 }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::desk_scale()
    }
}

/// One concrete draw of the random choices of [`augment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    /// Zero padding `[top, bottom, left, right]` in pixels, applied after scaling.
    pub pad: [usize; 4],
}

/// Output size for an `h × w` input: shorter side to `short`, longer side
/// capped at `long_max`.
pub fn scaled_size(h: usize, w: usize, policy: &AugmentPolicy) -> (usize, usize) {
    let (lo, hi) = (h.min(w) as f64, h.max(w) as f64);
    let mut scale = policy.short as f64 / lo;
    if hi * scale > policy.long_max as f64 {
        scale = policy.long_max as f64 / hi;
    }
    let r = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (r(h), r(w))
}

pub fn draw<R: Rng + ?Sized>(rng: &mut R, policy: &AugmentPolicy, h: usize, w: usize) -> AugmentDraw {
    let hflip = rng.gen::<f64>() < policy.hflip_p;
    let vflip = rng.gen::<f64>() < policy.vflip_p;
    let quarter_turns = if policy.rotate { rng.gen_range(0..4u8) } else { 0 };
    let (h, w) = if quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    let (h, w) = scaled_size(h, w, policy);
    let mut pad = [0; 4];
    if policy.pad_max > 0.0 {
        let vertical = rng.gen::<bool>();
        let len = if vertical { h } else { w };
        let total = (rng.gen_range(0.0..policy.pad_max) * len as f64).floor() as usize;
        let first = rng.gen_range(0..=total);
        let sides = if vertical { [0, 1] } else { [2, 3] };
        pad[sides[0]] = first;
        pad[sides[1]] = total - first;
    }
    AugmentDraw { hflip, vflip, quarter_turns, pad }
}

fn remap(sample: &KeyFrameSample, h: usize, w: usize, src: impl Fn(usize, usize) -> usize, bbox: [f64; 4]) -> KeyFrameSample {
    let old = sample.image.data();
    let data = (0..h * w).map(|i| old[src(i / w, i % w)]).collect();
    KeyFrameSample {
        image: Tensor::new(vec![1, h, w], data).expect("remap preserves element count"),
        gt: GroundTruth::single(bbox, sample.label()),
        ..sample.clone()
    }
}

pub fn hflip(sample: &KeyFrameSample) -> KeyFrameSample {
    let (h, w) = (sample.height(), sample.width());
    let [cx, cy, bw, bh] = sample.bbox();
    remap(sample, h, w, |y, x| y * w + (w - 1 - x), [1.0 - cx, cy, bw, bh])
}

pub fn vflip(sample: &KeyFrameSample) -> KeyFrameSample {
    let (h, w) = (sample.height(), sample.width());
    let [cx, cy, bw, bh] = sample.bbox();
    remap(sample, h, w, |y, x| (h - 1 - y) * w + x, [cx, 1.0 - cy, bw, bh])
}

/// Counter-clockwise quarter turn: normalized point `(x, y)` → `(y, 1 − x)`.
pub fn rot90(sample: &KeyFrameSample) -> KeyFrameSample {
    let (h, w) = (sample.height(), sample.width());
    let [cx, cy, bw, bh] = sample.bbox();
    remap(sample, w, h, |y, x| x * w + (w - 1 - y), [cy, 1.0 - cx, bh, bw])
}

/// Bilinear resize (half-pixel centers). Normalized boxes are unchanged.
pub fn resize(sample: &KeyFrameSample, h: usize, w: usize) -> KeyFrameSample {
    let (ih, iw) = (sample.height(), sample.width());
    if (ih, iw) == (h, w) {
        return sample.clone();
    }
    let src = sample.image.data();
    let coord = |dst: usize, out: usize, inp: usize| {
        let s = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..w).map(|x| coord(x, w, iw)).collect();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, ih);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * iw + x0] * (1.0 - fx) + src[y0 * iw + x1] * fx;
            let bot = src[y1 * iw + x0] * (1.0 - fx) + src[y1 * iw + x1] * fx;
            data.push(top * (1.0 - fy) + bot * fy);
        }
    }
    KeyFrameSample { image: Tensor::new(vec![1, h, w], data).expect("sizes are positive"), ..sample.clone() }
}

/// Zero padding `[top, bottom, left, right]`; the box is re-normalized to the new canvas.
pub fn pad(sample: &KeyFrameSample, pad: [usize; 4]) -> KeyFrameSample {
    if pad == [0; 4] {
        return sample.clone();
    }
    let (ih, iw) = (sample.height(), sample.width());
    let (h, w) = (ih + pad[0] + pad[1], iw + pad[2] + pad[3]);
    let mut data = vec![0.0; h * w];
    let src = sample.image.data();
    for y in 0..ih {
        let row = (y + pad[0]) * w + pad[2];
        data[row..row + iw].copy_from_slice(&src[y * iw..(y + 1) * iw]);
    }
    let [cx, cy, bw, bh] = sample.bbox();
    let bbox = [
        (cx * iw as f64 + pad[2] as f64) / w as f64,
        (cy * ih as f64 + pad[0] as f64) / h as f64,
        bw * iw as f64 / w as f64,
        bh * ih as f64 / h as f64,
    ];
    KeyFrameSample {
        image: Tensor::new(vec![1, h, w], data).expect("sizes are positive"),
        gt: GroundTruth::single(bbox, sample.label()),
        ..sample.clone()
    }
}

/// Applies a concrete draw: flips, quarter turns, scaling, then padding.
pub fn apply(sample: &KeyFrameSample, policy: &AugmentPolicy, d: &AugmentDraw) -> KeyFrameSample {
    let mut out = if d.hflip { hflip(sample) } else { sample.clone() };
    if d.vflip {
        out = vflip(&out);
    }
    for _ in 0..d.quarter_turns % 4 {
        out = rot90(&out);
    }
    let (h, w) = scaled_size(out.height(), out.width(), policy);
    out = resize(&out, h, w);
    pad(&out, d.pad)
}

pub fn augment<R: Rng + ?Sized>(sample: &KeyFrameSample, rng: &mut R, policy: &AugmentPolicy) -> KeyFrameSample {
    let d = draw(rng, policy, sample.height(), sample.width());
    apply(sample, policy, &d)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synthdata::{default_profiles, render_keyframe};

    fn sample(seed: u64) -> KeyFrameSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        render_keyframe(&mut rng, &default_profiles()[seed as usize % 5], 40).unwrap()
    }

    #[test]
    fn identity_policy_is_bit_exact() {
        let s = sample(1);
        let p = AugmentPolicy::identity(40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &mut rng, &p), s);
    }

    #[test]
    fn four_quarter_turns_restore() {
        let s = sample(2);
        let mut r = s.clone();
        for _ in 0..4 {
            r = rot90(&r);
        }
        assert_eq!(r.image, s.image);
        for (a, b) in r.bbox().iter().zip(s.bbox()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_size_examples() {
        let p = AugmentPolicy::desk_scale();
        assert_eq!(scaled_size(64, 64, &p), (64, 64));
        assert_eq!(scaled_size(32, 48, &p), (64, 96));
        assert_eq!(scaled_size(10, 40, &p), (40, 160));
        let pp = AugmentPolicy::paper_parity();
        assert_eq!(scaled_size(1000, 3000, &pp), (444, 1333));
    }

    #[test]
    fn pad_moves_box_with_content() {
        let s = sample(3);
        let p = pad(&s, [3, 5, 0, 0]);
        assert_eq!((p.height(), p.width()), (48, 40));
        let [_, cy, _, h] = p.bbox();
        let [_, cy0, _, h0] = s.bbox();
        assert!((cy * 48.0 - (cy0 * 40.0 + 3.0)).abs() < 1e-12);
        assert!((h * 48.0 - h0 * 40.0).abs() < 1e-12);
        assert_eq!(p.image.data()[..40], [0.0; 40]);
    }
}
