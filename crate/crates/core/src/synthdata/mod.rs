//! Synthetic angiography-like key frames.
//!
//! Every frame shows one dark, winding vessel with a single narrowing. The
//! residual-width ratio of the narrowing drives latent FFR/iFR values, and
//! those values decide the severity label through the clinical thresholds.
//! Sites differ in class balance, exposure, contrast, lesion placement,
//! vessel tortuosity and magnification.

mod augment;
pub mod format;
mod profile;
mod render;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{
    apply as apply_augment, augment, draw as draw_augment, hflip, pad, resize, rot90, scaled_size, vflip, AugmentDraw,
    AugmentPolicy,
};
pub use profile::{default_profiles, NodeProfile};
pub use render::{
    render_keyframe, severity_label, KeyFrameSample, Measured, FFR_THRESHOLD, HIGH_SEVERITY, IFR_THRESHOLD,
    LOW_SEVERITY, MEASURED_FREQUENCIES, MIN_SIZE,
};

use crate::error::{Error, Result};
use crate::tensor::mix64;

/// Stream id of the global test set; node streams use their index.
pub const TEST_STREAM: u64 = u64::MAX;

/// Generator for sample `index` of `stream`. Samples are independent of
/// generation order and of the sizes of other sets.
pub fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(stream ^ mix64(index))))
}

/// Per-node training sets and the shared test set.
#[derive(Clone, Debug, PartialEq)]
pub struct FederationData {
    pub nodes: Vec<Vec<KeyFrameSample>>,
    pub test: Vec<KeyFrameSample>,
}

impl FederationData {
    /// All node samples concatenated in node order.
    pub fn pooled(&self) -> Vec<KeyFrameSample> {
        self.nodes.concat()
    }
}

/// Node `i` draws from `profiles[i]`; test sample `j` draws from profile
/// `j mod K`, giving an evenly balanced mixture on a separate stream.
pub fn make_federation_data(
    seed: u64,
    profiles: &[NodeProfile],
    per_node: usize,
    test_size: usize,
    image_size: usize,
) -> Result<FederationData> {
    if profiles.is_empty() || per_node == 0 || test_size == 0 {
        return Err(Error::Config("need at least one profile and non-empty node and test sets".into()));
    }
    let nodes = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (0..per_node)
                .map(|j| render_keyframe(&mut sample_rng(seed, i as u64, j as u64), p, image_size))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let test = (0..test_size)
        .map(|j| render_keyframe(&mut sample_rng(seed, TEST_STREAM, j as u64), &profiles[j % profiles.len()], image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(FederationData { nodes, test })
}

/// Fraction of class-1 labels.
pub fn positive_fraction(samples: &[KeyFrameSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.label() == HIGH_SEVERITY).count() as f64 / samples.len() as f64
}
