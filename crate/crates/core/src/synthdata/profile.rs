use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Appearance and label distribution of one simulated site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeProfile {
    pub node_id: usize,
    pub positive_rate: f64,
    /// Additive gray-level shift of the background.
    pub intensity_bias: f64,
    /// Multiplier on vessel darkness.
    pub contrast_scale: f64,
    /// Mean stenosis center, normalized `(x, y)`.
    pub position_bias: [f64; 2],
    /// Amplitude of the vessel's lateral oscillation.
    pub curvature_style: f64,
    /// Range of the lesion scale as a fraction of the image side. Vessel
    /// width and narrowing length grow with it, so sites differ in apparent
    /// magnification.
    pub size_range: (f64, f64),
}

impl NodeProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("profile {}: {what}", self.node_id)));
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad("positive_rate must be in [0, 1]");
        }
        if !(self.contrast_scale > 0.0) {
            return bad("contrast_scale must be positive");
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad("size_range must satisfy 0 < min <= max <= 0.5");
        }
        if !self.intensity_bias.is_finite() || !self.curvature_style.is_finite() || self.curvature_style < 0.0 {
            return bad("intensity_bias and curvature_style must be finite, curvature_style >= 0");
        }
        if self.position_bias.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("position_bias must lie in [0, 1]²");
        }
        Ok(())
    }
}

/// Five sites with distinct class balance, exposure, lesion placement and
/// magnification. Positive rates average to 0.405.
pub fn default_profiles() -> Vec<NodeProfile> {
    let rows: [(f64, f64, f64, [f64; 2], f64, (f64, f64)); 5] = [
        (0.25, 0.10, 1.30, [0.32, 0.32], 0.5, (0.15, 0.25)),
        (0.33, -0.05, 0.80, [0.50, 0.50], 1.0, (0.20, 0.30)),
        (0.405, 0.00, 1.00, [0.35, 0.55], 0.3, (0.25, 0.35)),
        (0.48, -0.10, 0.70, [0.55, 0.35], 1.5, (0.18, 0.28)),
        (0.56, 0.05, 1.15, [0.62, 0.62], 0.8, (0.28, 0.40)),
    ];
    rows.iter()
        .enumerate()
        .map(|(node_id, &(positive_rate, intensity_bias, contrast_scale, position_bias, curvature_style, size_range))| {
            NodeProfile {
                node_id,
                positive_rate,
                intensity_bias,
                contrast_scale,
                position_bias,
                curvature_style,
                size_range,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_average_to_target() {
        let p = default_profiles();
        assert_eq!(p.len(), 5);
        p.iter().for_each(|x| x.validate().unwrap());
        let mean: f64 = p.iter().map(|x| x.positive_rate).sum::<f64>() / 5.0;
        assert!((mean - 0.405).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_knobs() {
        let mut p = default_profiles().remove(0);
        p.size_range = (0.1, 0.6);
        assert!(p.validate().is_err());
        let mut p = default_profiles().remove(0);
        p.contrast_scale = 0.0;
        assert!(p.validate().is_err());
        let mut p = default_profiles().remove(0);
        p.positive_rate = 1.2;
        assert!(p.validate().is_err());
    }
}
