use super::strategy::Strategy;
use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::metrics::Thresholds;
use crate::model::ModelConfig;
use crate::synthdata::AugmentPolicy;

/// Everything one federated (or baseline) training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    /// Node count `K`.
    pub nodes: usize,
    /// Rounds `R`.
    pub rounds: usize,
    /// Local epochs per round `T`.
    pub epochs: usize,
    pub strategy: Strategy,
    pub batch_size: usize,
    /// Learning rate of every entry outside the backbone.
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    /// Round from which learning rates are multiplied by `lr_gamma`;
    /// `None` means `ceil(2R/3)`.
    pub lr_step_round: Option<usize>,
    pub clip_norm: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub eval_every: usize,
    /// Keep backbone batch-norm entries private under `BackboneOnly`.
    pub backbone_excludes_norm: bool,
    pub augment: AugmentPolicy,
    pub thresholds: Thresholds,
}

impl Default for FederationConfig {
    /// Desk-scale setup. Learning rates and the classification weight are
    /// raised from the full-size values of [`FederationConfig::paper_parity`]:
    /// with those, a model trained from scratch for 20 epochs keeps no
    /// detection above the confidence threshold.
    fn default() -> Self {
        Self {
            nodes: 5,
            rounds: 10,
            epochs: 2,
            strategy: Strategy::BackboneOnly,
            batch_size: 8,
            lr_head: 1e-3,
            lr_backbone: 1e-3,
            weight_decay: 1e-4,
            lr_gamma: 0.1,
            lr_step_round: None,
            clip_norm: 0.1,
            seed: 0,
            model: ModelConfig::desk_scale(),
            loss: LossWeights { cls: 5.0, ..LossWeights::default() },
            eval_every: 1,
            backbone_excludes_norm: false,
            augment: AugmentPolicy::desk_scale(),
            thresholds: Thresholds::default(),
        }
    }
}

impl FederationConfig {
    /// Optimizer and loss constants of the full-size detector, on the desk-scale model.
    pub fn paper_parity() -> Self {
        Self { lr_head: 1e-4, lr_backbone: 1e-5, loss: LossWeights::default(), ..Self::default() }
    }

    pub fn lr_step_round(&self) -> usize {
        self.lr_step_round.unwrap_or((2 * self.rounds).div_ceil(3))
    }

    /// Cumulative local epoch at which the learning-rate step happens.
    pub fn lr_step_epoch(&self) -> usize {
        self.lr_step_round() * self.epochs
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.nodes == 0 || self.rounds == 0 || self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return fail("nodes, rounds, epochs, batch_size and eval_every must be at least 1");
        }
        if !(self.lr_head >= 0.0 && self.lr_backbone >= 0.0 && self.weight_decay >= 0.0 && self.lr_gamma >= 0.0) {
            return fail("learning rates, weight decay and lr_gamma must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        let t = &self.thresholds;
        if !(t.iou > 0.0 && t.iou < 1.0 && t.conf > 0.0 && t.conf < 1.0) {
            return fail("thresholds must lie in (0, 1)");
        }
        if self.augment.short == 0 || self.augment.long_max < self.augment.short || !(0.0..1.0).contains(&self.augment.pad_max) {
            return fail("augment: need 0 < short <= long_max and pad_max in [0, 1)");
        }
        self.model.validate()
    }
}
