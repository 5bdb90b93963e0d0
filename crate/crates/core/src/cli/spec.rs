use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Strategy};
use crate::matching::LossWeights;
use crate::metrics::Thresholds;
use crate::model::ModelConfig;
use crate::synthdata::{default_profiles, AugmentPolicy, NodeProfile};

/// Experiment description read from a flat TOML file.
///
/// Every key is optional and defaults to the desk-scale setup; unknown keys
/// are rejected so a misspelled hyperparameter never goes unnoticed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub nodes: usize,
    pub train_per_node: usize,
    pub test_size: usize,
    /// Directory holding `node_<i>.fkey` and `test.fkey`.
    pub data_dir: PathBuf,
    /// Directory receiving `results.csv` and checkpoints.
    pub out_dir: PathBuf,

    // grid axes
    pub rounds: Vec<usize>,
    pub epochs: Vec<usize>,
    pub strategies: Vec<Strategy>,

    // optimization
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_step_round: Option<usize>,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub backbone_excludes_norm: bool,

    // evaluation
    pub iou_thr: f64,
    pub conf_thr: f64,
    /// Write wall-clock seconds to the results; off by default so that
    /// reruns are byte-identical.
    pub record_time: bool,

    // model
    pub image_size: usize,
    pub backbone_widths: Vec<usize>,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    pub dropout_p: f64,

    // loss
    pub loss_cls: f64,
    pub loss_bbox: f64,
    pub loss_giou: f64,
    pub eos_coef: f64,

    // augmentation
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotate: bool,
    pub aug_short: usize,
    pub aug_long_max: usize,
    pub pad_max: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let fed = FederationConfig::default();
        let m = ModelConfig::desk_scale();
        let a = AugmentPolicy::desk_scale();
        let l = LossWeights::default();
        let t = Thresholds::default();
        Self {
            seed: 0,
            nodes: fed.nodes,
            train_per_node: 200,
            test_size: 250,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            rounds: vec![5, 10],
            epochs: vec![1, 2],
            strategies: Strategy::ALL.to_vec(),
            batch_size: fed.batch_size,
            lr_head: fed.lr_head,
            lr_backbone: fed.lr_backbone,
            weight_decay: fed.weight_decay,
            lr_gamma: fed.lr_gamma,
            lr_step_round: fed.lr_step_round,
            clip_norm: fed.clip_norm,
            eval_every: fed.eval_every,
            backbone_excludes_norm: fed.backbone_excludes_norm,
            iou_thr: t.iou,
            conf_thr: t.conf,
            record_time: false,
            image_size: m.image_size,
            backbone_widths: m.backbone_widths,
            embed_dim: m.embed_dim,
            num_heads: m.num_heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            ffn_dim: m.ffn_dim,
            num_queries: m.num_queries,
            dropout_p: m.dropout_p,
            loss_cls: l.cls,
            loss_bbox: l.bbox,
            loss_giou: l.giou,
            eos_coef: l.eos_coef,
            hflip_p: a.hflip_p,
            vflip_p: a.vflip_p,
            rotate: a.rotate,
            aug_short: a.short,
            aug_long_max: a.long_max,
            pad_max: a.pad_max,
        }
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec fields are all representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() || self.epochs.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("rounds, epochs and strategies must be non-empty".into()));
        }
        if self.train_per_node == 0 || self.test_size == 0 {
            return Err(Error::Config("train_per_node and test_size must be at least 1".into()));
        }
        let available = default_profiles().len();
        if self.nodes == 0 || self.nodes > available {
            return Err(Error::Config(format!("nodes must be between 1 and {available}")));
        }
        for &r in &self.rounds {
            for &t in &self.epochs {
                self.config(Strategy::FedAvgAll, r, t).validate()?;
            }
        }
        Ok(())
    }

    pub fn profiles(&self) -> Vec<NodeProfile> {
        default_profiles().into_iter().take(self.nodes).collect()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            backbone_widths: self.backbone_widths.clone(),
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ffn_dim: self.ffn_dim,
            num_queries: self.num_queries,
            dropout_p: self.dropout_p,
            ..ModelConfig::desk_scale()
        }
    }

    /// Training configuration of one grid cell.
    pub fn config(&self, strategy: Strategy, rounds: usize, epochs: usize) -> FederationConfig {
        FederationConfig {
            nodes: self.nodes,
            rounds,
            epochs,
            strategy,
            batch_size: self.batch_size,
            lr_head: self.lr_head,
            lr_backbone: self.lr_backbone,
            weight_decay: self.weight_decay,
            lr_gamma: self.lr_gamma,
            lr_step_round: self.lr_step_round,
            clip_norm: self.clip_norm,
            seed: self.seed,
            model: self.model(),
            loss: LossWeights { cls: self.loss_cls, bbox: self.loss_bbox, giou: self.loss_giou, eos_coef: self.eos_coef },
            eval_every: self.eval_every,
            backbone_excludes_norm: self.backbone_excludes_norm,
            augment: AugmentPolicy {
                hflip_p: self.hflip_p,
                vflip_p: self.vflip_p,
                rotate: self.rotate,
                short: self.aug_short,
                long_max: self.aug_long_max,
                pad_max: self.pad_max,
            },
            thresholds: Thresholds { iou: self.iou_thr, conf: self.conf_thr },
        }
    }

    /// Grid cells in file order: rounds, then epochs, then strategies.
    pub fn cells(&self) -> Vec<(usize, usize, Strategy)> {
        let mut cells = Vec::new();
        for &r in &self.rounds {
            for &t in &self.epochs {
                for &s in &self.strategies {
                    cells.push((r, t, s));
                }
            }
        }
        cells
    }
}
