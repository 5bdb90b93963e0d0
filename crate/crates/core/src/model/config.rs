use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side, in pixels.
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 conv block.
    pub backbone_widths: Vec<usize>,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    /// Foreground classes; index `num_classes` is the implicit no-object class.
    pub num_classes: usize,
    pub dropout_p: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ModelConfig {
    /// 64×64 grayscale input, four conv blocks down to a 4×4 map, a 2+2 layer
    /// transformer of width 64 and eight object queries.
    pub fn desk_scale() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            backbone_widths: vec![8, 16, 32, 64],
            embed_dim: 64,
            num_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            num_queries: 8,
            num_classes: 2,
            dropout_p: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }

    /// Transformer constants of the full-size detector (six layers, eight heads,
    /// width 256, FFN 2048, twenty queries) on top of a small conv backbone.
    pub fn paper_parity() -> Self {
        Self {
            image_size: 512,
            backbone_widths: vec![32, 64, 128, 256, 512],
            embed_dim: 256,
            num_heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ffn_dim: 2048,
            num_queries: 20,
            ..Self::desk_scale()
        }
    }

    /// Tiny configuration for exhaustive finite-difference checks.
    pub fn reduced() -> Self {
        Self {
            image_size: 8,
            in_channels: 1,
            backbone_widths: vec![4, 8],
            embed_dim: 8,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            num_queries: 3,
            num_classes: 2,
            dropout_p: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return fail(format!("embed_dim {} must be divisible by 4 for the 2-D positional encoding", self.embed_dim));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return fail("backbone_widths must be a nonempty list of positive channel counts".into());
        }
        if self.in_channels == 0 || self.ffn_dim == 0 || self.num_queries == 0 || self.num_classes == 0 {
            return fail("in_channels, ffn_dim, num_queries and num_classes must be positive".into());
        }
        if self.image_size < 2 {
            return fail(format!("image_size {} too small", self.image_size));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || self.bn_eps <= 0.0 || self.ln_eps <= 0.0 {
            return fail("bn_momentum must be in (0, 1] and epsilons positive".into());
        }
        Ok(())
    }

    /// Side of the backbone feature map (each block is a 3×3, stride-2, pad-1 conv).
    pub fn feature_size(&self) -> usize {
        self.backbone_widths.iter().fold(self.image_size, |s, _| (s - 1) / 2 + 1)
    }

    pub fn sequence_len(&self) -> usize {
        self.feature_size() * self.feature_size()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Index of the no-object class.
    pub fn no_object(&self) -> usize {
        self.num_classes
    }
}
