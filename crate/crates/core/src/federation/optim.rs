use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{in_backbone, ParamTree};

pub type Grads = BTreeMap<String, Vec<f64>>;

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// AdamW with decoupled weight decay and a separate learning rate for the
/// backbone. Moments live with the node and never leave it.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamW {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr_head: f64, lr_backbone: f64, weight_decay: f64) -> Self {
        Self { lr_head, lr_backbone, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with every learning rate multiplied by `lr_scale`.
    pub fn step(&mut self, params: &mut ParamTree, grads: &Grads, cfg: &AdamWConfig, lr_scale: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (path, entry) in params.iter_mut() {
            let g = grads.get(path).ok_or_else(|| Error::MissingParam(path.to_string()))?;
            let n = entry.numel();
            if g.len() != n {
                return Err(Error::dim("adamw", format!("`{path}`: {} grads for {n} values", g.len())));
            }
            let lr = lr_scale * if in_backbone(path, entry) { cfg.lr_backbone } else { cfg.lr_head };
            let m = self.m.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let decay = 1.0 - lr * cfg.weight_decay;
            for (((p, &g), m), v) in entry.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                *p = *p * decay - lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Partition;
    use crate::tensor::Tensor;

    fn tree(v: f64) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("backbone.conv1.w", Tensor::full(&[2], v), Partition::Backbone).unwrap();
        t.insert("head.class.w", Tensor::full(&[2], v), Partition::Head).unwrap();
        t
    }

    fn grads(g: f64) -> Grads {
        [("backbone.conv1.w".to_string(), vec![g; 2]), ("head.class.w".to_string(), vec![g; 2])].into()
    }

    #[test]
    fn first_step_moves_by_lr_per_partition() {
        let mut p = tree(1.0);
        let mut opt = AdamW::new();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::new(1e-2, 1e-3, 0.0) };
        opt.step(&mut p, &grads(0.5), &cfg, 1.0).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((p.tensor("head.class.w").unwrap().data()[0] - (1.0 - 1e-2)).abs() < 1e-9);
        assert!((p.tensor("backbone.conv1.w").unwrap().data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = tree(2.0);
        let mut opt = AdamW::new();
        opt.step(&mut p, &grads(0.0), &AdamWConfig::new(0.1, 0.1, 0.5), 1.0).unwrap();
        assert_eq!(p.tensor("head.class.w").unwrap().data()[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn clipping() {
        let mut g: Grads = [("a".to_string(), vec![3.0, 4.0])].into();
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"], vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
