use super::strategy::Strategy;
use crate::error::{Error, Result};
use crate::model::ParamTree;

/// Server step: replaces every shared entry with the dataset-size-weighted
/// mean over nodes and returns each node's tree.
///
/// Means are reduced in ascending node order as `Σ (wᵢ/W)·θᵢ`; entries whose
/// values already agree bit-for-bit on every node are copied unchanged so
/// that aggregating identical trees is exactly the identity.
pub fn aggregate(
    strategy: Strategy,
    trees: &[ParamTree],
    weights: &[f64],
    backbone_excludes_norm: bool,
) -> Result<Vec<ParamTree>> {
    let first = trees.first().ok_or_else(|| Error::Aggregation { path: String::new(), detail: "no trees".into() })?;
    if weights.len() != trees.len() {
        return Err(Error::Aggregation {
            path: String::new(),
            detail: format!("{} weights for {} trees", weights.len(), trees.len()),
        });
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Aggregation { path: String::new(), detail: "weights must be positive and finite".into() });
    }
    for t in &trees[1..] {
        first.check_same_structure(t)?;
    }
    let mut out = trees.to_vec();
    let total: f64 = weights.iter().sum();
    for (path, entry) in first.iter() {
        if !strategy.shares(path, entry, backbone_excludes_norm) {
            continue;
        }
        let values: Vec<&[f64]> = trees.iter().map(|t| t.get(path).expect("same structure").tensor.data()).collect();
        if values.iter().all(|v| v == &values[0]) {
            continue;
        }
        let mut mean = vec![0.0; values[0].len()];
        for (v, w) in values.iter().zip(weights) {
            let share = w / total;
            mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += share * x);
        }
        for t in &mut out {
            t.get_mut(path).expect("same structure").tensor.data_mut().copy_from_slice(&mean);
        }
    }
    Ok(out)
}
