use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model an entry belongs to, as far as aggregation is concerned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Backbone,
    Head,
    /// Batch-norm gain/bias. These live under the `backbone.` prefix.
    Normalization,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Backbone => 0,
            Partition::Head => 1,
            Partition::Normalization => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Partition::Backbone),
            1 => Some(Partition::Head),
            2 => Some(Partition::Normalization),
            _ => None,
        }
    }
}

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub partition: Partition,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Parameters keyed by dotted path, iterated in lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, ParamEntry>,
}

/// True for entries of the CNN backbone, including its normalization layers.
pub fn in_backbone(path: &str, entry: &ParamEntry) -> bool {
    match entry.partition {
        Partition::Backbone => true,
        Partition::Normalization => path.starts_with(BACKBONE_PREFIX),
        Partition::Head => false,
    }
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor, partition: Partition) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Structure(format!("duplicate parameter path `{path}`")));
        }
        let mut tensor = tensor;
        tensor.requires_grad = false;
        tensor.grad = None;
        self.entries.insert(path, ParamEntry { tensor, partition });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&ParamEntry> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.entries.get(path).map(|e| &e.tensor).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<ParamEntry> {
        self.entries.remove(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(ParamEntry::numel).sum()
    }

    /// Clone of the entries selected by `keep`.
    pub fn subset(&self, mut keep: impl FnMut(&str, &ParamEntry) -> bool) -> ParamTree {
        let entries = self
            .entries
            .iter()
            .filter(|(k, v)| keep(k, v))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamTree { entries }
    }

    /// Same paths, partitions and shapes, in the same order.
    pub fn check_same_structure(&self, other: &ParamTree) -> Result<()> {
        let mut a = self.entries.iter();
        let mut b = other.entries.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((pa, ea)), Some((pb, eb))) => {
                    if pa != pb {
                        let first = pa.min(pb).clone();
                        return Err(Error::Aggregation { path: first, detail: "present in only one tree".into() });
                    }
                    if ea.partition != eb.partition || ea.tensor.shape() != eb.tensor.shape() {
                        return Err(Error::Aggregation {
                            path: pa.clone(),
                            detail: format!(
                                "{:?}{:?} vs {:?}{:?}",
                                ea.partition,
                                ea.tensor.shape(),
                                eb.partition,
                                eb.tensor.shape()
                            ),
                        });
                    }
                }
                (Some((p, _)), None) | (None, Some((p, _))) => {
                    return Err(Error::Aggregation { path: p.clone(), detail: "present in only one tree".into() });
                }
            }
        }
    }
}

/// Read-only selection of entries from a [`ParamTree`].
#[derive(Clone, Debug)]
pub struct ParamView<'a> {
    entries: Vec<(&'a str, &'a ParamEntry)>,
}

impl<'a> ParamView<'a> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a str, &'a ParamEntry)> + '_ {
        self.entries.iter().copied()
    }

    pub fn paths(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.entries.iter().map(|(p, _)| *p)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.numel()).sum()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.iter().any(|(p, _)| *p == path)
    }
}

/// Splits a tree into backbone parameters (φ) and everything else (ω).
///
/// Backbone batch-norm entries carry the `Normalization` tag but belong to φ by
/// their `backbone.` path.
pub fn partition_params(params: &ParamTree) -> (ParamView<'_>, ParamView<'_>) {
    let (phi, omega): (Vec<_>, Vec<_>) = params.iter().partition(|(p, e)| in_backbone(p, e));
    (ParamView { entries: phi }, ParamView { entries: omega })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("backbone.conv1.w", Tensor::zeros(&[2, 1, 3, 3]), Partition::Backbone).unwrap();
        t.insert("backbone.bn1.gamma", Tensor::ones(&[2]), Partition::Normalization).unwrap();
        t.insert("head.class.w", Tensor::zeros(&[4, 3]), Partition::Head).unwrap();
        t
    }

    #[test]
    fn iteration_is_lexicographic_and_paths_unique() {
        let mut t = tree();
        let paths: Vec<&str> = t.paths().collect();
        assert_eq!(paths, ["backbone.bn1.gamma", "backbone.conv1.w", "head.class.w"]);
        assert!(t.insert("head.class.w", Tensor::zeros(&[1]), Partition::Head).is_err());
    }

    #[test]
    fn partition_puts_backbone_norm_in_phi() {
        let t = tree();
        let (phi, omega) = partition_params(&t);
        assert_eq!(phi.len(), 2);
        assert_eq!(omega.len(), 1);
        assert!(phi.contains("backbone.bn1.gamma"));
        assert_eq!(phi.scalar_count() + omega.scalar_count(), t.scalar_count());
    }

    #[test]
    fn structure_mismatch_names_first_divergent_path() {
        let a = tree();
        let mut b = tree();
        b.remove("backbone.conv1.w");
        b.insert("backbone.conv1.w", Tensor::zeros(&[3, 1, 3, 3]), Partition::Backbone).unwrap();
        let err = a.check_same_structure(&b).unwrap_err();
        assert!(err.to_string().contains("backbone.conv1.w"), "{err}");
        let mut c = tree();
        c.remove("backbone.bn1.gamma");
        let err = a.check_same_structure(&c).unwrap_err();
        assert!(err.to_string().contains("backbone.bn1.gamma"), "{err}");
    }
}
