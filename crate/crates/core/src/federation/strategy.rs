use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{checkpoint, in_backbone, ParamEntry, ParamTree, Partition};

/// Server aggregation policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Average every entry.
    FedAvgAll,
    /// Average everything except normalization entries.
    FedBN,
    /// Average the CNN backbone only; transformer and heads stay on the node.
    BackboneOnly,
    /// No communication.
    Standalone,
    /// One model trained on the pooled data of all nodes.
    Joint,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::FedAvgAll, Strategy::FedBN, Strategy::BackboneOnly, Strategy::Standalone, Strategy::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvgAll => "FedAvgAll",
            Strategy::FedBN => "FedBN",
            Strategy::BackboneOnly => "BackboneOnly",
            Strategy::Standalone => "Standalone",
            Strategy::Joint => "Joint",
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Strategy::FedAvgAll | Strategy::FedBN | Strategy::BackboneOnly)
    }

    /// Whether the entry at `path` leaves the node under this strategy.
    pub fn shares(self, path: &str, entry: &ParamEntry, backbone_excludes_norm: bool) -> bool {
        match self {
            Strategy::FedAvgAll => true,
            Strategy::FedBN => entry.partition != Partition::Normalization,
            Strategy::BackboneOnly => {
                in_backbone(path, entry) && !(backbone_excludes_norm && entry.partition == Partition::Normalization)
            }
            Strategy::Standalone | Strategy::Joint => false,
        }
    }

    /// The entries of `tree` this strategy communicates.
    pub fn shared_subset(self, tree: &ParamTree, backbone_excludes_norm: bool) -> ParamTree {
        tree.subset(|p, e| self.shares(p, e, backbone_excludes_norm))
    }

    /// Wire size of one upload: the shared subset in checkpoint encoding, or
    /// nothing when no entry is shared.
    pub fn payload_bytes(self, tree: &ParamTree, backbone_excludes_norm: bool) -> usize {
        let shared = self.shared_subset(tree, backbone_excludes_norm);
        if shared.is_empty() {
            0
        } else {
            checkpoint::encode(&shared).len()
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "fedavgall" | "fedavg" => Strategy::FedAvgAll,
            "fedbn" => Strategy::FedBN,
            "backboneonly" | "backbone" => Strategy::BackboneOnly,
            "standalone" => Strategy::Standalone,
            "joint" => Strategy::Joint,
            _ => return Err(Error::Config(format!("unknown strategy `{s}`"))),
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("fed-avg".parse::<Strategy>().unwrap(), Strategy::FedAvgAll);
        assert_eq!("backbone_only".parse::<Strategy>().unwrap(), Strategy::BackboneOnly);
        assert!("fedprox".parse::<Strategy>().is_err());
    }
}
