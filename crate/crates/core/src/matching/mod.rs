//! Set-prediction matching: box geometry, the Hungarian assignment between
//! prediction slots and ground-truth objects, and the matched detection loss.

mod boxes;
mod hungarian;
mod loss;

pub use boxes::{box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, giou, iou};
pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use loss::{cost_matrix, hungarian_loss, hungarian_loss_value, match_batch, GroundTruth, LossOutput, LossWeights};
