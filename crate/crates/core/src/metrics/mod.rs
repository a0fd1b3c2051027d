//! Box geometry, training losses, ground-truth preparation and AP/mAP.

mod ap;
mod boxes;
mod gt;
mod loss;

pub use ap::{average_precision, average_precision_images, coco_thresholds, mean_ap, MapReport};
pub use boxes::{BBox, Detection, GroundTruth};
pub use gt::{of_modality, prepare_gt, GtForm, FUSION_PAIR_IOU};
pub use loss::{
    assign_targets, ciou_loss, ciou_terms, ciou_with_alpha, detach, smooth_bce, smooth_bce_grad, total_loss,
    total_loss_detached, Ciou, Detached, LossConfig, LossParts, Match,
};
