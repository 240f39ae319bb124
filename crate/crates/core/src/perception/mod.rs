//! Point clouds, action masks, and the geometry that connects masks to
//! scene entities and world points.

pub mod camera;
pub mod cloud;
pub mod dbscan;
pub mod mask;
pub mod render;

pub use camera::{CameraPose, CameraView, Intrinsics};
pub use cloud::{synthesize_cloud, CloudConfig, CloudIoError, LabeledPointCloud, SemanticClass};
pub use dbscan::{dbscan_largest_cluster, filter_mask, DbscanParams, LargestCluster};
pub use mask::{
    gt_action_masks, instance_mask, mask_centroid, mask_iou, mask_to_instance, putdown_entity,
    terminal_masks, ActionMaskPair, Mask, MaskError, RleMask,
};
pub use render::{backproject_2d, render_topdown_depth, BackprojectError, DepthImage};

/// Free-form putdown point: centroid of the (already filtered) target mask.
pub fn freeform_putdown_point(
    cloud: &LabeledPointCloud,
    target_mask: &Mask,
) -> Result<crate::warehouse::Vec3, MaskError> {
    mask_centroid(cloud, target_mask)
}
