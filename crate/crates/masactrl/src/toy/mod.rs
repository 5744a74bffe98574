//! Desk-scale training and evaluation: a procedural shapes dataset with
//! ground-truth foreground rasters, the noise-prediction trainer, and the
//! scene-classifier oracle that makes synthesis and editing claims
//! measurable.

mod classify;
mod dataset;
mod scene;
mod train;

pub use classify::{chi2_distance, fg_histogram, scene_classify, spearman_rho, Classification};
pub use dataset::{
    all_combinations, make_dataset, write_dataset, Dataset, ManifestRecord, SceneItem,
};
pub use scene::{
    downsample_raster, mask_iou, render_scene, BgColor, FgColor, Position, SceneSpec, Shape,
    TokenGrammar, BG_COLORS, FG_COLORS, POSITIONS, SHAPES, SHAPE_TOKEN_SLOT,
};
pub use train::{eval_loss, save_loss_curve, train, TrainConfig};
