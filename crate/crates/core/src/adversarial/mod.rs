//! Domain-adversarial detector training: gradient reversal, multi-scale
//! ROI pooling, a hinge-loss domain discriminator and a desk-scale
//! trainable detector to exercise them on.

mod discriminator;
mod grl;
mod loss;
pub mod nn;
mod roi;
mod toy;
mod train;

pub use discriminator::{Discriminator, DiscriminatorGrad};
pub use grl::{grl_backward, grl_forward, GrlConfig};
pub use loss::{hinge_discriminator_loss, hinge_with_grads, total_loss, DiscriminatorScores, LossBreakdown};
pub use roi::{crop_resize_level, pooling_weights, roi_crop_resize, FeaturePyramid, RoiConfig, RoiPlan, PYRAMID_LEVELS};
pub use toy::{
    cell_box, cell_of, rgb_to_toy, toy_to_rgb, ToyDetector, ToyGrad, ToySample, ToyTask, ToyTrace, TOY_CHANNELS,
    TOY_GRID, TOY_IMAGE,
};
pub use train::{
    adversarial_gradients, count_mae, da_train_step, detection_step, discriminator_loss, discriminator_step,
    features, labeled_rois, predicted_rois, probe_domain_accuracy, AdversarialGradients, DaExperiment, DaOutcome,
    DomainBatch, ProbeConfig, RoiSelection, Sgd, TrainLogEntry,
};
