//! Region proposal network, cascade detection head, training-target
//! assignment and the multi-task loss.

mod cascade;
mod loss;
mod proposals;
mod roi;
mod rpn;
mod sampling;

pub use cascade::{cascade_forward, CascadeHead, StageHead, StageOutput};
pub use loss::{total_loss, LossTerms};
pub use proposals::{generate_proposals, Proposal};
pub use roi::{plan_roi_bins, roi_align, roi_level};
pub use rpn::{RpnHead, RpnOutput};
pub use sampling::{assign_and_sample_rcnn, assign_and_sample_rpn, rcnn_labels, rpn_labels, AnchorLabel, SampledBatch};

use crate::error::{Error, Result};
use crate::geometry::NUM_CLASSES;

/// Index of the background row in the classifier output.
pub const BACKGROUND: usize = NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub stages: usize,
    pub lambda: f64,
    pub iou_thresholds: Vec<f64>,
    /// Foreground classes plus background.
    pub num_classes: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { stages: 3, lambda: 1.0, iou_thresholds: vec![0.5, 0.6, 0.7], num_classes: NUM_CLASSES + 1 }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("cascade.stages must be at least 1".into()));
        }
        if self.iou_thresholds.len() != self.stages {
            return Err(Error::Config(format!(
                "cascade.iou_thresholds has {} entries for {} stages",
                self.iou_thresholds.len(),
                self.stages
            )));
        }
        if self.iou_thresholds.iter().any(|t| !(0.5..1.0).contains(t)) {
            return Err(Error::Config("cascade.iou_thresholds must lie in [0.5, 1)".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("cascade.iou_thresholds must be strictly increasing".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("cascade.lambda must be a finite non-negative number".into()));
        }
        if self.num_classes != NUM_CLASSES + 1 {
            return Err(Error::Config(format!("classifier width must be {} (10 classes + background)", NUM_CLASSES + 1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnConfig {
    pub batch: usize,
    pub pos_fraction: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_iou: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self { batch: 256, pos_fraction: 0.5, pos_iou: 0.7, neg_iou: 0.3, pre_nms: 2000, post_nms: 1000, nms_iou: 0.7 }
    }
}

impl RpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.pre_nms == 0 || self.post_nms == 0 {
            return Err(Error::Config("rpn batch and proposal counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(Error::Config("rpn.pos_fraction must lie in [0, 1]".into()));
        }
        if !(self.neg_iou <= self.pos_iou) {
            return Err(Error::Config("rpn.neg_iou must not exceed rpn.pos_iou".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcnnConfig {
    pub batch: usize,
    pub pos_fraction: f64,
    pub hidden: usize,
    pub roi_size: usize,
}

impl Default for RcnnConfig {
    fn default() -> Self {
        Self { batch: 512, pos_fraction: 0.25, hidden: 1024, roi_size: 7 }
    }
}

impl RcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.hidden == 0 || self.roi_size == 0 {
            return Err(Error::Config("rcnn batch, hidden width and roi size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(Error::Config("rcnn.pos_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Inference-time post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct TestConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub pre_nms: usize,
    pub post_nms: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.5, max_detections: 500, pre_nms: 1000, post_nms: 1000 }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_detections == 0 || self.pre_nms == 0 || self.post_nms == 0 {
            return Err(Error::Config("test detection and proposal limits must be at least 1".into()));
        }
        Ok(())
    }
}
