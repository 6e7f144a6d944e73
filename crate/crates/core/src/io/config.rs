//! Flat `section.key = value` run configuration. Keys not present in a
//! file keep their defaults, which are the full-scale training profile.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use super::read_text;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// `(iterations, learning rate)` phases, applied in order; the last
    /// rate holds after the schedule ends.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_schedule: vec![(70_000, 0.00125), (15_000, 0.000125)], momentum: 0.9, weight_decay: 0.0001 }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let mut end = 0;
        for &(n, lr) in &self.lr_schedule {
            end += n;
            if iteration < end {
                return lr;
            }
        }
        self.lr_schedule.last().map_or(0.0, |p| p.1)
    }

    pub fn total_iterations(&self) -> usize {
        self.lr_schedule.iter().map(|p| p.0).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputConfig {
    pub short_side: usize,
    pub flip_probability: f64,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self { short_side: 800, flip_probability: 0.5 }
    }
}

/// Synthetic training set and loop bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub images: usize,
    pub image_size: usize,
    pub max_objects: usize,
    pub iterations: usize,
    pub images_per_step: usize,
    pub log_interval: usize,
    /// Iterations between self-evaluations on the training scenes; 0
    /// disables them.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            images: 8,
            image_size: 96,
            max_objects: 3,
            iterations: 85_000,
            images_per_step: 1,
            log_interval: 20,
            eval_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub input: InputConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| scalar(s.trim())).collect()
}

fn array4(v: &str) -> std::result::Result<[usize; 4], String> {
    let l: Vec<usize> = list(v)?;
    l.try_into().map_err(|l: Vec<usize>| format!("expected 4 values, got {}", l.len()))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn schedule(v: &str) -> std::result::Result<Vec<(usize, f64)>, String> {
    v.split(',')
        .map(|phase| {
            let (n, lr) = phase.split_once(':').ok_or_else(|| format!("phase {phase:?} is not iterations:lr"))?;
            Ok((scalar(n.trim())?, scalar(lr.trim())?))
        })
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        self.set_inner(key, v).map_err(|m| if m.starts_with("unknown key") { m } else { format!("{key}: {m}") })
    }

    fn set_inner(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "backbone.stage_channels" => m.backbone.stage_channels = array4(v)?,
            "backbone.blocks_per_stage" => m.backbone.blocks_per_stage = array4(v)?,
            "backbone.input_channels" => m.backbone.input_channels = scalar(v)?,
            "fusion.dense_to_p2" => m.fusion.dense_to_p2 = boolean(v)?,
            "fusion.dense_to_p3" => m.fusion.dense_to_p3 = boolean(v)?,
            "fusion.mode" => m.fusion.mode = v.parse::<FusionMode>().map_err(|e| e.to_string())?,
            "fusion.out_channels" => m.fusion.out_channels = scalar(v)?,
            "fusion.add_p6" => m.fusion.add_p6 = boolean(v)?,
            "anchors.base_sizes" => {
                m.anchors.base_sizes = list(v)?;
                m.anchors.strides = (0..m.anchors.base_sizes.len()).map(|i| 4 << i).collect();
            }
            "anchors.ratios" => m.anchors.ratios = list(v)?,
            "rpn.batch" => m.rpn.batch = scalar(v)?,
            "rpn.pos_fraction" => m.rpn.pos_fraction = scalar(v)?,
            "rpn.pos_iou" => m.rpn.pos_iou = scalar(v)?,
            "rpn.neg_iou" => m.rpn.neg_iou = scalar(v)?,
            "rpn.pre_nms" => m.rpn.pre_nms = scalar(v)?,
            "rpn.post_nms" => m.rpn.post_nms = scalar(v)?,
            "rpn.nms_iou" => m.rpn.nms_iou = scalar(v)?,
            "rcnn.batch" => m.rcnn.batch = scalar(v)?,
            "rcnn.pos_fraction" => m.rcnn.pos_fraction = scalar(v)?,
            "rcnn.hidden" => m.rcnn.hidden = scalar(v)?,
            "rcnn.roi_size" => m.rcnn.roi_size = scalar(v)?,
            "cascade.stages" => m.cascade.stages = scalar(v)?,
            "cascade.lambda" => m.cascade.lambda = scalar(v)?,
            "cascade.iou_thresholds" => m.cascade.iou_thresholds = list(v)?,
            "test.score_threshold" => m.test.score_threshold = scalar(v)?,
            "test.nms_iou" => m.test.nms_iou = scalar(v)?,
            "test.max_detections" => m.test.max_detections = scalar(v)?,
            "test.pre_nms" => m.test.pre_nms = scalar(v)?,
            "test.post_nms" => m.test.post_nms = scalar(v)?,
            "optimizer.lr_schedule" => self.optimizer.lr_schedule = schedule(v)?,
            "optimizer.momentum" => self.optimizer.momentum = scalar(v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = scalar(v)?,
            "input.short_side" => self.input.short_side = scalar(v)?,
            "input.flip_probability" => self.input.flip_probability = scalar(v)?,
            "train.images" => self.train.images = scalar(v)?,
            "train.image_size" => self.train.image_size = scalar(v)?,
            "train.max_objects" => self.train.max_objects = scalar(v)?,
            "train.iterations" => self.train.iterations = scalar(v)?,
            "train.images_per_step" => self.train.images_per_step = scalar(v)?,
            "train.log_interval" => self.train.log_interval = scalar(v)?,
            "train.eval_interval" => self.train.eval_interval = scalar(v)?,
            "run.seed" => self.seed = scalar(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let sched: Vec<String> = self.optimizer.lr_schedule.iter().map(|(n, lr)| format!("{n}:{lr}")).collect();
        vec![
            ("backbone.stage_channels", join(&m.backbone.stage_channels)),
            ("backbone.blocks_per_stage", join(&m.backbone.blocks_per_stage)),
            ("backbone.input_channels", m.backbone.input_channels.to_string()),
            ("fusion.dense_to_p2", m.fusion.dense_to_p2.to_string()),
            ("fusion.dense_to_p3", m.fusion.dense_to_p3.to_string()),
            ("fusion.mode", m.fusion.mode.to_string()),
            ("fusion.out_channels", m.fusion.out_channels.to_string()),
            ("fusion.add_p6", m.fusion.add_p6.to_string()),
            ("anchors.base_sizes", join(&m.anchors.base_sizes)),
            ("anchors.ratios", join(&m.anchors.ratios)),
            ("rpn.batch", m.rpn.batch.to_string()),
            ("rpn.pos_fraction", m.rpn.pos_fraction.to_string()),
            ("rpn.pos_iou", m.rpn.pos_iou.to_string()),
            ("rpn.neg_iou", m.rpn.neg_iou.to_string()),
            ("rpn.pre_nms", m.rpn.pre_nms.to_string()),
            ("rpn.post_nms", m.rpn.post_nms.to_string()),
            ("rpn.nms_iou", m.rpn.nms_iou.to_string()),
            ("rcnn.batch", m.rcnn.batch.to_string()),
            ("rcnn.pos_fraction", m.rcnn.pos_fraction.to_string()),
            ("rcnn.hidden", m.rcnn.hidden.to_string()),
            ("rcnn.roi_size", m.rcnn.roi_size.to_string()),
            ("cascade.stages", m.cascade.stages.to_string()),
            ("cascade.lambda", m.cascade.lambda.to_string()),
            ("cascade.iou_thresholds", join(&m.cascade.iou_thresholds)),
            ("test.score_threshold", m.test.score_threshold.to_string()),
            ("test.nms_iou", m.test.nms_iou.to_string()),
            ("test.max_detections", m.test.max_detections.to_string()),
            ("test.pre_nms", m.test.pre_nms.to_string()),
            ("test.post_nms", m.test.post_nms.to_string()),
            ("optimizer.lr_schedule", sched.join(", ")),
            ("optimizer.momentum", self.optimizer.momentum.to_string()),
            ("optimizer.weight_decay", self.optimizer.weight_decay.to_string()),
            ("input.short_side", self.input.short_side.to_string()),
            ("input.flip_probability", self.input.flip_probability.to_string()),
            ("train.images", self.train.images.to_string()),
            ("train.image_size", self.train.image_size.to_string()),
            ("train.max_objects", self.train.max_objects.to_string()),
            ("train.iterations", self.train.iterations.to_string()),
            ("train.images_per_step", self.train.images_per_step.to_string()),
            ("train.log_interval", self.train.log_interval.to_string()),
            ("train.eval_interval", self.train.eval_interval.to_string()),
            ("run.seed", self.seed.to_string()),
        ]
    }

    /// Parses and validates. `source` names the input in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse { path: source.to_string(), line: i + 1, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if o.lr_schedule.is_empty() || o.lr_schedule.iter().any(|&(n, lr)| n == 0 || !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("optimizer.lr_schedule needs phases with iterations ≥ 1 and lr > 0".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config("optimizer.momentum must lie in [0, 1)".into()));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config("optimizer.weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.input.flip_probability) {
            return Err(Error::Config("input.flip_probability must lie in [0, 1]".into()));
        }
        if self.input.short_side < 32 {
            return Err(Error::Config("input.short_side must be at least 32".into()));
        }
        let t = &self.train;
        if t.images == 0 || t.images_per_step == 0 || t.image_size < 32 || !t.image_size.is_multiple_of(32) {
            return Err(Error::Config(
                "train.images and train.images_per_step must be ≥ 1, train.image_size a positive multiple of 32".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text, "t").unwrap(), cfg);
        assert!(text.contains("optimizer.lr_schedule = 70000:0.00125, 15000:0.000125\n"));
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# toy\nfusion.mode = add   # trailing\nanchors.base_sizes = 16, 32, 64, 128\nfusion.add_p6 = false\nrun.seed = 7\n";
        let cfg = RunConfig::parse(text, "t").unwrap();
        assert_eq!(cfg.model.fusion.mode, FusionMode::Add);
        assert_eq!(cfg.model.anchors.strides, vec![4, 8, 16, 32]);
        assert_eq!(cfg.seed, 7);
        assert_eq!(RunConfig::parse(&cfg.to_text(), "t").unwrap(), cfg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("run.seed = 1\nbogus.key = 3\n", "c.cfg").unwrap_err();
        assert_eq!(err.to_string(), "c.cfg:2: unknown key \"bogus.key\"");
        assert!(RunConfig::parse("run.seed = 1\nrun.seed = 2\n", "c").is_err());
        assert!(RunConfig::parse("optimizer.momentum = 1.0\n", "c").is_err());
        assert!(RunConfig::parse("fusion.add_p6 = maybe\n", "c").is_err());
    }

    #[test]
    fn schedule_lookup() {
        let o = OptimizerConfig { lr_schedule: vec![(3, 0.1), (2, 0.01)], ..Default::default() };
        let lrs: Vec<f64> = (0..7).map(|i| o.lr_at(i)).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01]);
    }
}
