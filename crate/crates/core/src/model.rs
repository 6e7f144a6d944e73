//! The assembled detector: backbone, fusion pyramid, RPN and cascade head.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{dmffpn_forward, FusionConfig, FusionParams, PyramidFeatures};
use crate::geometry::{generate_anchors, nms, AnchorSet, AnchorSpec, BBox, Detection, GtBox, NUM_CLASSES};
use crate::heads::{
    assign_and_sample_rcnn, assign_and_sample_rpn, cascade_forward, generate_proposals, total_loss, CascadeConfig,
    CascadeHead, LossTerms, RcnnConfig, RpnConfig, RpnHead, RpnOutput, SampledBatch, StageOutput, TestConfig,
};
use crate::nn::Init;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub anchors: AnchorSpec,
    pub rpn: RpnConfig,
    pub rcnn: RcnnConfig,
    pub cascade: CascadeConfig,
    pub test: TestConfig,
}

impl ModelConfig {
    /// Number of pyramid levels the RPN sees.
    pub fn num_levels(&self) -> usize {
        4 + usize::from(self.fusion.add_p6)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.rpn.validate()?;
        self.rcnn.validate()?;
        self.cascade.validate()?;
        self.test.validate()?;
        let levels = self.num_levels();
        let a = &self.anchors;
        if a.strides.len() != levels || a.base_sizes.len() != levels {
            return Err(Error::Config(format!(
                "{levels} pyramid levels need {levels} anchor strides and base sizes, got {} and {}",
                a.strides.len(),
                a.base_sizes.len()
            )));
        }
        if a.strides.iter().enumerate().any(|(i, &s)| s != 4 << i) {
            return Err(Error::Config("anchor strides must be 4, 8, 16, 32[, 64]".into()));
        }
        if a.ratios.is_empty() || a.ratios.iter().chain(&a.base_sizes).any(|&v| !(v > 0.0)) {
            return Err(Error::Config("anchor ratios and base sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Targets and boxes fixed ahead of a loss evaluation. With a plan held
/// constant the loss is a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    pub rpn_batch: SampledBatch,
    /// RoIs fed to each stage; row `r` pairs with row `r` of the batch.
    pub stage_rois: Vec<Vec<BBox>>,
    pub stage_batches: Vec<SampledBatch>,
}

#[derive(Debug)]
pub struct TrainingForward {
    pub terms: LossTerms,
    pub plan: TrainingPlan,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub fusion: FusionParams,
    pub rpn: RpnHead,
    pub cascade: CascadeHead,
}

impl Detector {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, init, &config.backbone)?;
        let fusion = FusionParams::new(store, init, backbone.out_channels(), &config.fusion)?;
        let ch = config.fusion.out_channels;
        let rpn = RpnHead::new(store, init, ch, config.anchors.anchors_per_cell(), config.num_levels())?;
        let cascade = CascadeHead::new(store, init, ch, &config.cascade, &config.rcnn)?;
        Ok(Self { config: config.clone(), backbone, fusion, rpn, cascade })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, Self)> {
        let mut store = ParamStore::new();
        let det = Self::new(&mut store, &mut Init::new(seed), config)?;
        Ok((store, det))
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.fusion.num_params() + self.rpn.num_params() + self.cascade.num_params()
    }

    pub fn pyramid<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<PyramidFeatures> {
        self.backbone.check_input(tape.shape(image))?;
        let feats = self.backbone.forward(tape, store, image)?;
        dmffpn_forward(tape, store, &feats, &self.config.fusion, &self.fusion)
    }

    fn anchors_for<T: Real>(&self, tape: &Tape<T>, levels: &[Var], image_size: (usize, usize)) -> Result<AnchorSet> {
        let extents: Vec<(usize, usize)> = levels.iter().map(|&l| (tape.shape(l)[2], tape.shape(l)[3])).collect();
        generate_anchors(&extents, image_size, &self.config.anchors)
    }

    fn image_size(image: &Tensor<impl Real>) -> Result<(usize, usize)> {
        let [_, _, h, w] = image.dims4("detector")?;
        Ok((h, w))
    }

    fn front<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<(PyramidFeatures, RpnOutput, AnchorSet)> {
        let size = Self::image_size(image)?;
        let x = tape.constant(image.clone());
        let pyr = self.pyramid(tape, store, x)?;
        let levels = pyr.levels();
        let rpn = self.rpn.forward(tape, store, &levels)?;
        let anchors = self.anchors_for(tape, &levels, size)?;
        Ok((pyr, rpn, anchors))
    }

    /// Full training forward pass: proposals, per-stage sampling at the
    /// cascade thresholds and the multi-task loss. Ground-truth boxes are
    /// added to the first stage's candidates.
    pub fn training_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        gts: &[GtBox],
        seed: u64,
    ) -> Result<TrainingForward> {
        let cfg = &self.config;
        let size = Self::image_size(image)?;
        let (pyr, rpn, anchors) = self.front(tape, store, image)?;
        let targets: Vec<(BBox, usize)> =
            gts.iter().filter(|g| !g.ignore && g.bbox.area() > 0.0).map(|g| (g.bbox, g.class_id)).collect();
        let gt_boxes: Vec<BBox> = targets.iter().map(|t| t.0).collect();

        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let flat = anchors.flat();
        let rpn_batch = assign_and_sample_rpn(&flat, &gt_boxes, &cfg.rpn, rng.random());

        let proposals = generate_proposals(
            &rpn.logits(tape),
            &rpn.box_deltas(tape),
            &flat,
            size,
            cfg.rpn.pre_nms,
            cfg.rpn.post_nms,
            cfg.rpn.nms_iou,
        );
        let mut candidates: Vec<BBox> = proposals.iter().map(|p| p.bbox).chain(gt_boxes.iter().copied()).collect();
        let mut stage_rois = Vec::new();
        let mut stage_batches = Vec::new();
        let mut outputs = Vec::new();
        for (t, &thr) in cfg.cascade.iou_thresholds.iter().enumerate() {
            if candidates.is_empty() {
                return Err(Error::invalid("training_loss", format!("no candidate boxes for stage {}", t + 1)));
            }
            let batch =
                assign_and_sample_rcnn(&candidates, &targets, thr, cfg.rcnn.batch, cfg.rcnn.pos_fraction, rng.random());
            let rois: Vec<BBox> = batch.indices.iter().map(|&i| candidates[i]).collect();
            let out = self.cascade.stage_forward(tape, store, &pyr.p, t, &rois, size)?;
            candidates = out.refined.clone();
            stage_rois.push(rois);
            stage_batches.push(batch);
            outputs.push(out);
        }
        let terms = total_loss(tape, &stage_batches, &outputs, &rpn_batch, &rpn, cfg.cascade.lambda)?;
        Ok(TrainingForward { terms, plan: TrainingPlan { rpn_batch, stage_rois, stage_batches } })
    }

    /// Loss under a fixed plan. The image is a leaf so its gradient can be
    /// read back as well.
    pub fn loss_with_plan<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        plan: &TrainingPlan,
    ) -> Result<LossTerms> {
        let size = Self::image_size(image)?;
        let (pyr, rpn, _) = self.front(tape, store, image)?;
        let outputs = plan
            .stage_rois
            .iter()
            .enumerate()
            .map(|(t, rois)| self.cascade.stage_forward(tape, store, &pyr.p, t, rois, size))
            .collect::<Result<Vec<StageOutput>>>()?;
        total_loss(tape, &plan.stage_batches, &outputs, &plan.rpn_batch, &rpn, self.config.cascade.lambda)
    }

    /// Inference. Each box's class scores are the mean over all stages of
    /// the stage classifiers' softmax on the last stage's input boxes; the
    /// box itself is the last stage's refinement.
    pub fn detect<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<Detection>> {
        let cfg = &self.config;
        let size = Self::image_size(image)?;
        let mut tape = Tape::new();
        let (pyr, rpn, anchors) = self.front(&mut tape, store, image)?;
        let proposals: Vec<BBox> = generate_proposals(
            &rpn.logits(&tape),
            &rpn.box_deltas(&tape),
            &anchors.flat(),
            size,
            cfg.test.pre_nms,
            cfg.test.post_nms,
            cfg.rpn.nms_iou,
        )
        .into_iter()
        .map(|p| p.bbox)
        .collect();
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let outs = cascade_forward(&mut tape, store, &self.cascade, &pyr.p, &proposals, size)?;
        let last = outs.last().expect("at least one stage");
        let mut logits = vec![last.class_logits];
        for t in 0..outs.len() - 1 {
            logits.push(self.cascade.stage_forward(&mut tape, store, &pyr.p, t, &last.boxes_in, size)?.class_logits);
        }
        let classes = cfg.cascade.num_classes;
        let mut scores = vec![0.0; last.boxes_in.len() * classes];
        for &l in &logits {
            for (row, out) in tape.value(l).data().chunks(classes).zip(scores.chunks_mut(classes)) {
                let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (o, ei) in out.iter_mut().zip(e) {
                    *o += ei / z / logits.len() as f64;
                }
            }
        }
        let mut dets = Vec::new();
        for (i, b) in last.refined.iter().enumerate() {
            for c in 0..NUM_CLASSES {
                let s = scores[i * classes + c].clamp(0.0, 1.0);
                if s > cfg.test.score_threshold {
                    dets.push(Detection::new(*b, s, c)?);
                }
            }
        }
        Ok(nms(&dets, cfg.test.nms_iou, cfg.test.max_detections))
    }
}
