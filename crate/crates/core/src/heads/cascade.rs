use super::roi::roi_align;
use super::{CascadeConfig, RcnnConfig};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_box, BBox};
use crate::nn::{Init, Linear};
use crate::tensor::Real;

const CLS_GAIN: f64 = 0.1;
const REG_GAIN: f64 = 0.01;

/// One cascade stage: RoI features → two ReLU hidden layers → class
/// logits and class-agnostic box deltas.
#[derive(Debug, Clone)]
pub struct StageHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

#[derive(Debug, Clone)]
pub struct CascadeHead {
    pub stages: Vec<StageHead>,
    pub roi_size: usize,
}

/// Output of one stage on a set of input boxes.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub boxes_in: Vec<BBox>,
    /// `(R, classes)` logits.
    pub class_logits: Var,
    /// `(R, 4)` deltas.
    pub box_deltas: Var,
    /// Decoded and clipped boxes; a box whose refinement collapses keeps
    /// its input.
    pub refined: Vec<BBox>,
}

impl StageHead {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        stage: usize,
        in_features: usize,
        hidden: usize,
        classes: usize,
    ) -> Result<Self> {
        let name = |l: &str| format!("cascade.stage{stage}.{l}");
        Ok(Self {
            fc1: Linear::new(store, init, &name("fc1"), in_features, hidden, 1.0)?,
            fc2: Linear::new(store, init, &name("fc2"), hidden, hidden, 1.0)?,
            cls: Linear::new(store, init, &name("cls"), hidden, classes, CLS_GAIN)?,
            reg: Linear::new(store, init, &name("reg"), hidden, 4, REG_GAIN)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params() + self.cls.num_params() + self.reg.num_params()
    }
}

impl CascadeHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        channels: usize,
        cascade: &CascadeConfig,
        rcnn: &RcnnConfig,
    ) -> Result<Self> {
        cascade.validate()?;
        rcnn.validate()?;
        let in_features = channels * rcnn.roi_size * rcnn.roi_size;
        let stages = (1..=cascade.stages)
            .map(|t| StageHead::new(store, init, t, in_features, rcnn.hidden, cascade.num_classes))
            .collect::<Result<_>>()?;
        Ok(Self { stages, roi_size: rcnn.roi_size })
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(StageHead::num_params).sum()
    }

    /// Runs stage `t` (0-based) on `boxes`. `levels` are P2..P5.
    pub fn stage_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        levels: &[Var],
        t: usize,
        boxes: &[BBox],
        image_size: (usize, usize),
    ) -> Result<StageOutput> {
        let head = self
            .stages
            .get(t)
            .ok_or_else(|| Error::invalid("cascade", format!("stage {t} out of range for {} stages", self.stages.len())))?;
        let feats = roi_align(tape, levels, boxes, self.roi_size)?;
        let h = head.fc1.forward(tape, store, feats)?;
        let h = tape.relu(h);
        let h = head.fc2.forward(tape, store, h)?;
        let h = tape.relu(h);
        let class_logits = head.cls.forward(tape, store, h)?;
        let box_deltas = head.reg.forward(tape, store, h)?;
        let d = tape.value(box_deltas).data();
        let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
        let refined = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let delta = std::array::from_fn(|k| d[i * 4 + k].as_f64());
                let r = clip_box(&decode_box(b, &delta), iw, ih);
                if r.width() > 0.0 && r.height() > 0.0 && r.x1.is_finite() && r.y1.is_finite() {
                    r
                } else {
                    *b
                }
            })
            .collect();
        Ok(StageOutput { boxes_in: boxes.to_vec(), class_logits, box_deltas, refined })
    }
}

/// Runs all stages, stage `t + 1` consuming the refined boxes of stage
/// `t`. Needs at least one proposal.
pub fn cascade_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &CascadeHead,
    levels: &[Var],
    proposals: &[BBox],
    image_size: (usize, usize),
) -> Result<Vec<StageOutput>> {
    if proposals.is_empty() {
        return Err(Error::invalid("cascade_forward", "no proposals"));
    }
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(head.stages.len());
    for t in 0..head.stages.len() {
        let boxes = outputs.last().map_or(proposals, |o| &o.refined[..]).to_vec();
        outputs.push(head.stage_forward(tape, store, levels, t, &boxes, image_size)?);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(stages: usize) -> (ParamStore<f64>, CascadeHead) {
        let mut store = ParamStore::new();
        let cascade = CascadeConfig {
            stages,
            iou_thresholds: [0.5, 0.6, 0.7][..stages].to_vec(),
            ..CascadeConfig::default()
        };
        let rcnn = RcnnConfig { hidden: 16, roi_size: 3, ..RcnnConfig::default() };
        let head = CascadeHead::new(&mut store, &mut Init::new(5), 2, &cascade, &rcnn).unwrap();
        (store, head)
    }

    fn levels(tape: &mut Tape<f64>) -> Vec<Var> {
        [(16, 16), (8, 8), (4, 4), (2, 2)]
            .iter()
            .map(|&(h, w)| tape.leaf(Tensor::from_fn(&[1, 2, h, w], |i| ((i * 5) % 7) as f64 / 7.0)))
            .collect()
    }

    #[test]
    fn one_output_per_stage() {
        for t in [1, 3] {
            let (store, head) = setup(t);
            let mut tape = Tape::new();
            let lv = levels(&mut tape);
            let props = [BBox::new(4.0, 4.0, 30.0, 20.0), BBox::new(10.0, 12.0, 60.0, 64.0)];
            let outs = cascade_forward(&mut tape, &store, &head, &lv, &props, (64, 64)).unwrap();
            assert_eq!(outs.len(), t);
            assert_eq!(tape.shape(outs[0].class_logits), &[2, 11]);
            assert_eq!(tape.shape(outs[0].box_deltas), &[2, 4]);
            assert_eq!(outs[0].boxes_in, props.to_vec());
        }
    }

    #[test]
    fn zero_regression_keeps_boxes() {
        let (mut store, head) = setup(3);
        for s in &head.stages {
            store.value_mut(s.reg.weight).data_mut().fill(0.0);
            store.value_mut(s.reg.bias).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let lv = levels(&mut tape);
        let props = [BBox::new(4.25, 4.5, 30.0, 20.125), BBox::new(10.0, 12.0, 60.0, 64.0)];
        let outs = cascade_forward(&mut tape, &store, &head, &lv, &props, (64, 64)).unwrap();
        for t in 1..3 {
            assert_eq!(outs[t].boxes_in, outs[t - 1].boxes_in);
            assert_eq!(outs[t].boxes_in, outs[t - 1].refined);
        }
    }

    #[test]
    fn empty_proposals_error() {
        let (store, head) = setup(1);
        let mut tape = Tape::new();
        let lv = levels(&mut tape);
        assert!(cascade_forward(&mut tape, &store, &head, &lv, &[], (64, 64)).is_err());
    }
}
