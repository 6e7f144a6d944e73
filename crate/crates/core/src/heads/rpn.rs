use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::tensor::Real;

const OUTPUT_GAIN: f64 = 0.1;

/// Shared 3×3 conv with ReLU followed by objectness and box-delta 1×1
/// convs, applied to every pyramid level with the same weights.
#[derive(Debug, Clone)]
pub struct RpnHead {
    pub conv: Conv,
    pub objectness: Conv,
    pub deltas: Conv,
    pub anchors_per_cell: usize,
    pub num_levels: usize,
}

/// Raw RPN outputs. Per level, `objectness[l]` is `(1, A, H, W)` and
/// `deltas[l]` is `(1, 4A, H, W)` with channel `a·4 + k` holding delta `k`
/// of ratio `a`. Flat anchor order matches [`crate::geometry::AnchorSet`]:
/// level, then row, column, ratio.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub objectness: Vec<Var>,
    pub deltas: Vec<Var>,
    pub extents: Vec<(usize, usize)>,
    pub per_cell: usize,
}

impl RpnHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        channels: usize,
        anchors_per_cell: usize,
        num_levels: usize,
    ) -> Result<Self> {
        if anchors_per_cell == 0 || num_levels == 0 {
            return Err(Error::Config("rpn needs at least one level and one anchor per cell".into()));
        }
        let conv = Conv::new(store, init, "rpn.conv", channels, channels, 3)?;
        let objectness = Conv::with_gain(store, init, "rpn.objectness", channels, anchors_per_cell, 1, OUTPUT_GAIN)?;
        let deltas = Conv::with_gain(store, init, "rpn.deltas", channels, 4 * anchors_per_cell, 1, OUTPUT_GAIN)?;
        Ok(Self { conv, objectness, deltas, anchors_per_cell, num_levels })
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.objectness.num_params() + self.deltas.num_params()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, levels: &[Var]) -> Result<RpnOutput> {
        if levels.len() != self.num_levels {
            return Err(Error::invalid(
                "rpn_forward",
                format!("expected {} pyramid levels, got {}", self.num_levels, levels.len()),
            ));
        }
        let mut out = RpnOutput { objectness: vec![], deltas: vec![], extents: vec![], per_cell: self.anchors_per_cell };
        for &x in levels {
            let [_, _, h, w] = tape.value(x).dims4("rpn_forward")?;
            let hidden = self.conv.forward(tape, store, x)?;
            let hidden = tape.relu(hidden);
            out.objectness.push(self.objectness.forward(tape, store, hidden)?);
            out.deltas.push(self.deltas.forward(tape, store, hidden)?);
            out.extents.push((h, w));
        }
        Ok(out)
    }
}

impl RpnOutput {
    /// Total anchor count.
    pub fn len(&self) -> usize {
        self.extents.iter().map(|&(h, w)| h * w * self.per_cell).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (level, y, x, ratio) of a flat anchor index.
    fn locate(&self, mut i: usize) -> Option<(usize, usize, usize, usize)> {
        for (l, &(h, w)) in self.extents.iter().enumerate() {
            let n = h * w * self.per_cell;
            if i < n {
                let a = i % self.per_cell;
                let cell = i / self.per_cell;
                return Some((l, cell / w, cell % w, a));
            }
            i -= n;
        }
        None
    }

    /// (level, flat offset) of an anchor's objectness logit.
    pub fn objectness_index(&self, anchor: usize) -> Option<(usize, usize)> {
        let (l, y, x, a) = self.locate(anchor)?;
        let (h, w) = self.extents[l];
        Some((l, a * h * w + y * w + x))
    }

    /// (level, flat offset) of delta `k` of an anchor.
    pub fn delta_index(&self, anchor: usize, k: usize) -> Option<(usize, usize)> {
        let (l, y, x, a) = self.locate(anchor)?;
        let (h, w) = self.extents[l];
        Some((l, (a * 4 + k) * h * w + y * w + x))
    }

    /// Objectness logits in flat anchor order.
    pub fn logits<T: Real>(&self, tape: &Tape<T>) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let (l, off) = self.objectness_index(i).expect("in range");
                tape.value(self.objectness[l]).data()[off].as_f64()
            })
            .collect()
    }

    /// Box deltas in flat anchor order.
    pub fn box_deltas<T: Real>(&self, tape: &Tape<T>) -> Vec<[f64; 4]> {
        (0..self.len())
            .map(|i| {
                std::array::from_fn(|k| {
                    let (l, off) = self.delta_index(i, k).expect("in range");
                    tape.value(self.deltas[l]).data()[off].as_f64()
                })
            })
            .collect()
    }

    /// Two-column logits `[0, objectness]` for the chosen anchors, so a
    /// two-way softmax over a row gives the object probability.
    pub fn gather_logits<T: Real>(&self, tape: &mut Tape<T>, anchors: &[usize]) -> Result<Var> {
        let mut index = Vec::with_capacity(anchors.len() * 2);
        for &a in anchors {
            let e = self.objectness_index(a).ok_or_else(|| Error::invalid("rpn", format!("anchor {a} out of range")))?;
            index.push(None);
            index.push(Some(e));
        }
        tape.gather_from(&self.objectness, index, &[anchors.len(), 2])
    }

    /// `(n, 4)` deltas for the chosen anchors.
    pub fn gather_deltas<T: Real>(&self, tape: &mut Tape<T>, anchors: &[usize]) -> Result<Var> {
        let mut index = Vec::with_capacity(anchors.len() * 4);
        for &a in anchors {
            for k in 0..4 {
                let e = self.delta_index(a, k).ok_or_else(|| Error::invalid("rpn", format!("anchor {a} out of range")))?;
                index.push(Some(e));
            }
        }
        tape.gather_from(&self.deltas, index, &[anchors.len(), 4])
    }
}
