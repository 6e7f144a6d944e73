use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{RpnConfig, BACKGROUND};
use crate::geometry::{encode_box, iou, BBox};

/// Training targets for a sampled subset of candidates. Rows are ordered
/// positives first, each group in ascending candidate index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledBatch {
    /// Candidate (anchor or RoI) indices.
    pub indices: Vec<usize>,
    /// Class per row. RPN: 1 = object, 0 = background. RCNN: 0..=9 for
    /// objects, [`BACKGROUND`] otherwise.
    pub labels: Vec<usize>,
    /// Encoded box targets; present exactly on positive rows.
    pub targets: Vec<Option<[f64; 4]>>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignored,
}

fn argmax_iou(b: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    gts.iter().enumerate().map(|(g, gt)| (g, iou(b, gt))).fold(None, |best, (g, v)| match best {
        Some((_, bv)) if bv >= v => best,
        _ => Some((g, v)),
    })
}

/// Anchor labelling: positive when the best IoU reaches `pos_iou` or the
/// anchor ties for the best IoU of some ground truth; negative below
/// `neg_iou`; otherwise ignored. Positives target their best-IoU gt.
pub fn rpn_labels(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Vec<AnchorLabel> {
    let best: Vec<Option<(usize, f64)>> = anchors.iter().map(|a| argmax_iou(a, gts)).collect();
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|b| match *b {
            Some((g, v)) if v >= pos_iou => AnchorLabel::Positive(g),
            Some((_, v)) if v >= neg_iou => AnchorLabel::Ignored,
            _ => AnchorLabel::Negative,
        })
        .collect();
    for gt in gts {
        let top = anchors.iter().map(|a| iou(a, gt)).fold(0.0, f64::max);
        if top <= 0.0 {
            continue;
        }
        for (a, anchor) in anchors.iter().enumerate() {
            if iou(anchor, gt) == top {
                let (g, _) = best[a].expect("gts is non-empty");
                labels[a] = AnchorLabel::Positive(g);
            }
        }
    }
    labels
}

fn draw(mut pool: Vec<usize>, k: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<usize> {
    if pool.len() > k {
        pool.shuffle(rng);
        pool.truncate(k);
    }
    pool.sort_unstable();
    pool
}

/// Splits a batch between positives and negatives: `round(batch ·
/// pos_fraction)` positives and the rest negatives. A side that runs short
/// is made up from the other, so the batch is full whenever there are at
/// least `batch` candidates.
fn sample_split(
    pos: Vec<usize>,
    neg: Vec<usize>,
    batch: usize,
    pos_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let pos_quota = (((batch as f64) * pos_fraction).round() as usize).min(batch);
    let n_pos = pos_quota.max(batch.saturating_sub(neg.len())).min(pos.len());
    let pos = draw(pos, n_pos, &mut rng);
    let neg = draw(neg, batch - pos.len(), &mut rng);
    (pos, neg)
}

/// RPN anchor sampling. Zero ground truths yield an all-negative batch.
pub fn assign_and_sample_rpn(anchors: &[BBox], gts: &[BBox], config: &RpnConfig, seed: u64) -> SampledBatch {
    let labels = rpn_labels(anchors, gts, config.pos_iou, config.neg_iou);
    let pos: Vec<usize> = (0..anchors.len()).filter(|&i| matches!(labels[i], AnchorLabel::Positive(_))).collect();
    let neg: Vec<usize> = (0..anchors.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let (pos, neg) = sample_split(pos, neg, config.batch, config.pos_fraction, seed);
    let mut batch = SampledBatch::default();
    for i in pos {
        let AnchorLabel::Positive(g) = labels[i] else { unreachable!() };
        batch.indices.push(i);
        batch.labels.push(1);
        batch.targets.push(encode_box(&anchors[i], &gts[g]).ok());
    }
    for i in neg {
        batch.indices.push(i);
        batch.labels.push(0);
        batch.targets.push(None);
    }
    batch
}

/// Best-IoU ground truth per box when the IoU reaches `iou_threshold`.
pub fn rcnn_labels(boxes: &[BBox], gts: &[(BBox, usize)], iou_threshold: f64) -> Vec<Option<usize>> {
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();
    boxes
        .iter()
        .map(|b| match argmax_iou(b, &gt_boxes) {
            Some((g, v)) if v >= iou_threshold => Some(g),
            _ => None,
        })
        .collect()
}

/// Second-stage sampling at one cascade threshold. Positives take the
/// class of their best-IoU ground truth; everything else is background.
pub fn assign_and_sample_rcnn(
    boxes: &[BBox],
    gts: &[(BBox, usize)],
    iou_threshold: f64,
    batch_size: usize,
    pos_fraction: f64,
    seed: u64,
) -> SampledBatch {
    let matched = rcnn_labels(boxes, gts, iou_threshold);
    let pos: Vec<usize> = (0..boxes.len()).filter(|&i| matched[i].is_some()).collect();
    let neg: Vec<usize> = (0..boxes.len()).filter(|&i| matched[i].is_none()).collect();
    let (pos, neg) = sample_split(pos, neg, batch_size, pos_fraction, seed);
    let mut batch = SampledBatch::default();
    for i in pos {
        let g = matched[i].expect("positive");
        batch.indices.push(i);
        batch.labels.push(gts[g].1);
        batch.targets.push(encode_box(&boxes[i], &gts[g].0).ok());
    }
    for i in neg {
        batch.indices.push(i);
        batch.labels.push(BACKGROUND);
        batch.targets.push(None);
    }
    batch
}
