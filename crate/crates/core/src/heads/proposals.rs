use crate::geometry::{clip_box, decode_box, nms_indices, BBox};

/// Smallest side (pixels) a decoded proposal may have.
pub const MIN_PROPOSAL_SIZE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Object probability.
    pub score: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes and clips every anchor, drops boxes with a side below one
/// pixel, keeps the `pre_nms` best by objectness, suppresses overlaps
/// above `nms_iou` and returns at most `post_nms` proposals, best first.
pub fn generate_proposals(
    logits: &[f64],
    deltas: &[[f64; 4]],
    anchors: &[BBox],
    image_size: (usize, usize),
    pre_nms: usize,
    post_nms: usize,
    nms_iou: f64,
) -> Vec<Proposal> {
    debug_assert!(logits.len() == anchors.len() && deltas.len() == anchors.len());
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut cands: Vec<(usize, BBox)> = anchors
        .iter()
        .zip(deltas)
        .enumerate()
        .map(|(i, (a, d))| (i, clip_box(&decode_box(a, d), w, h)))
        .filter(|(_, b)| b.width() >= MIN_PROPOSAL_SIZE && b.height() >= MIN_PROPOSAL_SIZE)
        .collect();
    cands.sort_by(|a, b| logits[b.0].total_cmp(&logits[a.0]).then(a.0.cmp(&b.0)));
    cands.truncate(pre_nms);
    let boxes: Vec<BBox> = cands.iter().map(|c| c.1).collect();
    let scores: Vec<f64> = cands.iter().map(|c| logits[c.0]).collect();
    let keep = nms_indices(&boxes, &scores, &vec![0; boxes.len()], nms_iou, post_nms);
    keep.into_iter().map(|k| Proposal { bbox: boxes[k], score: sigmoid(scores[k]) }).collect()
}
