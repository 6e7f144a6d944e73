//! Axis-aligned boxes, anchor tiling, box-delta coding and class-wise NMS.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Number of evaluated object categories.
pub const NUM_CLASSES: usize = 10;

/// Largest log-scale delta accepted by [`decode_box`]; keeps `exp` finite
/// for untrained regressors.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Corner-form box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Clamps a box into `[0, width] × [0, height]`.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> BBox {
    BBox::new(b.x1.clamp(0.0, width), b.y1.clamp(0.0, height), b.x2.clamp(0.0, width), b.y2.clamp(0.0, height))
}

/// Regression target of `gt` relative to `anchor`, center/log-size form.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::invalid("encode_box", format!("anchor has non-positive size {aw}x{ah}")));
    }
    let (gw, gh) = (gt.width(), gt.height());
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::invalid("encode_box", format!("ground truth has non-positive size {gw}x{gh}")));
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    Ok([(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()])
}

/// Inverse of [`encode_box`]. Log-size deltas are clamped to
/// [`MAX_LOG_SCALE`]. Written relative to the anchor corners so that zero
/// deltas return the anchor bit for bit.
pub fn decode_box(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let gx = 0.5 * aw * (1.0 - d[2].min(MAX_LOG_SCALE).exp());
    let gy = 0.5 * ah * (1.0 - d[3].min(MAX_LOG_SCALE).exp());
    let (sx, sy) = (d[0] * aw, d[1] * ah);
    BBox::new(anchor.x1 + sx + gx, anchor.y1 + sy + gy, anchor.x2 + sx - gx, anchor.y2 + sy - gy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("Detection", format!("score {score} outside [0, 1]")));
        }
        if class_id >= NUM_CLASSES {
            return Err(Error::invalid("Detection", format!("class id {class_id} outside 0..{NUM_CLASSES}")));
        }
        if !bbox.is_valid() {
            return Err(Error::invalid("Detection", format!("malformed box {bbox:?}")));
        }
        Ok(Self { bbox, score, class_id })
    }
}

/// One annotated object. Ignored objects take part in evaluation matching
/// but count as neither hits nor misses, and are never training targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub ignore: bool,
}

impl GtBox {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        Self { bbox, class_id, ignore: false }
    }

    pub fn ignored(bbox: BBox) -> Self {
        Self { bbox, class_id: 0, ignore: true }
    }
}

/// Descending score, ascending input index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Greedy suppression over parallel box/score/class slices. Returns kept
/// indices in score order; boxes only suppress boxes of the same class.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], classes: &[usize], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    debug_assert!(boxes.len() == scores.len() && boxes.len() == classes.len());
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.len() >= max_keep {
            break;
        }
        let suppressed = kept.iter().any(|&k| classes[k] == classes[i] && iou(&boxes[k], &boxes[i]) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Class-wise greedy NMS. Output is score-sorted and at most `max_keep`
/// long; ties keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    nms_indices(&boxes, &scores, &classes, iou_threshold, max_keep).into_iter().map(|i| dets[i]).collect()
}

/// Anchor tiling parameters: one base size per pyramid level and a shared
/// set of height:width ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    pub strides: Vec<usize>,
    pub base_sizes: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            strides: vec![4, 8, 16, 32, 64],
            base_sizes: vec![16.0, 32.0, 64.0, 128.0, 256.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorSpec {
    /// Leading `levels` levels of this spec.
    pub fn truncated(&self, levels: usize) -> Self {
        Self {
            strides: self.strides.iter().copied().take(levels).collect(),
            base_sizes: self.base_sizes.iter().copied().take(levels).collect(),
            ratios: self.ratios.clone(),
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.ratios.len()
    }

    /// Anchor shapes (width, height) for one level: equal area per ratio.
    pub fn shapes(&self, level: usize) -> Vec<(f64, f64)> {
        let base = self.base_sizes[level];
        self.ratios.iter().map(|&r| (base * (1.0 / r).sqrt(), base * r.sqrt())).collect()
    }
}

/// Anchors for every pyramid level, ordered (row, column, ratio) within a
/// level.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub levels: Vec<Vec<BBox>>,
    pub extents: Vec<(usize, usize)>,
    pub strides: Vec<usize>,
    pub per_cell: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors concatenated level by level.
    pub fn flat(&self) -> Vec<BBox> {
        self.levels.iter().flatten().copied().collect()
    }

    /// First flat index of each level.
    pub fn level_offsets(&self) -> Vec<usize> {
        self.levels
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.len();
                Some(start)
            })
            .collect()
    }
}

/// Tiles anchors over feature maps of the given (height, width) extents.
/// Anchors are centered on cell centers and are not clipped.
pub fn generate_anchors(level_extents: &[(usize, usize)], image_size: (usize, usize), spec: &AnchorSpec) -> Result<AnchorSet> {
    if level_extents.len() != spec.strides.len() || spec.base_sizes.len() != spec.strides.len() {
        return Err(Error::invalid(
            "generate_anchors",
            format!(
                "{} feature levels but {} strides and {} base sizes",
                level_extents.len(),
                spec.strides.len(),
                spec.base_sizes.len()
            ),
        ));
    }
    if spec.ratios.is_empty() || spec.ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::invalid("generate_anchors", "ratios must be positive and non-empty"));
    }
    let (img_h, img_w) = image_size;
    let mut levels = Vec::with_capacity(level_extents.len());
    for (l, (&(h, w), &stride)) in level_extents.iter().zip(&spec.strides).enumerate() {
        if h * stride != img_h || w * stride != img_w {
            return Err(Error::invalid(
                "generate_anchors",
                format!("level {l}: extent {h}x{w} at stride {stride} does not tile a {img_h}x{img_w} image"),
            ));
        }
        let shapes = spec.shapes(l);
        let s = stride as f64;
        let mut anchors = Vec::with_capacity(h * w * shapes.len());
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (s * (x as f64 + 0.5), s * (y as f64 + 0.5));
                anchors.extend(shapes.iter().map(|&(aw, ah)| BBox::from_center(cx, cy, aw, ah)));
            }
        }
        levels.push(anchors);
    }
    Ok(AnchorSet {
        levels,
        extents: level_extents.to_vec(),
        strides: spec.strides.clone(),
        per_cell: spec.ratios.len(),
    })
}
