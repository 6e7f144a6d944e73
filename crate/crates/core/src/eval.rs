//! Detection metrics: AP over IoU 0.5:0.05:0.95, AP at 0.5 and 0.75, and
//! AR at 1, 10, 100 and 500 detections per image.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, Detection, GtBox, NUM_CLASSES};

pub const MAX_DETECTIONS: usize = 500;
pub const AR_LIMITS: [usize; 4] = [1, 10, 100, 500];
pub const RECALL_POINTS: usize = 101;

pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched an ignored region; counts as neither.
    Ignored,
}

/// Greedy matching of score-sorted detections against one image's
/// annotations. Each detection takes the unmatched annotation of its
/// class with the highest IoU at or above `iou_threshold`; ignored
/// regions are candidates for every class.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_threshold: f64) -> Vec<MatchFlag> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || !(gt.ignore || gt.class_id == d.class_id) {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    if gts[g].ignore {
                        MatchFlag::Ignored
                    } else {
                        MatchFlag::TruePositive
                    }
                }
                None => MatchFlag::FalsePositive,
            }
        })
        .collect()
}

/// 101-point interpolated AP of a ranked hit list (ignored entries
/// already removed). `None` when there is no ground truth.
pub fn average_precision(hits: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|r| {
            let target = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&v| v < target);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ap_5095: f64,
    pub ap_50: f64,
    pub ap_75: f64,
    pub ar_1: f64,
    pub ar_10: f64,
    pub ar_100: f64,
    pub ar_500: f64,
}

impl EvalReport {
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("AP", self.ap_5095),
            ("AP50", self.ap_50),
            ("AP75", self.ap_75),
            ("AR1", self.ar_1),
            ("AR10", self.ar_10),
            ("AR100", self.ar_100),
            ("AR500", self.ar_500),
        ]
    }

    /// Machine-readable `key=value` lines, values as fractions.
    pub fn to_key_values(&self) -> String {
        self.metrics().iter().map(|(k, v)| format!("{}={v}\n", k.to_lowercase())).collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.metrics() {
            writeln!(f, "{k:<6} {:6.2}", 100.0 * v)?;
        }
        Ok(())
    }
}

/// Per-image score-ordered detections capped at [`MAX_DETECTIONS`].
fn ranked(dets: &[Detection]) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    score_order(&scores).into_iter().take(MAX_DETECTIONS).map(|i| dets[i]).collect()
}

struct Ranked<'a> {
    images: Vec<(&'a str, Vec<Detection>, &'a [GtBox])>,
}

impl<'a> Ranked<'a> {
    fn new(dets: &BTreeMap<String, Vec<Detection>>, gts: &'a BTreeMap<String, Vec<GtBox>>) -> Result<Self> {
        if let Some(id) = dets.keys().find(|id| !gts.contains_key(*id)) {
            return Err(Error::Eval(format!("detections for image {id:?} which has no annotations")));
        }
        let images = gts
            .iter()
            .map(|(id, g)| (id.as_str(), dets.get(id).map(|d| ranked(d)).unwrap_or_default(), g.as_slice()))
            .collect();
        Ok(Self { images })
    }

    fn num_gt(&self, class: usize) -> usize {
        self.images.iter().flat_map(|i| i.2).filter(|g| !g.ignore && g.class_id == class).count()
    }

    /// Per image, the class's detections among the top `limit` and their
    /// match flags, in rank order.
    fn matches(&self, class: usize, thr: f64, limit: usize) -> Vec<Vec<(f64, MatchFlag)>> {
        self.images
            .iter()
            .map(|(_, dets, gts)| {
                let mine: Vec<Detection> = dets.iter().take(limit).filter(|d| d.class_id == class).copied().collect();
                let gts: Vec<GtBox> = gts.iter().filter(|g| g.ignore || g.class_id == class).copied().collect();
                let flags = match_detections(&mine, &gts, thr);
                mine.iter().map(|d| d.score).zip(flags).collect()
            })
            .collect()
    }

    fn ap(&self, class: usize, thr: f64) -> Option<f64> {
        let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (img, rows) in self.matches(class, thr, MAX_DETECTIONS).into_iter().enumerate() {
            for (k, (s, f)) in rows.into_iter().enumerate() {
                if f != MatchFlag::Ignored {
                    pooled.push((s, img, k, f == MatchFlag::TruePositive));
                }
            }
        }
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let hits: Vec<bool> = pooled.iter().map(|p| p.3).collect();
        average_precision(&hits, self.num_gt(class))
    }

    fn recall(&self, class: usize, thr: f64, limit: usize) -> Option<f64> {
        let n = self.num_gt(class);
        if n == 0 {
            return None;
        }
        let tp = self.matches(class, thr, limit).iter().flatten().filter(|(_, f)| *f == MatchFlag::TruePositive).count();
        Some(tp as f64 / n as f64)
    }

    fn classes(&self) -> Vec<usize> {
        (0..NUM_CLASSES).filter(|&c| self.num_gt(c) > 0).collect()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Full report over a dataset keyed by image id. Every detection image
/// must be annotated; annotated images without detections count as
/// empty.
pub fn evaluate(dets: &BTreeMap<String, Vec<Detection>>, gts: &BTreeMap<String, Vec<GtBox>>) -> Result<EvalReport> {
    let r = Ranked::new(dets, gts)?;
    let classes = r.classes();
    if classes.is_empty() {
        return Err(Error::Eval("no annotated objects to evaluate against".into()));
    }
    let thresholds = iou_thresholds();
    let ap_at = |thr: f64| mean(classes.iter().map(|&c| r.ap(c, thr).expect("class has ground truth")));
    let ar_at = |limit: usize| {
        mean(thresholds.iter().map(|&t| mean(classes.iter().map(|&c| r.recall(c, t, limit).expect("class has ground truth")))))
    };
    let per_threshold: Vec<f64> = thresholds.iter().map(|&t| ap_at(t)).collect();
    Ok(EvalReport {
        ap_5095: mean(per_threshold.iter().copied()),
        ap_50: per_threshold[0],
        ap_75: per_threshold[5],
        ar_1: ar_at(AR_LIMITS[0]),
        ar_10: ar_at(AR_LIMITS[1]),
        ar_100: ar_at(AR_LIMITS[2]),
        ar_500: ar_at(AR_LIMITS[3]),
    })
}

/// AP over IoU 0.5:0.95 per class; `None` for classes without ground truth.
pub fn per_class_report(
    dets: &BTreeMap<String, Vec<Detection>>,
    gts: &BTreeMap<String, Vec<GtBox>>,
) -> Result<[Option<f64>; NUM_CLASSES]> {
    let r = Ranked::new(dets, gts)?;
    let thresholds = iou_thresholds();
    Ok(std::array::from_fn(|c| {
        let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| r.ap(c, t)).collect();
        aps.map(mean)
    }))
}
