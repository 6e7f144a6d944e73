//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dense_fpn::geometry::{BBox, Detection, GtBox};
use rand::{Rng, RngExt};

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let area = |x: &BBox| (x.x2 - x.x1).max(0.0) * (x.y2 - x.y1).max(0.0);
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let union = area(a) + area(b) - ix * iy;
    if union > 0.0 {
        ix * iy / union
    } else {
        0.0
    }
}

/// Repeatedly keep the best remaining detection and drop every remaining
/// same-class detection overlapping it by more than `thr`.
pub fn ref_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for k in 1..alive.len() {
            if dets[alive[k]].score > dets[alive[best]].score {
                best = k;
            }
        }
        let b = dets[alive.remove(best)];
        alive.retain(|&i| dets[i].class_id != b.class_id || ref_iou(&dets[i].bbox, &b.bbox) <= thr);
        out.push(b);
    }
    out
}

const THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

fn top_k(dets: &[Detection], k: usize) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // insertion sort: stable, so equal scores keep input order
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j]].score > dets[idx[j - 1]].score {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx.into_iter().take(k).map(|i| dets[i]).collect()
}

/// `Some(true)` hit, `Some(false)` miss, `None` matched an ignored region.
fn greedy(dets: &[Detection], gts: &[GtBox], class: usize, thr: f64) -> Vec<(f64, Option<bool>)> {
    let cands: Vec<&GtBox> = gts.iter().filter(|g| g.ignore || g.class_id == class).collect();
    let mut used = vec![false; cands.len()];
    let mut out = Vec::new();
    for d in dets.iter().filter(|d| d.class_id == class) {
        let mut pick: Option<usize> = None;
        for (j, g) in cands.iter().enumerate() {
            let v = ref_iou(&d.bbox, &g.bbox);
            if !used[j] && v >= thr && pick.is_none_or(|p| v > ref_iou(&d.bbox, &cands[p].bbox)) {
                pick = Some(j);
            }
        }
        let flag = match pick {
            Some(j) => {
                used[j] = true;
                if cands[j].ignore {
                    None
                } else {
                    Some(true)
                }
            }
            None => Some(false),
        };
        out.push((d.score, flag));
    }
    out
}

fn ref_ap(mut pooled: Vec<(f64, usize, usize, bool)>, npos: usize) -> f64 {
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pr = Vec::new();
    let mut tp = 0;
    for (i, p) in pooled.iter().enumerate() {
        tp += usize::from(p.3);
        pr.push((tp as f64 / (i + 1) as f64, tp as f64 / npos as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        sum += pr.iter().filter(|(_, rec)| *rec >= target).map(|(p, _)| *p).fold(0.0, f64::max);
    }
    sum / 101.0
}

/// `[AP, AP50, AP75, AR1, AR10, AR100, AR500]` by direct enumeration.
pub fn ref_evaluate(dets: &BTreeMap<String, Vec<Detection>>, gts: &BTreeMap<String, Vec<GtBox>>) -> [f64; 7] {
    let images: Vec<(&Vec<GtBox>, Vec<Detection>)> =
        gts.iter().map(|(id, g)| (g, top_k(dets.get(id).map_or(&[][..], |d| d), 500))).collect();
    let npos = |c: usize| images.iter().flat_map(|i| i.0.iter()).filter(|g| !g.ignore && g.class_id == c).count();
    let classes: Vec<usize> = (0..10).filter(|&c| npos(c) > 0).collect();
    let nc = classes.len() as f64;

    let mut ap_t = [0.0; 10];
    for (ti, &t) in THRESHOLDS.iter().enumerate() {
        for &c in &classes {
            let mut pooled = Vec::new();
            for (ii, (g, d)) in images.iter().enumerate() {
                for (k, (s, f)) in greedy(d, g, c, t).into_iter().enumerate() {
                    if let Some(hit) = f {
                        pooled.push((s, ii, k, hit));
                    }
                }
            }
            ap_t[ti] += ref_ap(pooled, npos(c)) / nc;
        }
    }
    let ar = |k: usize| {
        let mut total = 0.0;
        for &t in &THRESHOLDS {
            for &c in &classes {
                let tp: usize = images
                    .iter()
                    .map(|(g, d)| greedy(&d[..d.len().min(k)], g, c, t).iter().filter(|x| x.1 == Some(true)).count())
                    .sum();
                total += tp as f64 / npos(c) as f64;
            }
        }
        total / (10.0 * nc)
    };
    [ap_t.iter().sum::<f64>() / 10.0, ap_t[0], ap_t[5], ar(1), ar(10), ar(100), ar(500)]
}

fn jitter(rng: &mut impl Rng, b: &BBox, amount: f64) -> BBox {
    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
    let mut d = || rng.random_range(-amount..=amount);
    BBox::new(b.x1 + d() * w, b.y1 + d() * h, b.x2 + d() * w, b.y2 + d() * h)
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
    BBox::new(x, y, x + rng.random_range(4.0..40.0), y + rng.random_range(4.0..40.0))
}

/// Up to 10 images, each with up to 20 detections and up to 10 annotated
/// objects over a few classes. Scores are rounded to create ties.
pub fn random_eval_instance(rng: &mut impl Rng) -> (BTreeMap<String, Vec<Detection>>, BTreeMap<String, Vec<GtBox>>) {
    let mut dets = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for i in 0..rng.random_range(1..=10usize) {
        let mut g: Vec<GtBox> = (0..rng.random_range(0..=10usize))
            .map(|_| {
                let b = random_box(rng);
                if rng.random_bool(0.15) {
                    GtBox::ignored(b)
                } else {
                    GtBox::new(b, rng.random_range(0..4))
                }
            })
            .collect();
        if i == 0 {
            g.push(GtBox::new(random_box(rng), 0));
        }
        let d: Vec<Detection> = (0..rng.random_range(0..=20usize))
            .map(|_| {
                let (b, c) = if !g.is_empty() && rng.random_bool(0.7) {
                    let src = g[rng.random_range(0..g.len())];
                    let c = if rng.random_bool(0.8) { src.class_id } else { rng.random_range(0..4) };
                    (jitter(rng, &src.bbox, 0.2), c)
                } else {
                    (random_box(rng), rng.random_range(0..4))
                };
                let b = BBox::new(b.x1.min(b.x2), b.y1.min(b.y2), b.x1.max(b.x2), b.y1.max(b.y2));
                let s = (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0;
                Detection::new(b, s, c).unwrap()
            })
            .collect();
        let id = format!("img{i:02}");
        dets.insert(id.clone(), d);
        gts.insert(id, g);
    }
    (dets, gts)
}

/// Parameter count of the dense branches for one ablation row, from layer
/// shapes: a 1×1 reduction per coarser backbone level plus a 3×3 fusion
/// conv over the merged maps.
pub fn closed_form_dense_params(backbone: [usize; 4], out: usize, p2: bool, p3: bool, concat: bool) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let branch = |level: usize| {
        let coarser = &backbone[level - 1..];
        let merged = if concat { (coarser.len() + 1) * out } else { out };
        coarser.iter().map(|&c| conv(c, out, 1)).sum::<usize>() + conv(merged, out, 3)
    };
    usize::from(p2) * branch(2) + usize::from(p3) * branch(3)
}

pub fn closed_form_baseline_params(backbone: [usize; 4], out: usize) -> usize {
    backbone.iter().map(|&c| c * out + out).sum::<usize>() + 4 * (out * out * 9 + out)
}
