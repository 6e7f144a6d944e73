use crate::autodiff::{BinSample, Tap, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Real;

/// Pyramid level (2..=5) a box is pooled from: level 4 at 224 px, one
/// level finer or coarser per halving or doubling of the box scale.
pub fn roi_level(b: &BBox) -> usize {
    let k = (4.0 + (b.area().sqrt() / 224.0).log2()).floor();
    k.clamp(2.0, 5.0) as usize
}

/// Bilinear sampling plan for `size × size` bins per box, one sample at
/// each bin center. `levels` lists the (height, width) and stride of the
/// maps for P2, P3, ... in order.
pub fn plan_roi_bins(boxes: &[BBox], levels: &[((usize, usize), usize)], size: usize) -> Result<Vec<BinSample>> {
    let mut plan = Vec::with_capacity(boxes.len() * size * size);
    for b in boxes {
        if !(b.area() > 0.0) {
            return Err(Error::invalid("roi_align", format!("box {b:?} has zero area")));
        }
        let level = (roi_level(b) - 2).min(levels.len() - 1);
        let ((h, w), stride) = levels[level];
        let s = stride as f64;
        let (bw, bh) = (b.width() / size as f64, b.height() / size as f64);
        for by in 0..size {
            let fy = ((b.y1 + (by as f64 + 0.5) * bh) / s - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ly = fy - y0 as f64;
            for bx in 0..size {
                let fx = ((b.x1 + (bx as f64 + 0.5) * bw) / s - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let lx = fx - x0 as f64;
                let taps = [
                    Tap { offset: y0 * w + x0, weight: (1.0 - ly) * (1.0 - lx) },
                    Tap { offset: y0 * w + x1, weight: (1.0 - ly) * lx },
                    Tap { offset: y1 * w + x0, weight: ly * (1.0 - lx) },
                    Tap { offset: y1 * w + x1, weight: ly * lx },
                ];
                plan.push(BinSample { level, taps });
            }
        }
    }
    Ok(plan)
}

/// Pools `(boxes, C, size, size)` features from P2..P5 (`levels[0]` is
/// P2, stride 4). Differentiable into the pyramid.
pub fn roi_align<T: Real>(tape: &mut Tape<T>, levels: &[Var], boxes: &[BBox], size: usize) -> Result<Var> {
    if boxes.is_empty() {
        return Err(Error::invalid("roi_align", "no boxes to pool"));
    }
    let mut geo = Vec::with_capacity(levels.len());
    for (i, &l) in levels.iter().enumerate() {
        let [_, _, h, w] = tape.value(l).dims4("roi_align")?;
        geo.push(((h, w), 4usize << i));
    }
    if geo.is_empty() {
        return Err(Error::invalid("roi_align", "no feature levels"));
    }
    let plan = plan_roi_bins(boxes, &geo, size)?;
    tape.roi_align(levels, plan, size)
}
