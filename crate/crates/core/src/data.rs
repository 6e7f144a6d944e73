//! Synthetic rectangle scenes and the two input transforms used in
//! training: short-side resizing and horizontal flipping.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::geometry::{BBox, GtBox, NUM_CLASSES};
use crate::tensor::Tensor;

pub const BACKGROUND_LEVEL: f32 = 0.5;

/// RGB fill of each class in synthetic scenes.
pub const CLASS_COLORS: [[f32; 3]; NUM_CLASSES] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
];

const MIN_SIDE: usize = 12;
const PLACEMENT_TRIES: usize = 10_000;

/// A uniform gray image with `n_objects` non-overlapping solid rectangles
/// on integer pixel bounds. Rectangle sides range from 12 px to 40% of the
/// image side. Returns the `(1, 3, H, W)` image and exact boxes.
pub fn synth_scene(seed: u64, size: (usize, usize), n_objects: usize) -> Result<(Tensor<f32>, Vec<GtBox>)> {
    let (h, w) = size;
    let max_side = |len: usize| (len * 2 / 5).max(MIN_SIDE);
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid("synth_scene", format!("image {h}x{w} is smaller than {MIN_SIDE} px")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut rects: Vec<([usize; 4], usize)> = Vec::with_capacity(n_objects);
    let mut tries = 0;
    while rects.len() < n_objects {
        tries += 1;
        if tries > PLACEMENT_TRIES {
            return Err(Error::invalid("synth_scene", format!("cannot place {n_objects} rectangles in {h}x{w}")));
        }
        let rw = rng.random_range(MIN_SIDE..=max_side(w).min(w));
        let rh = rng.random_range(MIN_SIDE..=max_side(h).min(h));
        let x = rng.random_range(0..=w - rw);
        let y = rng.random_range(0..=h - rh);
        let r = [x, y, x + rw, y + rh];
        let clear = rects.iter().all(|(o, _)| r[2] <= o[0] || o[2] <= r[0] || r[3] <= o[1] || o[3] <= r[1]);
        if clear {
            rects.push((r, rng.random_range(0..NUM_CLASSES)));
        }
    }
    let plane = h * w;
    let mut data = vec![BACKGROUND_LEVEL; 3 * plane];
    for &([x1, y1, x2, y2], class) in &rects {
        for (c, &v) in CLASS_COLORS[class].iter().enumerate() {
            for y in y1..y2 {
                data[c * plane + y * w + x1..c * plane + y * w + x2].fill(v);
            }
        }
    }
    let gts = rects
        .iter()
        .map(|&([x1, y1, x2, y2], c)| GtBox::new(BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64), c))
        .collect();
    Ok((Tensor::new(&[1, 3, h, w], data)?, gts))
}

/// Bilinear resize with half-pixel centers.
fn resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = image.dims4("resize")?;
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let src = |dst: usize, out: usize, len: usize| {
        let s = ((dst as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(len - 1), (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| src(y, out_h, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| src(x, out_w, w)).collect();
    let d = image.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in d.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

fn pad_to_32(image: Tensor<f32>) -> Result<Tensor<f32>> {
    let [n, c, h, w] = image.dims4("pad")?;
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    if (ph, pw) == (h, w) {
        return Ok(image);
    }
    let mut out = vec![0f32; n * c * ph * pw];
    for (src, dst) in image.data().chunks(h * w).zip(out.chunks_mut(ph * pw)) {
        for y in 0..h {
            dst[y * pw..y * pw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Tensor::new(&[n, c, ph, pw], out)
}

/// Scales the image so its shorter side is `target`, scales the boxes by
/// the same factor, then zero-pads bottom and right to multiples of 32.
pub fn resize_short_side(image: &Tensor<f32>, gts: &[GtBox], target: usize) -> Result<(Tensor<f32>, Vec<GtBox>)> {
    let [_, _, h, w] = image.dims4("resize_short_side")?;
    if target == 0 {
        return Err(Error::invalid("resize_short_side", "target must be positive"));
    }
    let scale = target as f64 / h.min(w) as f64;
    let (nh, nw) = ((h as f64 * scale).round().max(1.0) as usize, (w as f64 * scale).round().max(1.0) as usize);
    let resized = pad_to_32(resize(image, nh, nw)?)?;
    let boxes = gts
        .iter()
        .map(|g| GtBox { bbox: g.bbox.scale(scale, scale), ..*g }).collect();
    Ok((resized, boxes))
}

/// Mirrors the image left to right; boxes map `x → W − x`.
pub fn hflip(image: &Tensor<f32>, gts: &[GtBox]) -> Result<(Tensor<f32>, Vec<GtBox>)> {
    let [n, c, h, w] = image.dims4("hflip")?;
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    let wf = w as f64;
    let boxes =
        gts.iter().map(|g| GtBox { bbox: BBox::new(wf - g.bbox.x2, g.bbox.y1, wf - g.bbox.x1, g.bbox.y2), ..*g }).collect();
    Ok((Tensor::new(&[n, c, h, w], data)?, boxes))
}

/// Flips with probability `p` drawn from `seed`; reports whether it did.
pub fn random_hflip(image: &Tensor<f32>, gts: &[GtBox], p: f64, seed: u64) -> Result<(Tensor<f32>, Vec<GtBox>, bool)> {
    let flip = Xoshiro256PlusPlus::seed_from_u64(seed).random::<f64>() < p;
    if flip {
        let (img, boxes) = hflip(image, gts)?;
        Ok((img, boxes, true))
    } else {
        Ok((image.clone(), gts.to_vec(), false))
    }
}
