//! Forward and backward kernels for the spatial operators. All loops run
//! in a fixed order so results are bit-reproducible.

use crate::tensor::Real;

/// Unfolds one (C, H, W) image into a (C·k·k, H·W) column matrix for a
/// stride-1 same-padded k×k window.
pub(crate) fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let img = &src[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &img[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { T::zero() } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the image.
pub(crate) fn col2im_add<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let img = &mut dst[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut img[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &src[y * w..(y + 1) * w];
                    for (x, &v) in srow.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            drow[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation taps along one axis for half-pixel bilinear upsampling
/// by an integer factor: `(lower index, upper index, upper weight)`.
pub(crate) fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = if i0 == len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// 2×2 stride-2 max pooling of one plane; records the flat argmax of each
/// window (first maximum in row-major scan order wins ties).
pub(crate) fn max_pool2_plane<T: Real>(src: &[T], h: usize, w: usize, out: &mut [T], arg: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = 2 * oy * w + 2 * ox;
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                let i = (2 * oy + dy) * w + 2 * ox + dx;
                if src[i] > src[best] {
                    best = i;
                }
            }
            out[oy * ow + ox] = src[best];
            arg[oy * ow + ox] = best as u32;
        }
    }
}
