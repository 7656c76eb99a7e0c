//! Pastes a masked foreground onto a background canvas.

use rand::Rng;

use crate::tensor::{Shape, Tensor};

pub const MIN_AREA_FRACTION: f64 = 0.05;
pub const MAX_AREA_FRACTION: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 16;

/// One training example; every tensor has batch extent 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeSample {
    /// `I_s`, `[1, 3, H, W]`.
    pub background: Tensor,
    /// `I_c`, `[1, 3, H, W]`.
    pub composite: Tensor,
    /// `M`, `[1, 1, H, W]` with values in {0, 1}.
    pub mask: Tensor,
}

impl CompositeSample {
    pub fn area_fraction(&self) -> f64 {
        self.mask.sum_f64() / self.mask.numel() as f64
    }
}

/// Why a foreground could not be pasted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skip {
    pub reason: String,
}

/// Bilinear resize of a `[1, C, h, w]` tensor (half-pixel centers, clamped edges).
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    if s.h == out_h && s.w == out_w {
        return t.clone();
    }
    let axis = |dst: usize, src_len: usize, out_len: usize| {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / out_len as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..out_h).map(|y| axis(y, s.h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, s.w, out_w)).collect();
    Tensor::from_fn(s.with_spatial(out_h, out_w), |n, c, y, x| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = t.at(n, c, y0, x0) * (1.0 - fx) + t.at(n, c, y0, x1) * fx;
        let bottom = t.at(n, c, y1, x0) * (1.0 - fx) + t.at(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize followed by `> 0.5` binarization.
pub fn resize_mask_nearest(mask: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = mask.shape();
    let src = |dst: usize, src_len: usize, out_len: usize| ((dst * 2 + 1) * src_len / (2 * out_len)).min(src_len - 1);
    Tensor::from_fn(s.with_spatial(out_h, out_w), |n, c, y, x| (mask.at(n, c, src(y, s.h, out_h), src(x, s.w, out_w)) > 0.5) as u8 as f32)
}

/// Bounding box `(top, left, height, width)` of the nonzero mask pixels.
pub fn mask_bbox(mask: &Tensor) -> Option<(usize, usize, usize, usize)> {
    let s = mask.shape();
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..s.h {
        for x in 0..s.w {
            if mask.at(0, 0, y, x) > 0.5 {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    (y0 != usize::MAX).then(|| (y0, x0, y1 - y0 + 1, x1 - x0 + 1))
}

fn crop(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(t.shape().with_spatial(h, w), |n, c, y, x| t.at(n, c, top + y, left + x))
}

/// Builds a `size x size` composite: the background is resized to the canvas,
/// the foreground is cropped to its mask box, rescaled so the pasted mask
/// covers a uniformly drawn fraction of the canvas within
/// `[MIN_AREA_FRACTION, MAX_AREA_FRACTION]`, and placed uniformly.
pub fn composite<R: Rng>(fg: &Tensor, fg_mask: &Tensor, bg: &Tensor, size: usize, rng: &mut R) -> Result<CompositeSample, Skip> {
    let skip = |reason: String| Skip { reason };
    let (top, left, bh, bw) = mask_bbox(fg_mask).ok_or_else(|| skip("foreground mask is empty".into()))?;
    let fg = crop(fg, top, left, bh, bw);
    let fg_mask = crop(fg_mask, top, left, bh, bw);
    let fill = fg_mask.sum_f64() / (bh * bw) as f64;
    let canvas = (size * size) as f64;
    let max_scale = size as f64 / bh.max(bw) as f64;
    let max_fraction = fill * (bh * bw) as f64 * max_scale * max_scale / canvas;
    let hi = MAX_AREA_FRACTION.min(max_fraction);
    if hi < MIN_AREA_FRACTION {
        return Err(skip(format!("foreground can cover at most {max_fraction:.4} of the canvas")));
    }
    let background = resize_bilinear(bg, size, size);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let target = rng.random_range(MIN_AREA_FRACTION..=hi);
        let scale = (target * canvas / (fill * (bh * bw) as f64)).sqrt().min(max_scale);
        let nh = ((bh as f64 * scale).round() as usize).clamp(1, size);
        let nw = ((bw as f64 * scale).round() as usize).clamp(1, size);
        let pasted_mask = resize_mask_nearest(&fg_mask, nh, nw);
        let fraction = pasted_mask.sum_f64() / canvas;
        if !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&fraction) {
            continue;
        }
        let pasted = resize_bilinear(&fg, nh, nw);
        let oy = rng.random_range(0..=size - nh);
        let ox = rng.random_range(0..=size - nw);
        let inside = |y: usize, x: usize| y >= oy && y < oy + nh && x >= ox && x < ox + nw && pasted_mask.at(0, 0, y - oy, x - ox) > 0.5;
        let mask = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| inside(y, x) as u8 as f32);
        let composite = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
            if inside(y, x) {
                pasted.at(0, c, y - oy, x - ox)
            } else {
                background.at(0, c, y, x)
            }
        });
        return Ok(CompositeSample { background, composite, mask });
    }
    Err(skip(format!("no scale in {PLACEMENT_ATTEMPTS} attempts gave an area fraction in range")))
}
