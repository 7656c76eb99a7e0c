//! Resampling, padding and channel concatenation.

use super::{OpKind, PadMode, Tape, Var};
use crate::tensor::{Element, Tensor, TensorError};

/// Source index of position `i` (may be negative or past the end) when an
/// axis of length `n` is mirrored without repeating its edge sample.
pub(crate) fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// 2x2 average pooling with stride 2 (not recorded on a tape).
pub fn avg_pool2<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let quarter = T::of(0.25);
    Tensor::from_fn(s.with_spatial(s.h / 2, s.w / 2), |n, c, h, w| {
        let (y, xx) = (2 * h, 2 * w);
        (x.at(n, c, y, xx) + x.at(n, c, y, xx + 1) + x.at(n, c, y + 1, xx) + x.at(n, c, y + 1, xx + 1)) * quarter
    })
}

impl<T: Element> Tape<T> {
    /// Pads `[top, bottom, left, right]` pixels on each plane.
    ///
    /// Reflect padding mirrors about the edge sample (the edge itself is not
    /// repeated); paddings wider than the plane keep bouncing.
    pub fn pad(&mut self, x: Var, pads: [usize; 4], mode: PadMode) -> Result<Var, TensorError> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        if s.h == 0 || s.w == 0 {
            return Err(TensorError::invalid("pad", "cannot pad an empty plane"));
        }
        let [top, bottom, left, right] = pads;
        let out_shape = s.with_spatial(s.h + top + bottom, s.w + left + right);
        // Source offset within a plane for every output pixel, None for zeros.
        let map: Vec<Option<usize>> = (0..out_shape.h)
            .flat_map(|oy| (0..out_shape.w).map(move |ox| (oy, ox)))
            .map(|(oy, ox)| {
                let iy = oy as isize - top as isize;
                let ix = ox as isize - left as isize;
                match mode {
                    PadMode::Zero => {
                        (iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w).then(|| iy as usize * s.w + ix as usize)
                    }
                    PadMode::Reflect => Some(mirror_index(iy, s.h) * s.w + mirror_index(ix, s.w)),
                }
            })
            .collect();
        let (in_plane, out_plane) = (s.plane(), out_shape.plane());
        let planes = s.n * s.c;
        let mut out = vec![T::zero(); out_shape.numel()];
        for p in 0..planes {
            let src = &xv.data()[p * in_plane..(p + 1) * in_plane];
            for (o, m) in out[p * out_plane..(p + 1) * out_plane].iter_mut().zip(&map) {
                if let Some(i) = m {
                    *o = src[*i];
                }
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push_op(OpKind::Pad, value, &[x], move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for p in 0..planes {
                let go = &g.data()[p * out_plane..(p + 1) * out_plane];
                let dst = &mut gx[p * in_plane..(p + 1) * in_plane];
                for (gv, m) in go.iter().zip(&map) {
                    if let Some(i) = m {
                        dst[*i] = dst[*i] + *gv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Window of `height x width` pixels starting at (`top`, `left`).
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var, TensorError> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        if top + height > s.h || left + width > s.w {
            return Err(TensorError::invalid("crop", format!("window {height}x{width} at ({top}, {left}) exceeds plane {}x{}", s.h, s.w)));
        }
        let out_shape = s.with_spatial(height, width);
        let value = Tensor::from_fn(out_shape, |n, c, h, w| xv.at(n, c, h + top, w + left));
        Ok(self.push_op(OpKind::Crop, value, &[x], move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                for c in 0..s.c {
                    for h in 0..height {
                        for w in 0..width {
                            gx[s.offset(n, c, h + top, w + left)] = g.at(n, c, h, w);
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, scale: usize) -> Result<Var, TensorError> {
        if scale == 0 {
            return Err(TensorError::invalid("upsample_nearest", "scale must be positive"));
        }
        let xv = self.value(x).clone();
        let s = xv.shape();
        let out_shape = s.with_spatial(s.h * scale, s.w * scale);
        let value = Tensor::from_fn(out_shape, |n, c, h, w| xv.at(n, c, h / scale, w / scale));
        Ok(self.push_op(OpKind::UpsampleNearest, value, &[x], move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                for c in 0..s.c {
                    for h in 0..out_shape.h {
                        for w in 0..out_shape.w {
                            let i = s.offset(n, c, h / scale, w / scale);
                            gx[i] = gx[i] + g.at(n, c, h, w);
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first pixel in raster order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        if s.h < 2 || s.w < 2 {
            return Err(TensorError::invalid("max_pool2", format!("plane {}x{} is smaller than 2x2", s.h, s.w)));
        }
        let out_shape = s.with_spatial(s.h / 2, s.w / 2);
        let mut winners = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..out_shape.h {
                    for w in 0..out_shape.w {
                        let mut best = s.offset(n, c, 2 * h, 2 * w);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = s.offset(n, c, 2 * h + dy, 2 * w + dx);
                            if xv.data()[i] > xv.data()[best] {
                                best = i;
                            }
                        }
                        winners.push(best);
                    }
                }
            }
        }
        let winners = self.branch(winners);
        let out = winners.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push_op(OpKind::MaxPool2, value, &[x], move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for (&i, &gv) in winners.iter().zip(g.data()) {
                gx[i] = gx[i] + gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let first = values.first().ok_or_else(|| TensorError::invalid("concat_channels", "nothing to concatenate"))?.shape();
        let mut channels = 0;
        for v in &values {
            let s = v.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(TensorError::Broadcast { op: "concat_channels", lhs: first, rhs: s });
            }
            channels += s.c;
        }
        let out_shape = first.with_channels(channels);
        let plane = first.plane();
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for v in &values {
                let per = v.shape().c * plane;
                out.extend_from_slice(&v.data()[n * per..(n + 1) * per]);
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.shape().c).collect();
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push_op(OpKind::ConcatChannels, value, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> =
                widths.iter().zip(needs).map(|(&c, &need)| need.then(|| Vec::with_capacity(first.n * c * plane))).collect();
            let gd = g.data();
            let mut offset = 0;
            for _ in 0..first.n {
                for (grad, &c) in grads.iter_mut().zip(&widths) {
                    let len = c * plane;
                    if let Some(grad) = grad {
                        grad.extend_from_slice(&gd[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            grads
        }))
    }
}
