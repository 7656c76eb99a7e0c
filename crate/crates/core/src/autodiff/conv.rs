//! 2-D cross-correlation via im2col and GEMM.

use super::{OpKind, Tape, Var};
use crate::tensor::{gemm, Element, MatLayout, Shape, Tensor, TensorError};

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl ConvOptions {
    pub const fn new(stride: usize, padding: usize, pad_mode: PadMode) -> Self {
        ConvOptions { stride, padding, pad_mode }
    }

    /// Stride 1, zero padding.
    pub const fn same(padding: usize) -> Self {
        ConvOptions::new(1, padding, PadMode::Zero)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tape<T> {
    /// Cross-correlation of `input` `[N, Cin, H, W]` with `weight`
    /// `[Cout, Cin, kH, kW]` plus an optional per-channel `bias` of `Cout`
    /// elements.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var, TensorError> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if opts.stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        if xs.c != ws.c {
            return Err(TensorError::ShapeMismatch { op: "conv2d", dim: "input channels", expected: ws.c, actual: xs.c });
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(TensorError::ShapeMismatch { op: "conv2d", dim: "bias length", expected: ws.n, actual: bs.numel() });
            }
        }
        let (input, pad) = match opts.pad_mode {
            PadMode::Zero => (input, opts.padding),
            PadMode::Reflect if opts.padding == 0 => (input, 0),
            PadMode::Reflect => {
                if opts.padding >= ws.h || opts.padding >= ws.w {
                    return Err(TensorError::invalid(
                        "conv2d",
                        format!("reflect padding {} must be smaller than the kernel", opts.padding),
                    ));
                }
                let p = opts.padding;
                (self.pad(input, [p, p, p, p], PadMode::Reflect)?, 0)
            }
        };
        let xs = self.shape(input);
        let (Some(ho), Some(wo)) = (conv_out_extent(xs.h, ws.h, opts.stride, pad), conv_out_extent(xs.w, ws.w, opts.stride, pad)) else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                dim: "spatial extent",
                expected: ws.h.max(ws.w),
                actual: (xs.h + 2 * pad).min(xs.w + 2 * pad),
            });
        };
        let geo = Geometry { cin: xs.c, h: xs.h, w: xs.w, kh: ws.h, kw: ws.w, stride: opts.stride, pad, ho, wo };
        let cout = ws.n;
        let out_shape = Shape::new(xs.n, cout, ho, wo);
        let xv = self.value(input).clone();
        let wv = self.value(weight).clone();
        let bv = bias.map(|b| self.value(b).clone());

        let k = geo.k();
        let plane = geo.out_plane();
        let in_item = xs.c * xs.h * xs.w;
        let out_item = cout * plane;
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut cols = vec![T::zero(); k * plane];
        for n in 0..xs.n {
            let dst = &mut out[n * out_item..(n + 1) * out_item];
            if let Some(bv) = &bv {
                for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.fill(bv.data()[co]);
                }
            }
            im2col(&xv.data()[n * in_item..(n + 1) * in_item], &geo, &mut cols);
            let beta = if bv.is_some() { T::one() } else { T::zero() };
            gemm(wv.data(), MatLayout::plain(cout, k), &cols, MatLayout::plain(k, plane), dst, beta);
        }
        let value = Tensor::from_parts(out_shape, out);

        let batch = xs.n;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_op(OpKind::Conv2d, value, &inputs, move |g, needs| {
            let gd = g.data();
            let mut gx = needs[0].then(|| vec![T::zero(); xv.numel()]);
            let mut gw = needs[1].then(|| vec![T::zero(); wv.numel()]);
            let mut cols = vec![T::zero(); k * plane];
            for n in 0..batch {
                let gy = &gd[n * out_item..(n + 1) * out_item];
                if let Some(gw) = gw.as_mut() {
                    im2col(&xv.data()[n * in_item..(n + 1) * in_item], &geo, &mut cols);
                    gemm(gy, MatLayout::plain(cout, plane), &cols, MatLayout::transposed(plane, k), gw, T::one());
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(wv.data(), MatLayout::transposed(k, cout), gy, MatLayout::plain(cout, plane), &mut cols, T::zero());
                    col2im_add(&cols, &geo, &mut gx[n * in_item..(n + 1) * in_item]);
                }
            }
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                let gb = needs[2].then(|| {
                    (0..cout)
                        .map(|co| {
                            let mut s = 0.0;
                            for n in 0..batch {
                                let start = n * out_item + co * plane;
                                s += gd[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                            }
                            T::of(s)
                        })
                        .collect()
                });
                grads.push(gb);
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution with zero padding.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let ho = (xs.h + 2 * pad - ws.h) / stride + 1;
        let wo = (xs.w + 2 * pad - ws.w) / stride + 1;
        Tensor::from_fn(Shape::new(xs.n, ws.n, ho, wo), |n, co, oy, ox| {
            let mut acc = b[co];
            for ci in 0..xs.c {
                for ki in 0..ws.h {
                    for kj in 0..ws.w {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ki, kj);
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv2d(x, w, Some(b), ConvOptions::same(0)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
        let w = tape.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
        let y = tape.conv2d(x, w, None, ConvOptions::same(1)).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 0, 1, 1), 9.0);
        assert_eq!(v.at(0, 0, 0, 0), 4.0);
        assert_eq!(v.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 256, 256)));
        let w = tape.constant(Tensor::zeros(Shape::new(3, 2, 4, 4)));
        let y = tape.conv2d(x, w, None, ConvOptions::new(2, 1, PadMode::Zero)).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 3, 128, 128));
    }

    #[test]
    fn matches_oracle_over_geometries() {
        for &(cin, cout, h, w, k, stride, pad) in
            &[(1, 1, 5, 5, 3, 1, 1), (3, 4, 7, 6, 3, 2, 1), (2, 3, 8, 8, 4, 2, 1), (4, 2, 5, 9, 1, 1, 0), (2, 2, 6, 6, 3, 3, 0)]
        {
            let x = pseudo(Shape::new(2, cin, h, w), 1 + h as u64);
            let wt = pseudo(Shape::new(cout, cin, k, k), 7 + k as u64);
            let bias: Vec<f64> = (0..cout).map(|i| i as f64 * 0.1 - 0.05).collect();
            let expected = conv_oracle(&x, &wt, &bias, stride, pad);
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x);
            let wv = tape.constant(wt);
            let bv = tape.constant(Tensor::from_f64(Shape::new(1, cout, 1, 1), &bias).unwrap());
            let y = tape.conv2d(xv, wv, Some(bv), ConvOptions::new(stride, pad, PadMode::Zero)).unwrap();
            assert_eq!(tape.shape(y), expected.shape());
            assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn reports_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let w = tape.constant(Tensor::zeros(Shape::new(2, 4, 3, 3)));
        let err = tape.conv2d(x, w, None, ConvOptions::same(1)).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "conv2d", dim: "input channels", expected: 4, actual: 3 });
    }

    #[test]
    fn reflect_padding_must_be_smaller_than_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let w = tape.constant(Tensor::zeros(Shape::new(1, 1, 3, 3)));
        assert!(tape.conv2d(x, w, None, ConvOptions::new(1, 3, PadMode::Reflect)).is_err());
        let y = tape.conv2d(x, w, None, ConvOptions::new(1, 1, PadMode::Reflect)).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 4, 4));
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out_extent(256, 4, 2, 1), Some(128));
        assert_eq!(conv_out_extent(5, 4, 2, 1), Some(2));
        assert_eq!(conv_out_extent(2, 4, 2, 1), Some(1));
        assert_eq!(conv_out_extent(1, 4, 1, 0), None);
    }
}
