//! Batch normalization and (masked) per-channel moments.

use super::{OpKind, Tape, Var};
use crate::tensor::{Element, Shape, Tensor, TensorError};

/// Statistics source for [`Tape::batch_norm`].
pub enum BatchNormStats<'a, T: Element> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

pub struct BatchNormOutput {
    pub out: Var,
    /// Per-channel batch mean and biased variance; `None` in running mode.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    /// Elements per channel that produced `batch_stats`.
    pub count: usize,
}

/// Per (item, channel) values selected by `mask`; `None` selects everything.
fn region_indices(s: Shape, mask: Option<&Tensor<impl Element>>) -> Result<Vec<Vec<usize>>, TensorError> {
    let plane = s.plane();
    let mut regions = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let pix: Vec<usize> = match mask {
            None => (0..plane).collect(),
            Some(m) => {
                let md = &m.data()[n * plane..(n + 1) * plane];
                md.iter().enumerate().filter(|(_, v)| v.as_f64() > 0.5).map(|(i, _)| i).collect()
            }
        };
        if pix.is_empty() {
            return Err(TensorError::EmptyMask { batch: n });
        }
        regions.push(pix);
    }
    Ok(regions)
}

fn check_mask(op: &'static str, s: Shape, m: Shape) -> Result<(), TensorError> {
    if m.n != s.n || m.c != 1 || m.h != s.h || m.w != s.w {
        return Err(TensorError::Broadcast { op, lhs: s, rhs: m });
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Per-channel normalization followed by `gamma * x + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats<'_, T>,
        eps: f64,
    ) -> Result<BatchNormOutput, TensorError> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let len = self.shape(v).numel();
            if len != s.c {
                return Err(TensorError::ShapeMismatch { op: "batch_norm", dim: name, expected: s.c, actual: len });
            }
        }
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let plane = s.plane();
        let count = s.n * plane;
        let channel_iter = move |c: usize| (0..s.n).flat_map(move |n| (0..plane).map(move |p| (n * s.c + c) * plane + p));

        let (mean, var, train) = match stats {
            BatchNormStats::Batch => {
                let mut mean = vec![0.0; s.c];
                let mut var = vec![0.0; s.c];
                for c in 0..s.c {
                    let m = channel_iter(c).map(|i| xv.data()[i].as_f64()).sum::<f64>() / count as f64;
                    let v = channel_iter(c)
                        .map(|i| {
                            let d = xv.data()[i].as_f64() - m;
                            d * d
                        })
                        .sum::<f64>()
                        / count as f64;
                    mean[c] = m;
                    var[c] = v;
                }
                (mean, var, true)
            }
            BatchNormStats::Running { mean, var } => {
                if mean.numel() != s.c || var.numel() != s.c {
                    return Err(TensorError::ShapeMismatch {
                        op: "batch_norm",
                        dim: "running statistics",
                        expected: s.c,
                        actual: mean.numel().min(var.numel()),
                    });
                }
                let m = mean.data().iter().map(|v| v.as_f64()).collect();
                let v = var.data().iter().map(|v| v.as_f64()).collect();
                (m, v, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = vec![T::zero(); s.numel()];
        for c in 0..s.c {
            let (g, b) = (gv.data()[c], bv.data()[c]);
            for i in channel_iter(c) {
                let h = (xv.data()[i] - mean_t[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = g * h + b;
            }
        }
        let op = if train { OpKind::BatchNormTrain } else { OpKind::BatchNormEval };
        let value = Tensor::from_parts(s, out);
        let out = self.push_op(op, value, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let mut gx = needs[0].then(|| vec![T::zero(); s.numel()]);
            let mut ggamma = needs[1].then(|| vec![T::zero(); s.c]);
            let mut gbeta = needs[2].then(|| vec![T::zero(); s.c]);
            for c in 0..s.c {
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for i in channel_iter(c) {
                    sum_dy += gd[i].as_f64();
                    sum_dy_xhat += (gd[i] * xhat[i]).as_f64();
                }
                if let Some(gg) = ggamma.as_mut() {
                    gg[c] = T::of(sum_dy_xhat);
                }
                if let Some(gb) = gbeta.as_mut() {
                    gb[c] = T::of(sum_dy);
                }
                if let Some(gx) = gx.as_mut() {
                    let scale = gv.data()[c] * inv_std[c];
                    if train {
                        let mean_dy = T::of(sum_dy / count as f64);
                        let mean_dy_xhat = T::of(sum_dy_xhat / count as f64);
                        for i in channel_iter(c) {
                            gx[i] = scale * (gd[i] - mean_dy - xhat[i] * mean_dy_xhat);
                        }
                    } else {
                        for i in channel_iter(c) {
                            gx[i] = scale * gd[i];
                        }
                    }
                }
            }
            vec![gx, ggamma, gbeta]
        });
        Ok(BatchNormOutput { out, batch_stats: train.then_some((mean, var)), count })
    }

    /// Per-channel mean over the pixels where `mask` is 1 (all pixels when
    /// `mask` is `None`). Output is `[N, C, 1, 1]`.
    pub fn masked_mean(&mut self, x: Var, mask: Option<Var>) -> Result<Var, TensorError> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        let mv = mask.map(|m| self.value(m).clone());
        if let Some(m) = &mv {
            check_mask("masked_mean", s, m.shape())?;
        }
        let regions = region_indices(s, mv.as_ref())?;
        let plane = s.plane();
        let out_shape = Shape::new(s.n, s.c, 1, 1);
        let value = Tensor::from_fn(out_shape, |n, c, _, _| {
            let base = (n * s.c + c) * plane;
            let sum: f64 = regions[n].iter().map(|&p| xv.data()[base + p].as_f64()).sum();
            T::of(sum / regions[n].len() as f64)
        });
        let mut inputs = vec![x];
        inputs.extend(mask);
        Ok(self.push_op(OpKind::MaskedMean, value, &inputs, move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); s.numel()]);
            if let Some(gx) = gx.as_mut() {
                for (n, region) in regions.iter().enumerate() {
                    let inv = T::of(1.0 / region.len() as f64);
                    for c in 0..s.c {
                        let base = (n * s.c + c) * plane;
                        let gv = g.data()[n * s.c + c] * inv;
                        for &p in region {
                            gx[base + p] = gv;
                        }
                    }
                }
            }
            let mut grads = vec![gx];
            if needs.len() > 1 {
                grads.push(None);
            }
            grads
        }))
    }

    /// Per-channel population standard deviation `sqrt(var + eps)` over the
    /// pixels where `mask` is 1. Output is `[N, C, 1, 1]`.
    pub fn masked_std(&mut self, x: Var, mask: Option<Var>, eps: f64) -> Result<Var, TensorError> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        let mv = mask.map(|m| self.value(m).clone());
        if let Some(m) = &mv {
            check_mask("masked_std", s, m.shape())?;
        }
        let regions = region_indices(s, mv.as_ref())?;
        let plane = s.plane();
        let mut means = vec![0.0; s.n * s.c];
        let mut stds = vec![0.0; s.n * s.c];
        for n in 0..s.n {
            let count = regions[n].len() as f64;
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                let m = regions[n].iter().map(|&p| xv.data()[base + p].as_f64()).sum::<f64>() / count;
                let v = regions[n]
                    .iter()
                    .map(|&p| {
                        let d = xv.data()[base + p].as_f64() - m;
                        d * d
                    })
                    .sum::<f64>()
                    / count;
                means[n * s.c + c] = m;
                stds[n * s.c + c] = (v + eps).sqrt();
            }
        }
        let value = Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), stds.iter().map(|&v| T::of(v)).collect());
        let mut inputs = vec![x];
        inputs.extend(mask);
        Ok(self.push_op(OpKind::MaskedStd, value, &inputs, move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); s.numel()]);
            if let Some(gx) = gx.as_mut() {
                for (n, region) in regions.iter().enumerate() {
                    let count = region.len() as f64;
                    for c in 0..s.c {
                        let k = n * s.c + c;
                        let base = k * plane;
                        let scale = g.data()[k].as_f64() / (count * stds[k]);
                        for &p in region {
                            gx[base + p] = T::of((xv.data()[base + p].as_f64() - means[k]) * scale);
                        }
                    }
                }
            }
            let mut grads = vec![gx];
            if needs.len() > 1 {
                grads.push(None);
            }
            grads
        }))
    }

    /// `(masked_mean, masked_std)`.
    pub fn masked_moments(&mut self, x: Var, mask: Option<Var>, eps: f64) -> Result<(Var, Var), TensorError> {
        Ok((self.masked_mean(x, mask)?, self.masked_std(x, mask, eps)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-5;

    #[test]
    fn half_mask_moments_match_scalar_oracle() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = tape.constant(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 1.0, 0.0, 0.0]).unwrap());
        let (mean, std) = tape.masked_moments(x, Some(m), EPS).unwrap();
        // oracle over the selected values {1, 2}
        let sel = [1.0f64, 2.0];
        let mu = sel.iter().sum::<f64>() / 2.0;
        let var = sel.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 2.0;
        assert_eq!(tape.value(mean).item().unwrap(), 1.5);
        assert!((tape.value(std).item().unwrap() - (var + EPS).sqrt()).abs() < 1e-15);
        assert!((tape.value(std).item().unwrap() - (0.25f64 + EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn all_ones_mask_equals_unmasked_moments() {
        let mut tape = Tape::<f32>::new();
        let s = Shape::new(2, 3, 4, 5);
        let x = tape.constant(Tensor::from_fn(s, |n, c, h, w| ((n * 31 + c * 17 + h * 7 + w * 3) % 11) as f32 * 0.3));
        let ones = tape.constant(Tensor::ones(Shape::new(2, 1, 4, 5)));
        let (m1, s1) = tape.masked_moments(x, Some(ones), EPS).unwrap();
        let (m2, s2) = tape.masked_moments(x, None, EPS).unwrap();
        assert_eq!(tape.value(m1), tape.value(m2));
        assert_eq!(tape.value(s1), tape.value(s2));
    }

    #[test]
    fn constant_region_has_eps_std() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 2, 3, 3), 4.25));
        let m = tape.constant(Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, h, _| (h == 1) as u8 as f64));
        let (mean, std) = tape.masked_moments(x, Some(m), EPS).unwrap();
        assert!(tape.value(mean).data().iter().all(|&v| v == 4.25));
        assert!(tape.value(std).data().iter().all(|&v| v == EPS.sqrt()));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(Shape::new(2, 1, 2, 2)));
        let m = tape.constant(Tensor::from_fn(Shape::new(2, 1, 2, 2), |n, _, _, _| (n == 0) as u8 as f32));
        assert_eq!(tape.masked_mean(x, Some(m)).unwrap_err(), TensorError::EmptyMask { batch: 1 });
    }

    #[test]
    fn batch_norm_train_matches_direct_computation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(Shape::new(1, 1, 1, 4), &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let bn = tape.batch_norm(x, g, b, BatchNormStats::Batch, EPS).unwrap();
        let mean = 2.5;
        let var = (1.5f64 * 1.5 + 0.5 * 0.5) * 2.0 / 4.0;
        for (i, &v) in tape.value(bn.out).data().iter().enumerate() {
            let expected = ((i + 1) as f64 - mean) / (var + EPS).sqrt();
            assert!((v - expected).abs() < 1e-14);
        }
        let (m, v) = bn.batch_stats.unwrap();
        assert_eq!(m, vec![2.5]);
        assert_eq!(v, vec![1.25]);
    }

    #[test]
    fn batch_norm_of_normalized_input_is_near_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(Shape::new(1, 1, 1, 2), &[-1.0, 1.0]).unwrap());
        let g = tape.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let bn = tape.batch_norm(x, g, b, BatchNormStats::Batch, EPS).unwrap();
        assert!(tape.value(bn.out).max_abs_diff(tape.value(x)) < 1e-5);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(Shape::new(2, 1, 3, 3), 0.7));
        let g = tape.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let b = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 5.0));
        let bn = tape.batch_norm(x, g, b, BatchNormStats::Batch, EPS).unwrap();
        assert!(tape.value(bn.out).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn running_mode_uses_stored_statistics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(Shape::new(1, 1, 1, 2), &[3.0, 5.0]).unwrap());
        let g = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
        let b = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let mean = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let var = Tensor::full(Shape::new(1, 1, 1, 1), 4.0 - EPS);
        let bn = tape.batch_norm(x, g, b, BatchNormStats::Running { mean: &mean, var: &var }, EPS).unwrap();
        assert!(bn.batch_stats.is_none());
        let v = tape.value(bn.out).data();
        assert!((v[0] - 3.0).abs() < 1e-12 && (v[1] - 5.0).abs() < 1e-12);
    }
}
