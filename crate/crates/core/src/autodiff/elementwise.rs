//! Elementwise arithmetic, activations and reductions.
//!
//! Broadcasting is deliberately narrow. Two operands must either share a
//! shape, or one of them is a single-channel mask `[N, 1, H, W]` against a
//! feature map `[N, C, H, W]`, or per-channel statistics `[N, C, 1, 1]`
//! against a feature map. Anything else is a shape bug and is rejected.

use super::{OpKind, Tape, Var};
use crate::tensor::{Element, Shape, Tensor, TensorError};

/// Element strides of `operand` when iterated over `out`; broadcast axes get 0.
fn broadcast_strides(operand: Shape, out: Shape) -> [usize; 4] {
    let full = [operand.c * operand.h * operand.w, operand.h * operand.w, operand.w, 1];
    let od = operand.dims();
    let dims = out.dims();
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if od[i] == dims[i] { full[i] } else { 0 };
    }
    s
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape, TensorError> {
    if a == b {
        return Ok(a);
    }
    let err = || TensorError::Broadcast { op, lhs: a, rhs: b };
    if a.n != b.n {
        return Err(err());
    }
    let mask_pattern = (a.h, a.w) == (b.h, b.w) && (a.c == 1 || b.c == 1);
    let stats_pattern = a.c == b.c && ((a.h, a.w) == (1, 1) || (b.h, b.w) == (1, 1));
    if mask_pattern || stats_pattern {
        Ok(Shape::new(a.n, a.c.max(b.c), a.h.max(b.h), a.w.max(b.w)))
    } else {
        Err(err())
    }
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            let base_a = n * sa[0] + c * sa[1];
            let base_b = n * sb[0] + c * sb[1];
            for h in 0..out.h {
                let row_a = base_a + h * sa[2];
                let row_b = base_b + h * sb[2];
                for w in 0..out.w {
                    f(o, row_a + w * sa[3], row_b + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Element> Tape<T> {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let (op, name) = match kind {
            Binary::Add => (OpKind::Add, "add"),
            Binary::Sub => (OpKind::Sub, "sub"),
            Binary::Mul => (OpKind::Mul, "mul"),
            Binary::Div => (OpKind::Div, "div"),
        };
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out_shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let sa = broadcast_strides(av.shape(), out_shape);
        let sb = broadcast_strides(bv.shape(), out_shape);
        let mut out = vec![T::zero(); out_shape.numel()];
        {
            let (ad, bd) = (av.data(), bv.data());
            for_each_broadcast(out_shape, sa, sb, |o, i, j| {
                let (x, y) = (ad[i], bd[j]);
                out[o] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                };
            });
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push_op(op, value, &[a, b], move |g, needs| {
            let gd = g.data();
            let (ad, bd) = (av.data(), bv.data());
            let mut ga = needs[0].then(|| vec![T::zero(); av.numel()]);
            let mut gb = needs[1].then(|| vec![T::zero(); bv.numel()]);
            for_each_broadcast(out_shape, sa, sb, |o, i, j| {
                let go = gd[o];
                let (da, db) = match kind {
                    Binary::Add => (go, go),
                    Binary::Sub => (go, -go),
                    Binary::Mul => (go * bd[j], go * ad[i]),
                    Binary::Div => (go / bd[j], -go * ad[i] / (bd[j] * bd[j])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] = ga[i] + da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] = gb[j] + db;
                }
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Div, a, b)
    }

    /// `mask * a + (1 - mask) * b`.
    ///
    /// `a` and `b` share a shape; `mask` may be a single-channel map that is
    /// broadcast over channels. With a binary mask this selects `a` inside the
    /// mask and `b` outside it.
    pub fn blend(&mut self, mask: Var, a: Var, b: Var) -> Result<Var, TensorError> {
        let (mv, av, bv) = (self.value(mask).clone(), self.value(a).clone(), self.value(b).clone());
        if av.shape() != bv.shape() {
            return Err(TensorError::Broadcast { op: "blend", lhs: av.shape(), rhs: bv.shape() });
        }
        let out_shape = broadcast_shape("blend", mv.shape(), av.shape())?;
        if out_shape != av.shape() {
            return Err(TensorError::Broadcast { op: "blend", lhs: mv.shape(), rhs: av.shape() });
        }
        let sm = broadcast_strides(mv.shape(), out_shape);
        let sx = broadcast_strides(out_shape, out_shape);
        let mut out = vec![T::zero(); out_shape.numel()];
        {
            let (md, ad, bd) = (mv.data(), av.data(), bv.data());
            for_each_broadcast(out_shape, sm, sx, |o, i, _| {
                let m = md[i];
                out[o] = m * ad[o] + (T::one() - m) * bd[o];
            });
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push_op(OpKind::Blend, value, &[mask, a, b], move |g, needs| {
            let gd = g.data();
            let (md, ad, bd) = (mv.data(), av.data(), bv.data());
            let mut gm = needs[0].then(|| vec![T::zero(); mv.numel()]);
            let mut ga = needs[1].then(|| vec![T::zero(); av.numel()]);
            let mut gb = needs[2].then(|| vec![T::zero(); bv.numel()]);
            for_each_broadcast(out_shape, sm, sx, |o, i, _| {
                let m = md[i];
                if let Some(gm) = gm.as_mut() {
                    gm[i] = gm[i] + gd[o] * (ad[o] - bd[o]);
                }
                if let Some(ga) = ga.as_mut() {
                    ga[o] = gd[o] * m;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[o] = gd[o] * (T::one() - m);
                }
            });
            vec![gm, ga, gb]
        }))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::of(scale), T::of(shift));
        let value = self.value(x).map(|v| s * v + b);
        self.push_op(OpKind::Affine, value, &[x], move |g, _| vec![Some(g.data().iter().map(|&v| v * s).collect())])
    }

    fn unary(&mut self, op: OpKind, x: Var, forward: impl Fn(T) -> T, derivative: impl Fn(T, T) -> T + 'static) -> Var {
        let xv = self.value(x).clone();
        let value = xv.map(forward);
        let yv = value.clone();
        self.push_op(op, value, &[x], move |g, _| {
            let out = g.data().iter().zip(xv.data().iter().zip(yv.data())).map(|(&go, (&xi, &yi))| go * derivative(xi, yi)).collect();
            vec![Some(out)]
        })
    }

    /// Identity where the branch is on, `negative_slope * x` elsewhere.
    fn rectifier(&mut self, op: OpKind, x: Var, negative_slope: Option<T>) -> Var {
        let xv = self.value(x).clone();
        let on = self.branch(xv.data().iter().map(|v| (*v > T::zero()) as usize).collect());
        let off = move |v: T| negative_slope.map_or(T::zero(), |a| a * v);
        let data = xv.data().iter().zip(&on).map(|(&v, &b)| if b == 1 { v } else { off(v) }).collect();
        self.push_op(op, Tensor::from_parts(xv.shape(), data), &[x], move |g, _| {
            vec![Some(g.data().iter().zip(&on).map(|(&gv, &b)| if b == 1 { gv } else { off(gv) }).collect())]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.rectifier(OpKind::Relu, x, None)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.rectifier(OpKind::LeakyRelu, x, Some(T::of(slope)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(OpKind::Sigmoid, x, |v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    /// Sum of all elements as a `[1, 1, 1, 1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let total = T::of(xv.sum_f64());
        self.push_op(OpKind::Sum, Tensor::scalar(total), &[x], move |g, _| vec![Some(vec![g.data()[0]; shape.numel()])])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let count = shape.numel() as f64;
        let total = T::of(xv.sum_f64() / count);
        self.push_op(OpKind::Mean, Tensor::scalar(total), &[x], move |g, _| vec![Some(vec![g.data()[0] / T::of(count); shape.numel()])])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        if av.shape() != bv.shape() {
            return Err(TensorError::Broadcast { op: "mse", lhs: av.shape(), rhs: bv.shape() });
        }
        let count = av.numel() as f64;
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::of(total / count));
        Ok(self.push_op(OpKind::Mse, value, &[a, b], move |g, needs| {
            let scale = g.data()[0] * T::of(2.0 / count);
            let diff = || av.data().iter().zip(bv.data()).map(move |(&x, &y)| (x - y) * scale);
            let ga = needs[0].then(|| diff().collect());
            let gb = needs[1].then(|| diff().map(|v| -v).collect());
            vec![ga, gb]
        }))
    }

    /// Mean squared value of `x`, i.e. `mse(x, 0)`.
    pub fn mse_zero(&mut self, x: Var) -> Var {
        let zero = self.constant(Tensor::zeros(self.shape(x)));
        self.mse(x, zero).expect("shapes match by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, values).unwrap()
    }

    #[test]
    fn activations_match_definitions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = tape.constant(t(Shape::new(1, 1, 1, 2), &[-1.0, 2.0]));
        let l = tape.leaky_relu(y, 0.2);
        assert_eq!(tape.value(l).data(), &[-0.2, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn mse_uses_mean_reduction() {
        let mut tape = Tape::<f64>::new();
        let s = Shape::new(1, 1, 1, 2);
        let a = tape.constant(t(s, &[0.0, 2.0]));
        let b = tape.constant(t(s, &[0.0, 0.0]));
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 2.0);
        let same = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
    }

    #[test]
    fn zero_mask_product_is_zero() {
        let mut tape = Tape::<f32>::new();
        let mask = tape.constant(Tensor::zeros(Shape::new(2, 1, 3, 3)));
        let feat = tape.constant(Tensor::from_fn(Shape::new(2, 4, 3, 3), |n, c, h, w| (n + c * 2 + h * 3 + w) as f32 - 4.5));
        let out = tape.mul(mask, feat).unwrap();
        assert_eq!(tape.shape(out), Shape::new(2, 4, 3, 3));
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_broadcast_over_spatial_dims() {
        let mut tape = Tape::<f64>::new();
        let feat = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 2)));
        let stats = tape.constant(t(Shape::new(1, 2, 1, 1), &[3.0, -1.0]));
        let out = tape.add(feat, stats).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 4.0, 4.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_other_broadcast_patterns() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(Shape::new(1, 2, 4, 4)));
        let b = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 2)));
        assert!(matches!(tape.add(a, b), Err(TensorError::Broadcast { .. })));
        let c = tape.constant(Tensor::ones(Shape::new(2, 2, 4, 4)));
        assert!(tape.mul(a, c).is_err());
        let d = tape.constant(Tensor::ones(Shape::new(1, 3, 4, 4)));
        assert!(tape.sub(a, d).is_err());
    }

    #[test]
    fn broadcast_gradients_reduce_over_broadcast_axes() {
        let mut tape = Tape::<f64>::new();
        let mask = tape.param(t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]));
        let feat = tape.param(t(Shape::new(1, 3, 1, 2), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        let prod = tape.mul(mask, feat).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(mask).unwrap().data(), &[6.0, 6.0]);
        assert_eq!(grads.get(feat).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn blend_with_forced_masks() {
        let mut tape = Tape::<f64>::new();
        let s = Shape::new(1, 3, 2, 2);
        let io = tape.constant(Tensor::full(s, 1.0));
        let is = tape.constant(Tensor::full(s, 0.0));
        for (m, expected) in [(1.0, 1.0), (0.0, 0.0), (0.5, 0.5)] {
            let mask = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), m));
            let out = tape.blend(mask, io, is).unwrap();
            assert!(tape.value(out).data().iter().all(|&v| v == expected));
        }
    }
}
