//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and, when any
//! input requires a gradient, a closure mapping the output gradient to input
//! gradients. Nodes are appended in execution order, so the tape is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! A tape lives for one forward pass. Parameters are re-registered on each
//! new tape; gradients come back as a [`Grads`] table keyed by [`Var`].

mod conv;
mod elementwise;
mod gradcheck;
mod norm;
mod spatial;

pub use conv::{ConvOptions, PadMode};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use norm::{BatchNormOutput, BatchNormStats};
pub use spatial::avg_pool2;

use crate::tensor::{Element, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds known to the tape.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum OpKind {
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    LeakyRelu,
    Sigmoid,
    UpsampleNearest,
    MaxPool2,
    Pad,
    Crop,
    ConcatChannels,
    MaskedMean,
    MaskedStd,
    Add,
    Sub,
    Mul,
    Div,
    Blend,
    Affine,
    Sum,
    Mean,
    Mse,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Conv2d,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Sigmoid,
        OpKind::UpsampleNearest,
        OpKind::MaxPool2,
        OpKind::Pad,
        OpKind::Crop,
        OpKind::ConcatChannels,
        OpKind::MaskedMean,
        OpKind::MaskedStd,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Blend,
        OpKind::Affine,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNormTrain => "batchnorm2d_train",
            OpKind::BatchNormEval => "batchnorm2d_eval",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::Pad => "pad",
            OpKind::Crop => "crop",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::MaskedMean => "masked_mean",
            OpKind::MaskedStd => "masked_std",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Blend => "blend",
            OpKind::Affine => "affine",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Mse => "mse",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|op| op.name() == name)
    }
}

/// Gradient contributions for each input of a node, `None` where the input
/// does not require a gradient.
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> InputGrads<T>>;

struct Node<T: Element> {
    op: Option<OpKind>,
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
}

/// Record of one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    kink_hash: u64,
    recorded: Option<BranchLog>,
    pinned: Option<(BranchLog, usize)>,
}

/// Branch decisions of every piecewise-linear op in one forward pass, in
/// execution order: ReLU on/off flags and max-pool winner offsets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchLog(Vec<Vec<usize>>);

impl BranchLog {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), kink_hash: KINK_SEED, recorded: None, pinned: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: None, value, requires_grad, inputs: Vec::new(), backward: None });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A new constant holding the current value of `v`; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every activation pattern (ReLU signs, max-pool winners) seen so
    /// far. Two forward passes with equal signatures took the same branches
    /// through every piecewise-linear op.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    fn mix_kink(&mut self, bits: &[usize]) {
        let mut h = self.kink_hash;
        for &b in bits {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.kink_hash = h;
    }

    /// Starts logging branch decisions for [`Tape::take_branches`].
    pub fn record_branches(&mut self) {
        self.recorded = Some(BranchLog::default());
    }

    pub fn take_branches(&mut self) -> Option<BranchLog> {
        self.recorded.take()
    }

    /// Makes every following piecewise-linear op take the branches in `log`
    /// instead of the ones its input selects. The forward pass then
    /// evaluates the smooth piece the log was recorded on, which is the
    /// function the recorded pass's gradient describes.
    pub fn pin_branches(&mut self, log: BranchLog) {
        self.pinned = Some((log, 0));
    }

    /// Branches for the next piecewise op given the ones its input selects.
    /// The kink signature always follows the natural branches.
    pub(crate) fn branch(&mut self, natural: Vec<usize>) -> Vec<usize> {
        self.mix_kink(&natural);
        if let Some(log) = &mut self.recorded {
            log.0.push(natural.clone());
        }
        match &mut self.pinned {
            Some((log, next)) => {
                let pinned = log.0.get(*next).filter(|p| p.len() == natural.len()).cloned();
                *next += 1;
                pinned.expect("pinned branch log does not match this forward pass")
            }
            None => natural,
        }
    }

    pub(crate) fn push_op(
        &mut self,
        op: OpKind,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&Tensor<T>, &[bool]) -> InputGrads<T> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, TensorError> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        let mut acc: Vec<Option<Vec<T>>> = Vec::new();
        acc.resize_with(loss.0 + 1, || None);
        acc[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = acc[idx].take() else { continue };
            let grad = Tensor::from_parts(node.value.shape(), grad);
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let mut contributions = backward(&grad, &needs);
            if fault::active(node.op) {
                for g in contributions.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut acc[input.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contribution) {
                            *e = *e + c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            // Keep gradients of leaves, drop intermediate ones.
            acc[idx] = None;
        }

        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.and_then(|g| {
                    let node = &self.nodes[i];
                    (node.op.is_none() && node.requires_grad).then(|| Tensor::from_parts(node.value.shape(), g))
                })
            })
            .collect();
        Ok(Grads { grads })
    }
}

const KINK_SEED: u64 = 0xcbf2_9ce4_8422_2325;

/// Gradients of a loss with respect to the trainable leaves of a tape.
pub struct Grads<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(any(test, feature = "fault-injection"))]
mod fault {
    use std::cell::Cell;

    use super::OpKind;

    thread_local! {
        static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
    }

    pub fn set(op: Option<OpKind>) {
        FAULT.with(|f| f.set(op));
    }

    pub fn active(op: Option<OpKind>) -> bool {
        op.is_some() && FAULT.with(|f| f.get()) == op
    }
}

#[cfg(not(any(test, feature = "fault-injection")))]
mod fault {
    use super::OpKind;

    #[inline(always)]
    pub fn active(_: Option<OpKind>) -> bool {
        false
    }
}

/// Flips the sign of every gradient produced by `op`'s backward rule on the
/// current thread. Pass `None` to restore correct gradients.
#[cfg(any(test, feature = "fault-injection"))]
pub fn inject_fault(op: Option<OpKind>) {
    fault::set(op);
}

pub const FAULT_ENV: &str = "PHARNET_INJECT_FAULT";

/// Injects the fault named by `PHARNET_INJECT_FAULT` (an op name such as
/// `mul`) and returns it. Builds without the `fault-injection` feature ignore
/// the variable and return `Ok(None)`.
pub fn inject_fault_from_env() -> Result<Option<OpKind>, String> {
    let Ok(name) = std::env::var(FAULT_ENV) else {
        return Ok(None);
    };
    if !cfg!(any(test, feature = "fault-injection")) {
        return Ok(None);
    }
    let op = OpKind::from_name(name.trim()).ok_or_else(|| format!("{FAULT_ENV}: unknown op `{name}`"))?;
    #[cfg(any(test, feature = "fault-injection"))]
    fault::set(Some(op));
    Ok(Some(op))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(1, 1, 1, values.len()), values).unwrap()
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, -2.0, 3.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[0.3, 0.7]));
        let a = tape.sum(x);
        let b = tape.sum(x);
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_and_detached_values_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0]));
        let c = tape.constant(t(&[5.0, 5.0]));
        let d = tape.detach(x);
        let p = tape.mul(x, c).unwrap();
        let q = tape.mul(p, d).unwrap();
        let loss = tape.sum(q);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        // d(x * 5 * x_detached)/dx = 5 * x
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 10.0]);
    }

    #[test]
    fn ops_without_grad_inputs_record_no_backward() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let y = tape.sigmoid(c);
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn kink_signature_tracks_relu_pattern() {
        let sig = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[v, 1.0]));
            tape.relu(x);
            tape.kink_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }

    #[test]
    fn injected_fault_flips_gradient_sign() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(t(&[0.2]));
            let s = tape.sigmoid(x);
            let loss = tape.sum(s);
            tape.backward(loss).unwrap().get(x).unwrap().data()[0]
        };
        let clean = run();
        inject_fault(Some(OpKind::Sigmoid));
        let broken = run();
        inject_fault(None);
        assert_eq!(broken, -clean);
    }
}
