use super::{BatchNorm2d, Binding, Conv2d, ParamKind, ParamStore};
use crate::autodiff::{ConvOptions, PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, TensorError};

const LEAKY_SLOPE: f64 = 0.2;

/// `relu(x + bn(conv(relu(bn(conv(x))))))` with 3x3 zero-padded convs.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub channels: usize,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResidualBlock {
    pub fn new(path: &str, channels: usize) -> Self {
        let conv = |name: &str| Conv2d::new(format!("{path}.{name}"), channels, channels, 3, ConvOptions::same(1), false);
        ResidualBlock {
            channels,
            conv1: conv("conv1"),
            bn1: BatchNorm2d::new(format!("{path}.bn1"), channels),
            conv2: conv("conv2"),
            bn2: BatchNorm2d::new(format!("{path}.bn2"), channels),
        }
    }

    pub fn register(&self, store: &mut ParamStore, kind: ParamKind) -> Result<()> {
        self.conv1.register(store, kind)?;
        self.bn1.register(store, kind)?;
        self.conv2.register(store, kind)?;
        self.bn2.register(store, kind)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.channels {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "residual_block",
                dim: "channels",
                expected: self.channels,
                actual: c,
            }));
        }
        let h = self.conv1.forward(tape, p, x)?;
        let h = self.bn1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let h = self.bn2.forward(tape, p, h)?;
        let sum = tape.add(x, h)?;
        Ok(tape.relu(sum))
    }
}

/// Conv 4x4 / stride 2 / zero pad 1, batch norm, LeakyReLU(0.2).
#[derive(Clone, Debug)]
pub struct DsBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl DsBlock {
    pub fn new(path: &str, cin: usize, cout: usize) -> Self {
        DsBlock {
            conv: Conv2d::new(format!("{path}.conv"), cin, cout, 4, ConvOptions::new(2, 1, PadMode::Zero), false),
            bn: BatchNorm2d::new(format!("{path}.bn"), cout),
        }
    }

    pub fn register(&self, store: &mut ParamStore, kind: ParamKind) -> Result<()> {
        self.conv.register(store, kind)?;
        self.bn.register(store, kind)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, p, x)?;
        let h = self.bn.forward(tape, p, h)?;
        Ok(tape.leaky_relu(h, LEAKY_SLOPE))
    }
}

/// Nearest upsample x2, reflect pad 1, conv 3x3, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct UsBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl UsBlock {
    pub fn new(path: &str, cin: usize, cout: usize) -> Self {
        UsBlock {
            conv: Conv2d::new(format!("{path}.conv"), cin, cout, 3, ConvOptions::new(1, 0, PadMode::Zero), false),
            bn: BatchNorm2d::new(format!("{path}.bn"), cout),
        }
    }

    pub fn register(&self, store: &mut ParamStore, kind: ParamKind) -> Result<()> {
        self.conv.register(store, kind)?;
        self.bn.register(store, kind)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, x: Var) -> Result<Var> {
        let h = tape.upsample_nearest(x, 2)?;
        let h = tape.pad(h, [1, 1, 1, 1], PadMode::Reflect)?;
        let h = self.conv.forward(tape, p, h)?;
        let h = self.bn.forward(tape, p, h)?;
        Ok(tape.relu(h))
    }
}
