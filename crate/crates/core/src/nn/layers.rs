use super::{Binding, BnBatchStats, BnMode, Init, ParamKind, ParamStore, BN_EPS};
use crate::autodiff::{BatchNormStats, ConvOptions, Tape, Var};
use crate::error::Result;
use crate::tensor::{Element, Shape};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub path: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub opts: ConvOptions,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(path: impl Into<String>, cin: usize, cout: usize, kernel: usize, opts: ConvOptions, bias: bool) -> Self {
        Conv2d { path: path.into(), cin, cout, kernel, opts, bias }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    pub fn register(&self, store: &mut ParamStore, kind: ParamKind) -> Result<()> {
        let fan_in = self.cin * self.kernel * self.kernel;
        store.register(
            self.weight_path(),
            Shape::new(self.cout, self.cin, self.kernel, self.kernel),
            kind,
            Init::FanInUniform { fan_in },
        )?;
        if self.bias {
            store.register(self.bias_path(), Shape::new(1, self.cout, 1, 1), kind, Init::Constant(0.0))?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        let w = p.var(&self.weight_path())?;
        let b = if self.bias { Some(p.var(&self.bias_path())?) } else { None };
        Ok(tape.conv2d(x, w, b, self.opts)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub path: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(path: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d { path: path.into(), channels }
    }

    pub fn register(&self, store: &mut ParamStore, kind: ParamKind) -> Result<()> {
        let shape = Shape::new(1, self.channels, 1, 1);
        store.register(format!("{}.weight", self.path), shape, kind, Init::Constant(1.0))?;
        store.register(format!("{}.bias", self.path), shape, kind, Init::Constant(0.0))?;
        store.register(format!("{}.running_mean", self.path), shape, ParamKind::Buffer, Init::Constant(0.0))?;
        store.register(format!("{}.running_var", self.path), shape, ParamKind::Buffer, Init::Constant(1.0))?;
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, x: Var) -> Result<Var> {
        let gamma = p.var(&format!("{}.weight", self.path))?;
        let beta = p.var(&format!("{}.bias", self.path))?;
        match p.mode {
            BnMode::Train => {
                let out = tape.batch_norm(x, gamma, beta, BatchNormStats::Batch, BN_EPS)?;
                if let Some((mean, var)) = out.batch_stats {
                    p.record_bn(BnBatchStats { prefix: self.path.clone(), mean, var, count: out.count });
                }
                Ok(out.out)
            }
            BnMode::Eval => {
                let store = p.store();
                let mean = store.value(&format!("{}.running_mean", self.path))?.cast::<T>();
                let var = store.value(&format!("{}.running_var", self.path))?.cast::<T>();
                let out = tape.batch_norm(x, gamma, beta, BatchNormStats::Running { mean: &mean, var: &var }, BN_EPS)?;
                Ok(out.out)
            }
        }
    }
}
