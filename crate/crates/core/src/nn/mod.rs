//! Parameter storage, layers and the shared block architectures.

mod blocks;
mod layers;

pub use blocks::{DsBlock, ResidualBlock, UsBlock};
pub use layers::{BatchNorm2d, Conv2d};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Running-statistics momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    /// Updated by the optimizer; carries Adam state.
    Trainable,
    /// Never updated and never given a gradient.
    Frozen,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Trainable => 0,
            ParamKind::Frozen => 1,
            ParamKind::Buffer => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamKind::Trainable),
            1 => Some(ParamKind::Frozen),
            2 => Some(ParamKind::Buffer),
            _ => None,
        }
    }
}

/// How [`init_params`] fills a parameter.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanInUniform {
        fan_in: usize,
    },
    Constant(f32),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum InitScheme {
    FanInUniform,
    /// Weights zero, batch-norm scales one: every conv branch outputs zero.
    ZeroWeights,
}

#[derive(Clone, PartialEq, Debug)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        AdamMoments { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
    pub init: Init,
    /// Present exactly for trainable parameters.
    pub adam: Option<AdamMoments>,
}

/// Ordered map from unique dotted paths to parameters.
#[derive(Clone, Default, PartialEq, Debug)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, path: impl Into<String>, shape: Shape, kind: ParamKind, init: Init) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::DuplicateParam(path));
        }
        let value = match init {
            Init::Constant(c) => Tensor::full(shape, c),
            Init::FanInUniform { .. } => Tensor::zeros(shape),
        };
        let adam = (kind == ParamKind::Trainable).then(|| AdamMoments::new(shape.numel()));
        self.params.insert(path, Param { value, kind, init, adam });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.params.get(path).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.params.get_mut(path).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        Ok(&self.get(path)?.value)
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, path: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(path)?;
        if p.value.shape() != value.shape() {
            return Err(Error::config(format!("parameter `{path}` has shape {}, got {}", p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn index_of(&self, path: &str) -> Option<usize> {
        self.params.get_index_of(path)
    }

    pub fn get_index(&self, index: usize) -> Option<(&str, &Param)> {
        self.params.get_index(index).map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_index_mut(&mut self, index: usize) -> Option<(&str, &mut Param)> {
        self.params.get_index_mut(index).map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count of the parameters whose path starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(p, _)| p.starts_with(prefix)).map(|(_, p)| p.value.numel()).sum()
    }

    /// Snapshot of the values under `prefix`, for change audits.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter().filter(|(p, _)| p.starts_with(prefix)).map(|(p, v)| (p.to_string(), v.value.clone())).collect()
    }

    /// Places every parameter on `tape`. Trainable parameters selected by
    /// `train` become gradient-carrying leaves, everything else constants.
    pub fn bind<'s, T: Element>(&'s self, tape: &mut Tape<T>, mode: BnMode, train: impl Fn(&str) -> bool) -> Binding<'s> {
        let vars = self
            .params
            .iter()
            .map(|(path, p)| match p.kind {
                ParamKind::Buffer => None,
                ParamKind::Frozen => Some(tape.constant(p.value.cast())),
                ParamKind::Trainable => Some(tape.leaf(p.value.cast(), train(path))),
            })
            .collect();
        Binding { store: self, vars, mode, bn_stats: Vec::new() }
    }

    /// Folds batch statistics gathered in train mode into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[BnBatchStats], momentum: f64) -> Result<()> {
        for s in stats {
            let unbias = if s.count > 1 { s.count as f64 / (s.count as f64 - 1.0) } else { 1.0 };
            let mean_path = format!("{}.running_mean", s.prefix);
            let var_path = format!("{}.running_var", s.prefix);
            let mean = self.value(&mean_path)?.clone();
            let var = self.value(&var_path)?.clone();
            let new_mean: Vec<f32> =
                mean.data().iter().zip(&s.mean).map(|(&r, &b)| ((1.0 - momentum) * r as f64 + momentum * b) as f32).collect();
            let new_var: Vec<f32> =
                var.data().iter().zip(&s.var).map(|(&r, &b)| ((1.0 - momentum) * r as f64 + momentum * b * unbias) as f32).collect();
            self.set_value(&mean_path, Tensor::new(mean.shape(), new_mean)?)?;
            self.set_value(&var_path, Tensor::new(var.shape(), new_var)?)?;
        }
        Ok(())
    }
}

/// Re-initializes every parameter from its [`Init`] tag. Buffers are reset
/// too. Fully determined by `seed` and the registration order.
pub fn init_params(store: &mut ParamStore, scheme: InitScheme, seed: u64) {
    init_params_where(store, scheme, seed, |_| true);
}

/// [`init_params`] restricted to the paths accepted by `select`.
pub fn init_params_where(store: &mut ParamStore, scheme: InitScheme, seed: u64, select: impl Fn(&str) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut().filter(|(path, _)| select(path)) {
        let shape = p.value.shape();
        p.value = match (p.init, scheme) {
            (Init::Constant(c), _) => Tensor::full(shape, c),
            (Init::FanInUniform { .. }, InitScheme::ZeroWeights) => Tensor::zeros(shape),
            (Init::FanInUniform { fan_in }, InitScheme::FanInUniform) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..shape.numel()).map(|_| rng.random_range(-bound..bound) as f32).collect();
                Tensor::from_parts(shape, data)
            }
        };
        if let Some(adam) = p.adam.as_mut() {
            *adam = AdamMoments::new(shape.numel());
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    /// Normalize by batch statistics and record them.
    Train,
    /// Normalize by running statistics.
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a forward pass.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// A [`ParamStore`] placed on one tape.
pub struct Binding<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    pub mode: BnMode,
    bn_stats: Vec<BnBatchStats>,
}

impl<'s> Binding<'s> {
    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, path: &str) -> Result<Var> {
        self.store.index_of(path).and_then(|i| self.vars[i]).ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    /// Substitutes `var` for the bound value of `path`, e.g. to probe a
    /// parameter with an externally created leaf.
    pub fn replace(&mut self, path: &str, var: Var) -> Result<()> {
        let i = self.store.index_of(path).ok_or_else(|| Error::MissingParam(path.to_string()))?;
        self.vars[i] = Some(var);
        Ok(())
    }

    pub(crate) fn record_bn(&mut self, stats: BnBatchStats) {
        self.bn_stats.push(stats);
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnBatchStats> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradients of the bound gradient-carrying parameters, converted to
    /// `f32` and keyed by store index.
    pub fn collect_grads<T: Element>(&self, grads: &mut Grads<T>) -> ParamGrads {
        let entries = self.vars.iter().enumerate().filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (i, g.cast()))).collect();
        ParamGrads { entries }
    }
}

/// Gradients for a subset of a store's parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub entries: Vec<(usize, Tensor)>,
}

impl ParamGrads {
    pub fn paths<'a>(&'a self, store: &'a ParamStore) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter_map(|(i, _)| store.get_index(*i).map(|(p, _)| p))
    }

    pub fn get<'a>(&'a self, store: &ParamStore, path: &str) -> Option<&'a Tensor> {
        let idx = store.index_of(path)?;
        self.entries.iter().find(|(i, _)| *i == idx).map(|(_, g)| g)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("a.weight", Shape::new(4, 3, 3, 3), ParamKind::Trainable, Init::FanInUniform { fan_in: 27 }).unwrap();
        s.register("a.bn.weight", Shape::new(1, 4, 1, 1), ParamKind::Trainable, Init::Constant(1.0)).unwrap();
        s.register("a.bn.running_var", Shape::new(1, 4, 1, 1), ParamKind::Buffer, Init::Constant(1.0)).unwrap();
        s
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut s = sample_store();
        let err = s.register("a.weight", Shape::scalar(), ParamKind::Frozen, Init::Constant(0.0)).unwrap_err();
        assert!(matches!(err, Error::DuplicateParam(p) if p == "a.weight"));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let mut a = sample_store();
        let mut b = sample_store();
        init_params(&mut a, InitScheme::FanInUniform, 7);
        init_params(&mut b, InitScheme::FanInUniform, 7);
        assert_eq!(a, b);
        init_params(&mut b, InitScheme::FanInUniform, 8);
        assert_ne!(a, b);
    }

    #[test]
    fn fan_in_bound_and_constant_inits() {
        let mut s = sample_store();
        init_params(&mut s, InitScheme::FanInUniform, 3);
        let bound = (6.0f64 / (3.0 * 3.0 * 3.0)).sqrt() as f32;
        let w = s.value("a.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > bound * 0.5));
        assert!(s.value("a.bn.weight").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn insertion_order_is_preserved() {
        let s = sample_store();
        let paths: Vec<&str> = s.iter().map(|(p, _)| p).collect();
        assert_eq!(paths, ["a.weight", "a.bn.weight", "a.bn.running_var"]);
        assert!(s.get("a.weight").unwrap().adam.is_some());
        assert!(s.get("a.bn.running_var").unwrap().adam.is_none());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::new();
        s.register("bn.running_mean", Shape::new(1, 1, 1, 1), ParamKind::Buffer, Init::Constant(0.0)).unwrap();
        s.register("bn.running_var", Shape::new(1, 1, 1, 1), ParamKind::Buffer, Init::Constant(1.0)).unwrap();
        let stats = BnBatchStats { prefix: "bn".into(), mean: vec![2.0], var: vec![3.0], count: 4 };
        s.apply_bn_stats(&[stats], 0.1).unwrap();
        assert!((s.value("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-7);
        // 0.9 * 1 + 0.1 * 3 * 4/3
        assert!((s.value("bn.running_var").unwrap().data()[0] - 1.3).abs() < 1e-6);
    }
}
