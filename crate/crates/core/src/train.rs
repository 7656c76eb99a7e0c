//! Alternating adversarial optimization with Adam.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::config::{LossWeights, ModelConfig, TrainConfig};
use crate::data::{Batch, Corpus, Sampler};
use crate::discriminator::DiscriminatorSet;
use crate::error::{Error, Result};
use crate::generator::{Generator, HarmonizeOutput, LAYERS};
use crate::losses::{self, LossBundle};
use crate::nn::{Binding, BnMode, ParamGrads, ParamStore, BN_MOMENTUM};
use crate::tensor::{Element, Tensor};

pub const LOSS_LOG: &str = "loss.log";
/// Offset between the generator and discriminator initialization seeds.
const DISC_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn from_train(c: &TrainConfig) -> Self {
        AdamConfig { lr: c.learning_rate, beta1: c.adam_beta1, beta2: c.adam_beta2, eps: c.adam_eps }
    }
}

/// Bias-corrected Adam on every parameter present in `grads`. Each parameter
/// keeps its own step counter; parameters without a gradient are untouched.
pub fn adam_step(store: &mut ParamStore, grads: ParamGrads, cfg: &AdamConfig) -> Result<()> {
    for (index, grad) in grads.entries {
        let (path, param) = store.get_index_mut(index).ok_or_else(|| Error::MissingParam(format!("#{index}")))?;
        let path = path.to_string();
        if grad.shape() != param.value.shape() {
            return Err(Error::config(format!("gradient for `{path}` has shape {:?}, parameter {:?}", grad.shape(), param.value.shape())));
        }
        let adam = param.adam.as_mut().ok_or_else(|| Error::config(format!("`{path}` is not trainable")))?;
        adam.step += 1;
        let t = adam.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let mut values = param.value.to_vec();
        for (i, (w, &g)) in values.iter_mut().zip(grad.data()).enumerate() {
            let g = g as f64;
            let m = cfg.beta1 * adam.m[i] as f64 + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * adam.v[i] as f64 + (1.0 - cfg.beta2) * g * g;
            adam.m[i] = m as f32;
            adam.v[i] = v as f32;
            let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
        param.value = Tensor::new(param.value.shape(), values)?;
    }
    Ok(())
}

/// Which optimizer phases a step runs. Both are on in ordinary training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phases {
    pub discriminators: bool,
    pub generator: bool,
}

impl Phases {
    pub const BOTH: Phases = Phases { discriminators: true, generator: true };
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { step, what: what.to_string() })
    }
}

fn scalar(tape: &Tape<f32>, v: Var) -> Result<f64> {
    Ok(tape.value(v).item()? as f64)
}

/// Generator outputs copied onto another tape as constants.
pub struct DetachedOutputs {
    pub refined: [Var; LAYERS],
    pub style: [Var; LAYERS],
    pub masks: [Var; LAYERS],
    pub output: Var,
    pub background: Var,
    pub mask: Var,
}

impl DetachedOutputs {
    pub fn copy<T: Element>(dst: &mut Tape<T>, src: &Tape<T>, out: &HarmonizeOutput, background: Var, mask: Var) -> Self {
        let mut copy = |v: Var| dst.constant(src.value(v).clone());
        DetachedOutputs {
            refined: out.refined.map(&mut copy),
            style: out.style.map(&mut copy),
            masks: out.masks.map(&mut copy),
            output: copy(out.output),
            background: copy(background),
            mask: copy(mask),
        }
    }
}

/// Active discriminator objectives; disabled terms are `None`.
pub struct DiscTerms {
    pub feature: Option<Var>,
    pub image: Option<Var>,
    pub total: Var,
}

pub fn discriminator_terms<T: Element>(
    tape: &mut Tape<T>,
    discs: &DiscriminatorSet,
    p: &mut Binding,
    model: &ModelConfig,
    d: &DetachedOutputs,
) -> Result<DiscTerms> {
    let feature =
        if model.use_feature_disc { Some(losses::feature_disc_loss(tape, discs, p, &d.refined, &d.style, &d.masks)?) } else { None };
    let image = if model.use_image_disc { Some(losses::image_disc_loss(tape, discs, p, d.output, d.background, d.mask)?) } else { None };
    let terms: Vec<Var> = [feature, image].into_iter().flatten().collect();
    let total = losses::sum_terms(tape, &terms)?;
    Ok(DiscTerms { feature, image, total })
}

/// Generator objectives; `total` is the weighted sum of the active terms.
pub struct GenTerms {
    pub content: Var,
    pub style: Var,
    pub feature: Option<Var>,
    pub image: Option<Var>,
    pub total: Var,
}

/// Scores `out` through the frozen encoder and the discriminators bound in
/// `dp` (normally as constants).
pub fn generator_terms<T: Element>(
    tape: &mut Tape<T>,
    generator: &Generator,
    p: &Binding,
    discs: &DiscriminatorSet,
    dp: &mut Binding,
    out: &HarmonizeOutput,
    weights: &LossWeights,
) -> Result<GenTerms> {
    let model = &generator.config;
    let out_feats = generator.encoder.forward(tape, p, out.output)?;
    let style = losses::style_loss(tape, &out_feats, &out.style, &out.masks)?;
    let content = losses::content_loss(tape, out_feats[LAYERS - 1], out.content[LAYERS - 1])?;
    let feature = if model.use_feature_disc { Some(losses::feature_gen_loss(tape, discs, dp, &out.refined)?) } else { None };
    let image = if model.use_image_disc { Some(losses::image_gen_loss(tape, discs, dp, out.output)?) } else { None };
    let weighted: Vec<Var> =
        [(Some(content), weights.content), (Some(style), weights.style), (feature, weights.adv_feat), (image, weights.adv_img)]
            .into_iter()
            .filter_map(|(v, w)| v.map(|v| if w == 1.0 { v } else { tape.affine(v, w, 0.0) }))
            .collect();
    let total = losses::sum_terms(tape, &weighted)?;
    Ok(GenTerms { content, style, feature, image, total })
}

/// One alternating update on `batch`: a discriminator step on detached
/// generator outputs, then a generator step against the updated
/// discriminators. The main encoder never changes.
pub fn train_step(
    generator: &mut Generator,
    discs: &mut DiscriminatorSet,
    batch: &Batch,
    config: &TrainConfig,
    step: u64,
    phases: Phases,
) -> Result<LossBundle> {
    let adam = AdamConfig::from_train(config);
    let weights = config.loss_weights;
    let model = &config.model;
    if *model != generator.config {
        return Err(Error::config("training configuration does not match the generator"));
    }

    let mut tape = Tape::<f32>::new();
    let mut p = generator.bind(&mut tape, BnMode::Train, phases.generator);
    let composite = tape.constant(batch.composite.clone());
    let background = tape.constant(batch.background.clone());
    let mask = tape.constant(batch.mask.clone());
    let out = generator.harmonize(&mut tape, &mut p, composite, background, mask)?;

    let (mut l_feat_d, mut l_img_d) = (0.0, 0.0);
    if model.use_feature_disc || model.use_image_disc {
        let mut dtape = Tape::<f32>::new();
        let detached = DetachedOutputs::copy(&mut dtape, &tape, &out, background, mask);
        let mut dp = discs.bind(&mut dtape, phases.discriminators);
        let terms = discriminator_terms(&mut dtape, discs, &mut dp, model, &detached)?;
        if let Some(v) = terms.feature {
            l_feat_d = check_finite(step, "l_adv_feat_D", scalar(&dtape, v)?)?;
        }
        if let Some(v) = terms.image {
            l_img_d = check_finite(step, "l_adv_img_D", scalar(&dtape, v)?)?;
        }
        if phases.discriminators {
            let mut grads = dtape.backward(terms.total)?;
            let grads = dp.collect_grads(&mut grads);
            if !grads.is_finite() {
                return Err(Error::NonFinite { step, what: "discriminator gradient".into() });
            }
            let stats = dp.take_bn_stats();
            drop(dp);
            adam_step(&mut discs.store, grads, &adam)?;
            discs.store.apply_bn_stats(&stats, BN_MOMENTUM)?;
        }
    }

    let mut dp = discs.bind(&mut tape, false);
    let terms = generator_terms(&mut tape, generator, &p, discs, &mut dp, &out, &weights)?;
    let l_content = check_finite(step, "l_content", scalar(&tape, terms.content)?)?;
    let l_style = check_finite(step, "l_style", scalar(&tape, terms.style)?)?;
    let l_feat_g = terms.feature.map(|v| scalar(&tape, v)).transpose()?.unwrap_or(0.0);
    let l_img_g = terms.image.map(|v| scalar(&tape, v)).transpose()?.unwrap_or(0.0);
    check_finite(step, "l_adv_feat_G", l_feat_g)?;
    check_finite(step, "l_adv_img_G", l_img_g)?;

    if phases.generator {
        let mut grads = tape.backward(terms.total)?;
        let grads = p.collect_grads(&mut grads);
        if !grads.is_finite() {
            return Err(Error::NonFinite { step, what: "generator gradient".into() });
        }
        let stats = p.take_bn_stats();
        drop(p);
        drop(dp);
        adam_step(&mut generator.store, grads, &adam)?;
        generator.store.apply_bn_stats(&stats, BN_MOMENTUM)?;
    }

    Ok(LossBundle::assemble(
        weights.content * l_content,
        weights.style * l_style,
        weights.adv_feat * l_feat_g,
        weights.adv_img * l_img_g,
        l_feat_d,
        l_img_d,
    ))
}

/// Losses of the current models on `batch` without updating anything.
pub fn evaluate_losses(generator: &Generator, discs: &DiscriminatorSet, batch: &Batch, config: &TrainConfig) -> Result<LossBundle> {
    let mut g = generator.clone();
    let mut d = discs.clone();
    train_step(&mut g, &mut d, batch, config, 0, Phases { discriminators: false, generator: false })
}

/// Position in the data stream; together with the seed it fixes every
/// future batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataCursor {
    pub seed: u64,
    pub cursor: u64,
}

/// Everything needed to continue a run.
#[derive(Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub generator: Generator,
    pub discriminators: DiscriminatorSet,
    pub data: DataCursor,
    /// Mean of every logged bundle so far.
    pub loss_avg: LossBundle,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.model.clone(), config.seed)?;
        let discriminators = DiscriminatorSet::new(&config.model, config.seed ^ DISC_SEED_OFFSET)?;
        let data = DataCursor { seed: config.seed, cursor: 0 };
        Ok(TrainState { config, step: 0, generator, discriminators, data, loss_avg: LossBundle::default() })
    }

    /// Draws the next batch and runs one alternating update.
    pub fn step_once(&mut self, corpus: &Corpus) -> Result<LossBundle> {
        let mut sampler = Sampler::new(corpus, self.data.seed, self.data.cursor, self.config.image_size);
        let batch = sampler.next_batch(self.config.batch_size)?;
        let bundle = train_step(&mut self.generator, &mut self.discriminators, &batch, &self.config, self.step, Phases::BOTH)?;
        self.data.cursor = sampler.cursor;
        self.step += 1;
        let k = self.step as f64;
        let avg = &mut self.loss_avg;
        for (dst, src) in [
            (&mut avg.l_content, bundle.l_content),
            (&mut avg.l_style, bundle.l_style),
            (&mut avg.l_adv_feat_g, bundle.l_adv_feat_g),
            (&mut avg.l_adv_img_g, bundle.l_adv_img_g),
            (&mut avg.l_total_g, bundle.l_total_g),
            (&mut avg.l_adv_feat_d, bundle.l_adv_feat_d),
            (&mut avg.l_adv_img_d, bundle.l_adv_img_d),
            (&mut avg.l_total_d, bundle.l_total_d),
        ] {
            *dst += (src - *dst) / k;
        }
        Ok(bundle)
    }
}

/// `%g`-style rendering with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        let s = format!("{v:.5e}");
        let (mantissa, e) = s.split_once('e').unwrap_or((&s, "0"));
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{mantissa}e{e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// One loss-log line; `step` is the number of completed updates.
pub fn loss_log_line(step: u64, b: &LossBundle) -> String {
    format!(
        "step={step} l_total_G={} l_total_D={} l_c={} l_s={} l_adv_feat_G={} l_adv_img_G={}",
        format_sig6(b.l_total_g),
        format_sig6(b.l_total_d),
        format_sig6(b.l_content),
        format_sig6(b.l_style),
        format_sig6(b.l_adv_feat_g),
        format_sig6(b.l_adv_img_g),
    )
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.phrn"))
}

/// Trains until `state.step == state.config.max_steps`. With `out`, writes a
/// checkpoint before the first update of a fresh run, every
/// `checkpoint_every` steps and at the end, and appends to `loss.log`.
pub fn train_loop(
    state: &mut TrainState,
    corpus: &Corpus,
    out: Option<&Path>,
    mut on_step: impl FnMut(u64, &LossBundle),
) -> Result<Vec<LossBundle>> {
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let file = if state.step == 0 { File::create(&path) } else { OpenOptions::new().append(true).create(true).open(&path) }
                .map_err(|e| Error::io(&path, e))?;
            if state.step == 0 {
                checkpoint::save(state, &checkpoint_path(dir, 0))?;
            }
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut last_saved = state.step;
    while state.step < state.config.max_steps {
        let bundle = state.step_once(corpus)?;
        on_step(state.step, &bundle);
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", loss_log_line(state.step, &bundle)).map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(bundle);
        let every = state.config.checkpoint_every;
        if let Some(dir) = out {
            if every > 0 && state.step.is_multiple_of(every) {
                checkpoint::save(state, &checkpoint_path(dir, state.step))?;
                last_saved = state.step;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out {
        if last_saved != state.step {
            checkpoint::save(state, &checkpoint_path(dir, state.step))?;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::{AdamMoments, Init, ParamKind};
    use crate::tensor::Shape;

    fn scalar_store(w: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Shape::scalar(), ParamKind::Trainable, Init::Constant(w)).unwrap();
        s.set_value("w", Tensor::scalar(w)).unwrap();
        s.get_mut("w").unwrap().adam = Some(AdamMoments::new(1));
        s
    }

    fn grads(g: f32) -> ParamGrads {
        ParamGrads { entries: vec![(0, Tensor::scalar(g))] }
    }

    const CFG: AdamConfig = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999, eps: 1e-8 };

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.5);
        adam_step(&mut s, grads(0.0), &CFG).unwrap();
        assert_eq!(s.value("w").unwrap().item().unwrap(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0f32, -0.02] {
            let mut s = scalar_store(0.0);
            adam_step(&mut s, grads(g), &CFG).unwrap();
            let w = s.value("w").unwrap().item().unwrap() as f64;
            assert!((w + 0.1 * g.signum() as f64).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        // independent reference in f64
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut s = scalar_store(0.0);
        let mut prev = 0.0;
        for t in 1..=10 {
            let g = 2.0 * (w - 3.0);
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.1 * (m / (1.0 - 0.5f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            let cur = s.value("w").unwrap().item().unwrap();
            adam_step(&mut s, grads(2.0 * (cur - 3.0)), &CFG).unwrap();
            let got = s.value("w").unwrap().item().unwrap() as f64;
            assert!((got - w).abs() < 1e-5, "step {t}: {got} vs {w}");
            assert!(got > prev && got < 3.0);
            prev = got;
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(1234.5678), "1234.57");
        assert_eq!(format_sig6(1.5e-7), "1.5e-7");
        assert_eq!(format_sig6(12345678.0), "1.23457e7");
        let b = LossBundle::assemble(1.0, 2.0, 0.0, 0.5, 0.25, 0.25);
        assert_eq!(loss_log_line(3, &b), "step=3 l_total_G=3.5 l_total_D=0.5 l_c=1 l_s=2 l_adv_feat_G=0 l_adv_img_G=0.5");
    }

    #[test]
    fn state_seeds_are_reproducible() {
        let mut c = TrainConfig::desk();
        c.model = ModelConfig::desk();
        let a = TrainState::new(c.clone()).unwrap();
        let b = TrainState::new(c).unwrap();
        for ((pa, va), (_, vb)) in a.generator.store.iter().zip(b.generator.store.iter()) {
            assert_eq!(va.value, vb.value, "{pa}");
        }
    }
}
