//! Verification harness: invariant battery, gradient checks and the
//! smoke-training diagnostics, each reported as a [`CheckReport`].

pub mod gradients;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::bt::{bt_fit, PairCounts};
use crate::checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{Batch, Corpus, Sampler, MAX_AREA_FRACTION, MIN_AREA_FRACTION};
use crate::discriminator::DiscriminatorSet;
use crate::error::Result;
use crate::generator::{adain_stylize, mask_pyramid, Generator, BLEND_HEAD, LAYERS, MAIN_ENCODER};
use crate::losses::LossBundle;
use crate::nn::{BnMode, DsBlock, ParamStore, UsBlock};
use crate::tensor::{Shape, Tensor};
use crate::train::{evaluate_losses, train_step, Phases, TrainState};
use crate::Var;

pub use gradients::{end_to_end_checks, op_checks, EndToEndProbe, NamedCheck, FD_STEP, MAX_REL_ERROR};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub runtime: Duration,
}

impl CheckReport {
    /// `CHECK <name> <pass|fail> <value> <threshold>`
    pub fn line(&self) -> String {
        format!("CHECK {} {} {:e} {:e}", self.name, if self.passed { "pass" } else { "fail" }, self.value, self.threshold)
    }
}

pub fn render_table(reports: &[CheckReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  status  {:>12}  {:>12}  {:>10}\n", "check", "value", "threshold", "ms");
    for r in reports {
        let status = if r.passed { "pass" } else { "FAIL" };
        let ms = r.runtime.as_secs_f64() * 1e3;
        let _ = writeln!(out, "{:<width$}  {status:<6}  {:>12.4e}  {:>12.4e}  {ms:>10.1}", r.name, r.value, r.threshold);
    }
    out
}

/// Masked AdaIN on f64 features; swappable so that seeded bugs can be
/// shown to trip the suite.
pub type AdainFn = fn(&mut Tape<f64>, Var, Var, Var) -> Result<Var>;

/// Names reported by [`run_invariant_suite`], in order.
pub const INVARIANT_CHECKS: [&str; 16] = [
    "adain_statistics",
    "adain_background_features",
    "residual_background_features",
    "blend_forced_zero_mask",
    "hard_blend_background",
    "composite_background",
    "composite_area_fraction",
    "mask_pyramid_nonempty",
    "frozen_encoder",
    "phase_separation",
    "gradient_ops",
    "gradient_end_to_end",
    "shape_contracts",
    "determinism_replay",
    "checkpoint_roundtrip",
    "bt_symmetry_dominance",
];

/// Relative error allowed between the masked foreground moments of the
/// stylized features and the whole-map moments of the style features.
pub const ADAIN_TOLERANCE: f64 = 1e-4;
pub const ADAIN_INSTANCES: usize = 100;
/// Composites drawn by the data checks.
pub const DATA_SAMPLES: usize = 1000;

struct Timer(Instant);

impl Timer {
    fn start() -> Self {
        Timer(Instant::now())
    }

    /// Pass iff `value <= threshold`.
    fn at_most(self, name: &str, value: f64, threshold: f64) -> CheckReport {
        CheckReport { name: name.into(), passed: value <= threshold, value, threshold, runtime: self.0.elapsed() }
    }

    /// Pass iff `value < threshold`.
    fn below(self, name: &str, value: f64, threshold: f64) -> CheckReport {
        CheckReport { name: name.into(), passed: value < threshold, value, threshold, runtime: self.0.elapsed() }
    }
}

/// Population mean and standard deviation of `t[n, c]` over pixels where
/// `select` holds.
pub fn region_moments<T: crate::Element>(t: &Tensor<T>, n: usize, c: usize, select: impl Fn(usize, usize) -> bool) -> (f64, f64) {
    let s = t.shape();
    let mut values = Vec::new();
    for y in 0..s.h {
        for x in 0..s.w {
            if select(y, x) {
                values.push(t.at(n, c, y, x).as_f64());
            }
        }
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// Values with exactly mean `mean` and population std `std` over the
/// selected pixels (and unconstrained noise elsewhere).
fn standardized_channel(rng: &mut ChaCha8Rng, h: usize, w: usize, selected: &[bool], mean: f64, std: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let picked: Vec<f64> = raw.iter().zip(selected).filter(|(_, &s)| s).map(|(v, _)| *v).collect();
    let k = picked.len() as f64;
    let m = picked.iter().sum::<f64>() / k;
    let sd = (picked.iter().map(|v| (v - m).powi(2)).sum::<f64>() / k).sqrt();
    raw.iter().map(|v| mean + std * (v - m) / sd).collect()
}

fn signed_magnitude(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(0.5..2.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Largest relative moment mismatch over random instances at every layer.
/// Channel stds and mean magnitudes are drawn from `[0.5, 2]` and masks
/// cover at least four pixels, so the variance floor inside the moments
/// perturbs the result by less than `2e-5`.
pub fn adain_statistic_error(model: &ModelConfig, seed: u64, instances: usize, adain: AdainFn) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = model.encoder_widths();
    let mut worst: f64 = 0.0;
    for (l, &c) in widths.iter().enumerate() {
        let side = 32 >> l;
        for _ in 0..instances {
            let mask: Vec<bool> = loop {
                let m: Vec<bool> = (0..side * side).map(|_| rng.random_bool(0.5)).collect();
                let k = m.iter().filter(|&&b| b).count();
                if k >= 4 && k < side * side {
                    break m;
                }
            };
            let all = vec![true; side * side];
            let mut content = Vec::new();
            let mut style = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..c {
                let (cm, cs) = (signed_magnitude(&mut rng), rng.random_range(0.5..2.0));
                let (sm, ss) = (signed_magnitude(&mut rng), rng.random_range(0.5..2.0));
                content.extend(standardized_channel(&mut rng, side, side, &mask, cm, cs));
                style.extend(standardized_channel(&mut rng, side, side, &all, sm, ss));
                targets.push((sm, ss));
            }
            let shape = Shape::new(1, c, side, side);
            let mut tape = Tape::<f64>::new();
            let cv = tape.constant(Tensor::new(shape, content)?);
            let sv = tape.constant(Tensor::new(shape, style)?);
            let mv = tape.constant(Tensor::new(shape.with_channels(1), mask.iter().map(|&b| b as u8 as f64).collect())?);
            let out = adain(&mut tape, cv, sv, mv)?;
            let f = tape.value(out);
            for (ch, (sm, ss)) in targets.into_iter().enumerate() {
                let (m, s) = region_moments(f, 0, ch, |y, x| mask[y * side + x]);
                worst = worst.max(((m - sm) / sm).abs()).max(((s - ss) / ss).abs());
            }
        }
    }
    Ok(worst)
}

/// Random `[n, 3, size, size]` composite, background and a rectangular mask
/// per item.
fn random_inputs(n: usize, size: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let shape = Shape::new(n, 3, size, size);
    let c = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0));
    let b = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0));
    let boxes: Vec<(usize, usize, usize, usize)> = (0..n)
        .map(|_| {
            let (h, w) = (rng.random_range(size / 4..size / 2), rng.random_range(size / 4..size / 2));
            (rng.random_range(0..size - h), rng.random_range(0..size - w), h, w)
        })
        .collect();
    let m = Tensor::from_fn(shape.with_channels(1), |i, _, y, x| {
        let (t, l, h, w) = boxes[i];
        (y >= t && y < t + h && x >= l && x < l + w) as u8 as f64
    });
    (c, b, m)
}

/// Largest `|a - b|` over pixels where `mask` is zero, and how many such
/// pixels there were.
fn diff_outside<T: crate::Element>(a: &Tensor<T>, b: &Tensor<T>, mask: &Tensor<T>) -> (f64, usize) {
    let s = a.shape();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    if mask.at(n, 0, y, x).as_f64() == 0.0 {
                        count += 1;
                        worst = worst.max((a.at(n, c, y, x).as_f64() - b.at(n, c, y, x).as_f64()).abs());
                    }
                }
            }
        }
    }
    (worst, count)
}

/// `F_a = F_c` and `F̃_a = F_c` wherever the layer mask is zero; returns the
/// two largest deviations.
pub fn background_feature_deviation(model: &ModelConfig, seed: u64, adain: AdainFn) -> Result<(f64, f64)> {
    let generator = Generator::new(model.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, b, m) = random_inputs(2, 64, &mut rng);
    let mut tape = Tape::<f64>::new();
    let mut p = generator.bind(&mut tape, BnMode::Train, false);
    let (cv, bv, mv) = (tape.constant(c), tape.constant(b), tape.constant(m));
    let out = generator.harmonize(&mut tape, &mut p, cv, bv, mv)?;
    let (mut adain_dev, mut refined_dev) = (0.0f64, 0.0f64);
    for l in 0..LAYERS {
        let stylized = adain(&mut tape, out.content[l], out.style[l], out.masks[l])?;
        let (content, mask) = (tape.value(out.content[l]), tape.value(out.masks[l]));
        let (d, k) = diff_outside(tape.value(stylized), content, mask);
        let (r, _) = diff_outside(tape.value(out.refined[l]), content, mask);
        adain_dev = adain_dev.max(if k == 0 { f64::INFINITY } else { d });
        refined_dev = refined_dev.max(r);
    }
    Ok((adain_dev, refined_dev))
}

/// Output vs background where the soft mask is zero, once with the blend
/// head forced shut and once with blending disabled.
pub fn blend_deviation(model: &ModelConfig, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, b, m) = random_inputs(2, 64, &mut rng);
    let run = |generator: &Generator| -> Result<(f64, usize)> {
        let mut tape = Tape::<f64>::new();
        let mut p = generator.bind(&mut tape, BnMode::Train, false);
        let (cv, bv, mv) = (tape.constant(c.clone()), tape.constant(b.clone()), tape.constant(m.clone()));
        let out = generator.harmonize(&mut tape, &mut p, cv, bv, mv)?;
        Ok(diff_outside(tape.value(out.output), tape.value(bv), tape.value(out.soft_mask)))
    };
    let mut forced = Generator::new(ModelConfig { use_blending: true, ..model.clone() }, seed)?;
    let bias = format!("{BLEND_HEAD}conv.bias");
    let shape = forced.store.value(&bias)?.shape();
    forced.store.set_value(&bias, Tensor::full(shape, -1000.0))?;
    let (zero_dev, zero_count) = run(&forced)?;
    // every pixel must be closed for the forced case to be meaningful
    let zero_dev = if zero_count == c.numel() { zero_dev } else { f64::INFINITY };
    let hard = Generator::new(ModelConfig { use_blending: false, ..model.clone() }, seed)?;
    let (hard_dev, _) = run(&hard)?;
    Ok((zero_dev, hard_dev))
}

/// Data-protocol counts over `samples` composites: largest background
/// deviation outside the mask, area-fraction violations, and items whose
/// coarsest mask level is empty.
pub fn composite_audit(corpus: &Corpus, seed: u64, size: usize, samples: usize) -> Result<(f64, usize, usize)> {
    let mut sampler = Sampler::new(corpus, seed, 0, size);
    let (mut dev, mut area_bad, mut empty) = (0.0f64, 0, 0);
    for _ in 0..samples {
        let s = sampler.next_sample()?;
        dev = dev.max(diff_outside(&s.composite, &s.background, &s.mask).0);
        let a = s.area_fraction();
        if !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&a) {
            area_bad += 1;
        }
        let mut tape = Tape::<f32>::new();
        let m = tape.constant(s.mask.clone());
        let pyramid = mask_pyramid(&mut tape, m)?;
        if tape.value(pyramid[LAYERS - 1]).sum_f64() == 0.0 {
            empty += 1;
        }
    }
    Ok((dev, area_bad, empty))
}

/// Paths under `prefix` whose values differ between two stores.
pub fn changed_params(before: &ParamStore, after: &ParamStore, prefix: &str) -> Vec<String> {
    before
        .iter()
        .filter(|(path, _)| path.starts_with(prefix))
        .filter(|(path, p)| after.get(path).map(|q| q.value != p.value).unwrap_or(true))
        .map(|(path, _)| path.to_string())
        .collect()
}

/// Small training configuration used by the suite's training checks.
pub fn suite_config(seed: u64, scale: usize) -> TrainConfig {
    TrainConfig { image_size: 64, batch_size: 2, seed, model: ModelConfig { scale, ..ModelConfig::default() }, ..TrainConfig::default() }
}

fn suite_batch(corpus: &Corpus, config: &TrainConfig) -> Result<Batch> {
    Ok(Sampler::new(corpus, config.seed, 0, config.image_size).next_batch(config.batch_size)?)
}

/// Violations of the alternation contract on one batch: generator tensors
/// touched by a discriminator-only step, discriminator tensors touched by a
/// generator-only step, and trainable groups left unchanged by their own
/// phase.
pub fn phase_violations(config: &TrainConfig, batch: &Batch) -> Result<usize> {
    let state = TrainState::new(config.clone())?;
    let mut violations = 0;

    let (mut g, mut d) = (state.generator.clone(), state.discriminators.clone());
    train_step(&mut g, &mut d, batch, config, 0, Phases { discriminators: true, generator: false })?;
    violations += changed_params(&state.generator.store, &g.store, "").len();
    violations += changed_params(&state.discriminators.store, &d.store, "").is_empty() as usize;

    let (mut g, mut d) = (state.generator.clone(), state.discriminators.clone());
    train_step(&mut g, &mut d, batch, config, 0, Phases { discriminators: false, generator: true })?;
    violations += changed_params(&state.discriminators.store, &d.store, "").len();
    violations += changed_params(&state.generator.store, &g.store, MAIN_ENCODER).len();
    for prefix in ["E_r.", "dec.", BLEND_HEAD] {
        violations += changed_params(&state.generator.store, &g.store, prefix).is_empty() as usize;
    }
    Ok(violations)
}

/// Shape mismatches for harmonization and discriminator scoring at
/// `sizes`, plus the down/up-sampling block contracts.
pub fn shape_mismatches(model: &ModelConfig, seed: u64, sizes: &[(usize, usize)]) -> Result<usize> {
    let generator = Generator::new(model.clone(), seed)?;
    let discs = DiscriminatorSet::new(model, seed)?;
    let mut bad = 0;
    for &(h, w) in sizes {
        let shape = Shape::new(1, 3, h, w);
        let img = Tensor::from_fn(shape, |_, c, y, x| ((c * 7 + y * 3 + x * 5) % 23) as f32 / 23.0);
        let bg = Tensor::from_fn(shape, |_, c, y, x| ((c * 5 + y * 2 + x * 3) % 19) as f32 / 19.0);
        let mask = Tensor::from_fn(shape.with_channels(1), |_, _, y, x| (y >= h / 4 && y < h / 2 && x >= w / 3 && x < w / 2) as u8 as f32);
        let mut tape = Tape::<f32>::new();
        let mut p = generator.bind(&mut tape, BnMode::Eval, false);
        let (cv, bv, mv) = (tape.constant(img), tape.constant(bg), tape.constant(mask));
        let out = generator.harmonize(&mut tape, &mut p, cv, bv, mv)?;
        bad += (tape.shape(out.output) != shape) as usize + (tape.shape(out.soft_mask) != shape.with_channels(1)) as usize;
        let mut dp = discs.bind(&mut tape, false);
        for l in 0..LAYERS {
            let f = tape.shape(out.refined[l]);
            let score = discs.score_features(&mut tape, &mut dp, l + 1, out.refined[l])?;
            bad += (tape.shape(score) != f.with_channels(1)) as usize;
        }
        let score = discs.score_image(&mut tape, &mut dp, out.output)?;
        bad += (tape.shape(score) != shape.with_channels(1)) as usize;
    }

    let mut store = ParamStore::new();
    let (ds, us) = (DsBlock::new("probe.ds", 3, 4), UsBlock::new("probe.us", 4, 2));
    ds.register(&mut store, crate::nn::ParamKind::Trainable)?;
    us.register(&mut store, crate::nn::ParamKind::Trainable)?;
    let mut tape = Tape::<f32>::new();
    let mut p = store.bind(&mut tape, BnMode::Train, |_| false);
    let x = tape.constant(Tensor::from_fn(Shape::new(2, 3, 12, 20), |_, c, y, x| ((c + y + 2 * x) % 5) as f32));
    let down = ds.forward(&mut tape, &mut p, x)?;
    let up = us.forward(&mut tape, &mut p, down)?;
    bad += (tape.shape(down) != Shape::new(2, 4, 6, 10)) as usize;
    bad += (tape.shape(up) != Shape::new(2, 2, 12, 20)) as usize;
    Ok(bad)
}

fn bundle_diff(a: &LossBundle, b: &LossBundle) -> f64 {
    a.named()
        .iter()
        .zip(b.named())
        .map(|((_, x), (_, y))| if x == &y { 0.0 } else { (x - y).abs().max(f64::MIN_POSITIVE) })
        .fold(0.0, f64::max)
}

/// Largest loss difference between two identically seeded runs of `steps`.
pub fn replay_difference(config: &TrainConfig, corpus: &Corpus, steps: usize) -> Result<f64> {
    let run = || -> Result<(Vec<LossBundle>, TrainState)> {
        let mut s = TrainState::new(config.clone())?;
        let losses = (0..steps).map(|_| s.step_once(corpus)).collect::<Result<Vec<_>>>()?;
        Ok((losses, s))
    };
    let (a, sa) = run()?;
    let (b, sb) = run()?;
    let mut diff = a.iter().zip(&b).map(|(x, y)| bundle_diff(x, y)).fold(0.0, f64::max);
    if sa.generator.store != sb.generator.store || sa.discriminators.store != sb.discriminators.store {
        diff = f64::INFINITY;
    }
    Ok(diff)
}

/// Bytes and tensors that fail to survive save → load → save.
pub fn checkpoint_mismatches(state: &TrainState) -> Result<usize> {
    let bytes = checkpoint::to_bytes(state)?;
    let back = checkpoint::from_bytes(&bytes)?;
    let again = checkpoint::to_bytes(&back)?;
    let mut bad = (bytes != again) as usize;
    bad += (back.step != state.step) as usize + (back.data != state.data) as usize + (back.loss_avg != state.loss_avg) as usize;
    for (a, b) in [(&state.generator.store, &back.generator.store), (&state.discriminators.store, &back.discriminators.store)] {
        bad += a.iter().zip(b.iter()).filter(|((pa, x), (pb, y))| pa != pb || x != y).count();
    }
    Ok(bad)
}

/// 0 when a symmetric pair scores exactly (0, 0) and a shutout ranks the
/// winner first; otherwise the size of the violation.
pub fn bt_violation() -> f64 {
    let sym = bt_fit(&PairCounts::unnamed(vec![vec![0.0, 10.0], vec![10.0, 0.0]]));
    let dom = bt_fit(&PairCounts::unnamed(vec![vec![0.0, 10.0], vec![0.0, 0.0]]));
    match (sym, dom) {
        (Ok(s), Ok(d)) => s.scores.iter().map(|v| v.abs()).fold(0.0, f64::max) + (d.scores[1] - d.scores[0]).max(0.0),
        _ => f64::INFINITY,
    }
}

/// Largest error over `checks`; a check that compared nothing counts as
/// infinitely wrong.
pub fn worst_error(checks: &[NamedCheck]) -> f64 {
    checks.iter().map(|c| if c.report.checked == 0 { f64::INFINITY } else { c.report.max_rel_error }).fold(0.0, f64::max)
}

/// Every check in [`INVARIANT_CHECKS`] with the shipped AdaIN.
pub fn run_invariant_suite(seed: u64, scale: usize) -> Result<Vec<CheckReport>> {
    run_invariant_suite_with(seed, scale, adain_stylize::<f64>)
}

pub fn run_invariant_suite_with(seed: u64, scale: usize, adain: AdainFn) -> Result<Vec<CheckReport>> {
    let config = suite_config(seed, scale);
    let model = &config.model;
    let mut out = Vec::with_capacity(INVARIANT_CHECKS.len());

    let t = Timer::start();
    out.push(t.below("adain_statistics", adain_statistic_error(model, seed, ADAIN_INSTANCES, adain)?, ADAIN_TOLERANCE));

    let t = Timer::start();
    let (adain_dev, refined_dev) = background_feature_deviation(model, seed, adain)?;
    out.push(t.at_most("adain_background_features", adain_dev, 0.0));
    out.push(Timer::start().at_most("residual_background_features", refined_dev, 0.0));

    let t = Timer::start();
    let (zero_dev, hard_dev) = blend_deviation(model, seed)?;
    out.push(t.at_most("blend_forced_zero_mask", zero_dev, 0.0));
    out.push(Timer::start().at_most("hard_blend_background", hard_dev, 0.0));

    let t = Timer::start();
    let corpus = Corpus::synthetic(16, 16, config.image_size, seed)?;
    let (dev, area_bad, empty) = composite_audit(&corpus, seed, config.image_size, DATA_SAMPLES)?;
    out.push(t.at_most("composite_background", dev, 0.0));
    out.push(Timer::start().at_most("composite_area_fraction", area_bad as f64, 0.0));
    out.push(Timer::start().at_most("mask_pyramid_nonempty", empty as f64, 0.0));

    let t = Timer::start();
    let mut state = TrainState::new(config.clone())?;
    let before = state.generator.store.clone();
    for _ in 0..3 {
        state.step_once(&corpus)?;
    }
    out.push(t.at_most("frozen_encoder", changed_params(&before, &state.generator.store, MAIN_ENCODER).len() as f64, 0.0));

    let t = Timer::start();
    out.push(t.at_most("phase_separation", phase_violations(&config, &suite_batch(&corpus, &config)?)? as f64, 0.0));

    let t = Timer::start();
    let ops = op_checks(seed)?;
    out.push(t.below("gradient_ops", worst_error(&ops), MAX_REL_ERROR));
    let t = Timer::start();
    let probe = EndToEndProbe::desk(seed);
    out.push(t.below("gradient_end_to_end", worst_error(&end_to_end_checks(model, &probe)?), MAX_REL_ERROR));

    let t = Timer::start();
    out.push(t.at_most("shape_contracts", shape_mismatches(model, seed, &[(256, 256), (320, 192)])? as f64, 0.0));

    let t = Timer::start();
    out.push(t.at_most("determinism_replay", replay_difference(&config, &corpus, 2)?, 0.0));

    let t = Timer::start();
    out.push(t.at_most("checkpoint_roundtrip", checkpoint_mismatches(&state)? as f64, 0.0));

    let t = Timer::start();
    out.push(t.at_most("bt_symmetry_dominance", bt_violation(), 0.0));

    debug_assert_eq!(out.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), INVARIANT_CHECKS);
    Ok(out)
}

/// Smoke-run settings.
#[derive(Clone, Debug)]
pub struct SmokeConfig {
    pub train: TrainConfig,
    pub steps: u64,
    /// Step at which the discriminator probe loss is compared with step 0.
    pub probe_step: u64,
    pub corpus_fg: usize,
    pub corpus_bg: usize,
    /// Seed of the probe batch, distinct from the training stream.
    pub probe_seed: u64,
}

impl SmokeConfig {
    /// Full model at width 8 on 64×64 images for 200 steps.
    pub fn desk(seed: u64) -> Self {
        let train = TrainConfig { seed, max_steps: 200, ..TrainConfig::desk() };
        SmokeConfig { train, steps: 200, probe_step: 50, corpus_fg: 16, corpus_bg: 16, probe_seed: seed ^ 0x9e37_79b9 }
    }
}

pub const SMOKE_CHECKS: [&str; 4] = ["smoke_losses_finite", "smoke_disc_probe_decrease", "smoke_style_decrease", "smoke_harmony_proxy"];

/// Result of [`run_smoke_training`]: the reports plus the final state and
/// per-step losses for further audits.
pub struct SmokeRun {
    pub reports: Vec<CheckReport>,
    pub initial: TrainState,
    pub state: TrainState,
    pub history: Vec<LossBundle>,
    pub disc_probe: (f64, f64),
    pub style_probe: (f64, f64),
    pub harmony: (f64, f64),
}

/// Mean over items and channels of `|μ_fg(x) − μ(bg)| + |σ_fg(x) − σ(bg)|`,
/// foreground statistics taken inside the mask, background statistics over
/// the whole background image.
pub fn masked_stat_distance(x: &Tensor, background: &Tensor, mask: &Tensor) -> f64 {
    let s = x.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let (mf, sf) = region_moments(x, n, c, |y, w| mask.at(n, 0, y, w) > 0.5);
            let (mb, sb) = region_moments(background, n, c, |_, _| true);
            total += (mf - mb).abs() + (sf - sb).abs();
        }
    }
    total / (s.n * s.c) as f64
}

/// Trains from scratch on a synthetic corpus and checks that losses stay
/// finite, the discriminators learn on a fixed probe, the style loss falls,
/// and outputs move towards the background statistics.
///
/// The discriminator probe scores the step-0 generator's outputs on the
/// probe batch, so only the discriminators change between the two readings.
pub fn run_smoke_training(config: &SmokeConfig, mut on_step: impl FnMut(u64, &LossBundle)) -> Result<SmokeRun> {
    let t = Timer::start();
    let train = &config.train;
    let corpus = Corpus::synthetic(config.corpus_fg, config.corpus_bg, train.image_size, train.seed)?;
    let probe = Sampler::new(&corpus, config.probe_seed, 0, train.image_size).next_batch(train.batch_size)?;
    let mut state = TrainState::new(train.clone())?;
    let initial = state.clone();

    let d0 = evaluate_losses(&initial.generator, &state.discriminators, &probe, train)?;
    let mut d_probe = (d0.l_total_d, f64::NAN);
    let mut history = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let b = state.step_once(&corpus)?;
        on_step(state.step, &b);
        history.push(b);
        if state.step == config.probe_step {
            d_probe.1 = evaluate_losses(&initial.generator, &state.discriminators, &probe, train)?.l_total_d;
        }
    }
    let style = (d0.l_style, evaluate_losses(&state.generator, &state.discriminators, &probe, train)?.l_style);
    let before = masked_stat_distance(&probe.composite, &probe.background, &probe.mask);
    let out = state.generator.harmonize_images(&probe.composite, &probe.background, &probe.mask)?;
    let harmony = (masked_stat_distance(&out.output, &probe.background, &probe.mask), before);
    let finite = history.iter().all(|b| b.first_non_finite().is_none()) && !history.is_empty();

    let elapsed = t.0.elapsed();
    let report = |name: &str, passed: bool, value: f64, threshold: f64| CheckReport {
        name: name.into(),
        passed,
        value,
        threshold,
        runtime: elapsed,
    };
    let reports = vec![
        report(SMOKE_CHECKS[0], finite, history.len() as f64, config.steps as f64),
        report(SMOKE_CHECKS[1], d_probe.1 < d_probe.0, d_probe.1, d_probe.0),
        report(SMOKE_CHECKS[2], style.1 < style.0, style.1, style.0),
        report(SMOKE_CHECKS[3], harmony.0 < harmony.1, harmony.0, harmony.1),
    ];
    Ok(SmokeRun { reports, initial, state, history, disc_probe: d_probe, style_probe: style, harmony })
}
