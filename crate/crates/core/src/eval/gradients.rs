//! Finite-difference checks for every differentiable op and for the two
//! end-to-end training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, BatchNormStats, ConvOptions, GradCheckConfig, GradCheckReport, OpKind, PadMode, Tape, Var};
use crate::config::{LossWeights, ModelConfig};
use crate::discriminator::DiscriminatorSet;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::BnMode;
use crate::tensor::{Shape, Tensor, TensorError};
use crate::train::{discriminator_terms, generator_terms, DetachedOutputs};

pub const MAX_REL_ERROR: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-3;

/// Inputs are drawn uniformly from `[0.1, 1.0]`.
pub fn uniform(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.random_range(0.1..1.0)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

fn binary_mask(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // the first pixel of every item is on so no region is empty
    Tensor::from_fn(shape, |_, _, y, x| (y + x == 0 || rng.random_bool(0.5)) as u8 as f64)
}

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < MAX_REL_ERROR && self.report.checked > 0
    }
}

/// Reduces an arbitrary tensor to a scalar with a non-uniform upstream
/// gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> std::result::Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = tape.constant(uniform(tape.shape(y), &mut rng));
    tape.mse(y, target)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> std::result::Result<Var, TensorError>>;

fn op_case(op: OpKind, rng: &mut ChaCha8Rng) -> (OpFn, Vec<Tensor<f64>>) {
    let s = Shape::new;
    let mut u = |shape: Shape| uniform(shape, rng);
    match op {
        OpKind::Conv2d => (
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvOptions::new(2, 1, PadMode::Zero))?;
                project(t, y, 1)
            }),
            vec![u(s(2, 2, 6, 5)), u(s(3, 2, 4, 4)), u(s(1, 3, 1, 1))],
        ),
        OpKind::BatchNormTrain => (
            Box::new(|t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], BatchNormStats::Batch, 1e-5)?.out;
                project(t, y, 2)
            }),
            vec![u(s(3, 2, 3, 3)), u(s(1, 2, 1, 1)), u(s(1, 2, 1, 1))],
        ),
        OpKind::BatchNormEval => {
            let mean = u(s(1, 2, 1, 1));
            let var = u(s(1, 2, 1, 1));
            (
                Box::new(move |t, v| {
                    let stats = BatchNormStats::Running { mean: &mean, var: &var };
                    let y = t.batch_norm(v[0], v[1], v[2], stats, 1e-5)?.out;
                    project(t, y, 3)
                }),
                vec![u(s(2, 2, 3, 3)), u(s(1, 2, 1, 1)), u(s(1, 2, 1, 1))],
            )
        }
        OpKind::Relu => (
            Box::new(|t, v| {
                let shifted = t.affine(v[0], 1.0, -0.55);
                let y = t.relu(shifted);
                project(t, y, 4)
            }),
            vec![u(s(2, 2, 3, 3))],
        ),
        OpKind::LeakyRelu => (
            Box::new(|t, v| {
                let shifted = t.affine(v[0], 1.0, -0.55);
                let y = t.leaky_relu(shifted, 0.2);
                project(t, y, 5)
            }),
            vec![u(s(2, 2, 3, 3))],
        ),
        OpKind::Sigmoid => (
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, 6)
            }),
            vec![u(s(1, 3, 3, 3))],
        ),
        OpKind::UpsampleNearest => (
            Box::new(|t, v| {
                let y = t.upsample_nearest(v[0], 2)?;
                project(t, y, 7)
            }),
            vec![u(s(2, 2, 3, 2))],
        ),
        OpKind::MaxPool2 => (
            Box::new(|t, v| {
                let y = t.max_pool2(v[0])?;
                project(t, y, 8)
            }),
            vec![u(s(2, 2, 4, 6))],
        ),
        OpKind::Pad => (
            Box::new(|t, v| {
                let y = t.pad(v[0], [1, 2, 2, 1], PadMode::Reflect)?;
                project(t, y, 9)
            }),
            vec![u(s(1, 2, 4, 3))],
        ),
        OpKind::Crop => (
            Box::new(|t, v| {
                let y = t.crop(v[0], 1, 2, 3, 2)?;
                project(t, y, 10)
            }),
            vec![u(s(2, 2, 5, 5))],
        ),
        OpKind::ConcatChannels => (
            Box::new(|t, v| {
                let y = t.concat_channels(&[v[0], v[1]])?;
                project(t, y, 11)
            }),
            vec![u(s(2, 2, 3, 3)), u(s(2, 1, 3, 3))],
        ),
        OpKind::MaskedMean => {
            let mask = binary_mask(s(2, 1, 4, 4), rng);
            (
                Box::new(move |t, v| {
                    let m = t.constant(mask.clone());
                    let y = t.masked_mean(v[0], Some(m))?;
                    project(t, y, 12)
                }),
                vec![uniform(s(2, 3, 4, 4), rng)],
            )
        }
        OpKind::MaskedStd => {
            let mask = binary_mask(s(2, 1, 4, 4), rng);
            (
                Box::new(move |t, v| {
                    let m = t.constant(mask.clone());
                    let y = t.masked_std(v[0], Some(m), 1e-5)?;
                    project(t, y, 13)
                }),
                vec![uniform(s(2, 3, 4, 4), rng)],
            )
        }
        OpKind::Add => (
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 14)
            }),
            vec![u(s(2, 3, 3, 3)), u(s(2, 3, 1, 1))],
        ),
        OpKind::Sub => (
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, 15)
            }),
            vec![u(s(2, 3, 3, 3)), u(s(2, 3, 3, 3))],
        ),
        OpKind::Mul => (
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 16)
            }),
            vec![u(s(2, 3, 3, 3)), u(s(2, 1, 3, 3))],
        ),
        OpKind::Div => (
            Box::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                project(t, y, 17)
            }),
            vec![u(s(2, 3, 3, 3)), u(s(2, 3, 1, 1))],
        ),
        OpKind::Blend => (
            Box::new(|t, v| {
                let y = t.blend(v[0], v[1], v[2])?;
                project(t, y, 18)
            }),
            vec![u(s(2, 1, 3, 3)), u(s(2, 3, 3, 3)), u(s(2, 3, 3, 3))],
        ),
        OpKind::Affine => (
            Box::new(|t, v| {
                let y = t.affine(v[0], -1.7, 0.3);
                project(t, y, 19)
            }),
            vec![u(s(1, 2, 3, 3))],
        ),
        OpKind::Sum => (
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            }),
            vec![u(s(2, 2, 3, 3))],
        ),
        OpKind::Mean => (
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean(sq))
            }),
            vec![u(s(2, 2, 3, 3))],
        ),
        OpKind::Mse => (Box::new(|t, v| t.mse(v[0], v[1])), vec![u(s(2, 2, 3, 3)), u(s(2, 2, 3, 3))]),
    }
}

fn config(seed: u64) -> GradCheckConfig {
    GradCheckConfig { step: FD_STEP, seed, ..GradCheckConfig::default() }
}

/// One report per [`OpKind`], in [`OpKind::ALL`] order.
pub fn op_checks(seed: u64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OpKind::ALL
        .iter()
        .map(|&op| {
            let (f, inputs) = op_case(op, &mut rng);
            let report = grad_check::<_, TensorError>(|t, v| f(t, v), &inputs, &config(seed))?;
            Ok(NamedCheck { name: op.name().to_string(), report })
        })
        .collect()
}

/// Parameters probed by the end-to-end checks.
pub const GENERATOR_PROBES: [&str; 4] =
    ["dec.out.weight", "blend.conv.weight", "E_r.stage1.transition.weight", "E_r.stage2.res.bn1.weight"];
pub const DISCRIMINATOR_PROBES: [&str; 4] = ["D_f1.head.weight", "D_f4.ds0.conv.weight", "D_m.us6.bn.weight", "D_m.ds0.conv.weight"];

/// Images of `[batch, 3, size, size]` and a nonempty rectangular mask.
fn probe_images(batch: usize, size: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let shape = Shape::new(batch, 3, size, size);
    let c = uniform(shape, rng);
    let b = uniform(shape, rng);
    let q = size / 4;
    let m = Tensor::from_fn(shape.with_channels(1), |n, _, y, x| (y >= q + n && y < 3 * q && x >= q && x < 3 * q - n) as u8 as f64);
    (c, b, m)
}

fn param_inputs(store: &crate::nn::ParamStore, paths: &[&str]) -> Result<Vec<Tensor<f64>>> {
    paths.iter().map(|p| Ok(store.value(p)?.cast())).collect()
}

/// Geometry and sampling of the end-to-end checks.
#[derive(Clone, Debug)]
pub struct EndToEndProbe {
    pub batch: usize,
    pub size: usize,
    pub seed: u64,
    pub samples_per_param: usize,
    pub step: f64,
}

impl EndToEndProbe {
    /// Batch 2 at 32x32, 24 elements per probed parameter, `h = 1e-3`.
    pub fn desk(seed: u64) -> Self {
        EndToEndProbe { batch: 2, size: 32, seed, samples_per_param: 24, step: FD_STEP }
    }
}

/// `l_total_G` and `l_total_D` of a full model (all components enabled)
/// differentiated with respect to a handful of parameters.
///
/// Branches are pinned to the unperturbed pass. Batch norm at the 1x1
/// bottleneck of `D_m` (and of `D_f^4` on small images) normalizes over one
/// value per batch item, which makes the objectives strongly curved and
/// shrinks gradients of the parameters in front of it to ~1e-6. Central
/// differences at `h = 1e-3` then miss those gradients by more than `1e-3`
/// relative even though they converge as `h` shrinks.
pub fn end_to_end_checks(model: &ModelConfig, probe: &EndToEndProbe) -> Result<Vec<NamedCheck>> {
    let seed = probe.seed;
    let generator = Generator::new(model.clone(), seed)?;
    let discs = DiscriminatorSet::new(model, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, b, m) = probe_images(probe.batch, probe.size, &mut rng);
    let weights = LossWeights::default();
    let cfg = GradCheckConfig {
        samples_per_input: probe.samples_per_param,
        pin_branches: true,
        step: probe.step,
        seed,
        ..GradCheckConfig::default()
    };

    let gen_report = grad_check::<_, Error>(
        |tape, vars| {
            let mut p = generator.bind(tape, BnMode::Train, false);
            for (path, &v) in GENERATOR_PROBES.iter().zip(vars) {
                p.replace(path, v)?;
            }
            let (cv, bv, mv) = (tape.constant(c.clone()), tape.constant(b.clone()), tape.constant(m.clone()));
            let out = generator.harmonize(tape, &mut p, cv, bv, mv)?;
            let mut dp = discs.bind(tape, false);
            Ok(generator_terms(tape, &generator, &p, &discs, &mut dp, &out, &weights)?.total)
        },
        &param_inputs(&generator.store, &GENERATOR_PROBES)?,
        &cfg,
    )?;

    let mut gtape = Tape::<f64>::new();
    let mut p = generator.bind(&mut gtape, BnMode::Train, false);
    let (cv, bv, mv) = (gtape.constant(c.clone()), gtape.constant(b.clone()), gtape.constant(m.clone()));
    let out = generator.harmonize(&mut gtape, &mut p, cv, bv, mv)?;
    let disc_report = grad_check::<_, Error>(
        |tape, vars| {
            let detached = DetachedOutputs::copy(tape, &gtape, &out, bv, mv);
            let mut dp = discs.bind(tape, false);
            for (path, &v) in DISCRIMINATOR_PROBES.iter().zip(vars) {
                dp.replace(path, v)?;
            }
            Ok(discriminator_terms(tape, &discs, &mut dp, model, &detached)?.total)
        },
        &param_inputs(&discs.store, &DISCRIMINATOR_PROBES)?,
        &cfg,
    )?;
    Ok(vec![NamedCheck { name: "l_total_G".into(), report: gen_report }, NamedCheck { name: "l_total_D".into(), report: disc_report }])
}
