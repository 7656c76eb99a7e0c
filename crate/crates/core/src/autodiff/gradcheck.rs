//! Central finite-difference gradient checker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Elements probed per input; inputs with fewer elements are probed fully.
    pub samples_per_input: usize,
    pub seed: u64,
    /// Floor for the denominator of the relative error.
    pub abs_floor: f64,
    /// Replay the unperturbed pass's ReLU and max-pool branches in the
    /// perturbed passes instead of skipping elements that flip one. Needed
    /// for deep networks, where almost every perturbation flips some unit.
    pub pin_branches: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-3, samples_per_input: 24, seed: 0, abs_floor: 1e-6, pin_branches: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements skipped because `x ± h` crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against
/// `(f(x+h) − f(x−h)) / 2h` for sampled elements of every input.
///
/// `f` receives a fresh tape and one trainable leaf per input. Elements whose
/// perturbed evaluations take a different branch through a piecewise-linear
/// op than the unperturbed one are skipped and counted.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], config: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    if config.pin_branches {
        tape.record_branches();
    }
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_signature = tape.kink_signature();
    let branches = tape.take_branches();
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64), E> {
        let mut tape = Tape::new();
        if let Some(log) = &branches {
            tape.pin_branches(log.clone());
        }
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item()?, tape.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let n = input.numel();
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let indices: Vec<usize> = if n <= config.samples_per_input {
            (0..n).collect()
        } else {
            let mut picked = rand::seq::index::sample(&mut rng, n, config.samples_per_input).into_vec();
            picked.sort_unstable();
            picked
        };
        for idx in indices {
            let original = input.data()[idx];
            let mut shifted = |delta: f64| -> Result<(f64, u64), E> {
                let mut data = input.to_vec();
                data[idx] = original + delta;
                probe[i] = Tensor::new(input.shape(), data)?;
                eval(&probe)
            };
            let (plus, sig_plus) = shifted(config.step)?;
            let (minus, sig_minus) = shifted(-config.step)?;
            probe[i] = input.clone();
            if branches.is_none() && (sig_plus != base_signature || sig_minus != base_signature) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(config.abs_floor);
            let err = (a - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
