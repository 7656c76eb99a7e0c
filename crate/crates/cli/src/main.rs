use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use pharnet::autodiff::inject_fault_from_env;
use pharnet::bt::{bt_fit, PairCounts, PSEUDO_COUNT};
use pharnet::checkpoint;
use pharnet::config::{Ablation, TrainConfig};
use pharnet::data::{synth_corpus, Corpus, Manifest};
use pharnet::eval::{self, EndToEndProbe, MAX_REL_ERROR};
use pharnet::train::{loss_log_line, train_loop, TrainState};

mod harmonize;

#[derive(Parser)]
#[command(name = "pharnet", version, about = "Painterly image harmonization on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Harmonize one composite with a trained checkpoint.
    Harmonize(harmonize::HarmonizeArgs),
    /// Measure harmonization wall-clock time on synthetic input.
    Timing(harmonize::TimingArgs),
    /// Compare backward rules against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a procedural training corpus and its manifest.
    SynthData(SynthArgs),
    /// Fit Bradley-Terry scores to pairwise preference counts.
    BtFit(BtArgs),
    /// Run the invariant suite and optionally the smoke-training checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest file, or `synth` for an in-memory synthetic corpus.
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total number of updates.
    #[arg(long, default_value_t = 200)]
    steps: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    scale: Option<usize>,
    /// Training crop size.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Encoder layers receiving residual features, e.g. `1,2,3,4`.
    #[arg(long, value_delimiter = ',')]
    residual_layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Images per population of the synthetic corpus.
    #[arg(long, default_value_t = 32)]
    synth_count: usize,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long, conflicts_with_all = ["lr", "scale", "size", "seed", "batch", "ablation", "residual_layers", "encoder_weights"])]
    resume: Option<PathBuf>,
    /// Take the frozen main-encoder weights from this checkpoint.
    #[arg(long)]
    encoder_weights: Option<PathBuf>,
    /// Only print every n-th loss line.
    #[arg(long, default_value_t = 1)]
    log_every: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Width divisor of the model used by the end-to-end checks.
    #[arg(long, default_value_t = 8)]
    scale: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also check l_total_G and l_total_D through the whole network.
    #[arg(long)]
    end_to_end: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    foregrounds: usize,
    #[arg(long, default_value_t = 32)]
    backgrounds: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BtArgs {
    /// File of `PAIR <a> <b> <wins_a> <wins_b>` lines.
    input: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    scale: usize,
    /// Add the 200-step training run (several minutes).
    #[arg(long)]
    smoke: bool,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: pharnet::Error| e.to_string())
}

fn usage_error(kind: ErrorKind, msg: impl std::fmt::Display) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn load_corpus(data: &str, count: usize, size: usize, seed: u64) -> Result<Corpus> {
    if data == "synth" {
        return Ok(Corpus::synthetic(count, count, size, seed)?);
    }
    let manifest = Manifest::load(Path::new(data))?;
    Ok(Corpus::load(&manifest)?)
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    if let (Some(ab), Some(layers)) = (args.ablation, &args.residual_layers) {
        if !ab.components().0 {
            usage_error(
                ErrorKind::ArgumentConflict,
                format!("--ablation {ab} has no residual encoder, so --residual-layers {layers:?} cannot apply"),
            );
        }
    }
    let mut state = match &args.resume {
        Some(path) => checkpoint::load(path).with_context(|| format!("resuming from {}", path.display()))?,
        None => {
            let mut config = TrainConfig::desk();
            config.seed = args.seed.unwrap_or(config.seed);
            config.learning_rate = args.lr.unwrap_or(config.learning_rate);
            config.image_size = args.size.unwrap_or(config.image_size);
            config.batch_size = args.batch.unwrap_or(config.batch_size);
            config.model.scale = args.scale.unwrap_or(config.model.scale);
            if let Some(ab) = args.ablation {
                config.model = config.model.with_ablation(ab);
            }
            if let Some(layers) = args.residual_layers.clone() {
                config.model.residual_layers = layers;
            }
            if let Err(e) = config.validate() {
                usage_error(ErrorKind::InvalidValue, e);
            }
            let mut state = TrainState::new(config)?;
            if let Some(path) = &args.encoder_weights {
                let donor = checkpoint::load(path).with_context(|| format!("encoder weights {}", path.display()))?;
                state.generator.load_encoder_weights(&donor.generator.store)?;
            }
            state
        }
    };
    state.config.max_steps = args.steps;
    state.config.checkpoint_every = args.checkpoint_every;
    let c = &state.config;
    let corpus = load_corpus(&args.data, args.synth_count, c.image_size, c.seed)?;
    eprintln!(
        "training {} steps from step {} (scale {}, {}x{}, batch {}, residual encoder {}, D_f {}, D_m {})",
        c.max_steps,
        state.step,
        c.model.scale,
        c.image_size,
        c.image_size,
        c.batch_size,
        c.model.use_residual_encoder,
        c.model.use_feature_disc,
        c.model.use_image_disc
    );
    let every = args.log_every.max(1);
    let history = train_loop(&mut state, &corpus, args.out.as_deref(), |step, bundle| {
        if step % every == 0 {
            println!("{}", loss_log_line(step, bundle));
        }
    })?;
    if let Some(last) = history.last() {
        if !(last.l_total_g.is_finite() && last.l_total_d.is_finite()) {
            bail!("final losses are not finite");
        }
    }
    if let Some(out) = &args.out {
        eprintln!("wrote {}", pharnet::train::checkpoint_path(out, state.step).display());
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    if let Some(op) = inject_fault_from_env().map_err(anyhow::Error::msg)? {
        eprintln!("warning: backward rule of `{}` has its sign flipped", op.name());
    }
    let mut checks = eval::op_checks(args.seed)?;
    if args.end_to_end {
        let mut config = TrainConfig::desk().model;
        config.scale = args.scale;
        if let Err(e) = config.validate() {
            usage_error(ErrorKind::InvalidValue, e);
        }
        checks.extend(eval::end_to_end_checks(&config, &EndToEndProbe::desk(args.seed))?);
    }
    println!("{:<28} {:>12} {:>8} {:>8}", "op", "max_rel_err", "checked", "skipped");
    for c in &checks {
        let r = &c.report;
        let flag = if c.passed() { "" } else { "  FAIL" };
        println!("{:<28} {:>12.3e} {:>8} {:>8}{flag}", c.name, r.max_rel_error, r.checked, r.skipped);
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} of {} checks below {MAX_REL_ERROR:e}", checks.len() - failed, checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn synth_data(args: SynthArgs) -> Result<ExitCode> {
    if args.foregrounds == 0 || args.backgrounds == 0 || args.size < 16 {
        usage_error(ErrorKind::InvalidValue, "need at least one image per population and a size of at least 16");
    }
    synth_corpus(&args.out, args.foregrounds, args.backgrounds, args.size, args.seed)?;
    println!("{}", args.out.join(pharnet::data::synth::MANIFEST_NAME).display());
    Ok(ExitCode::SUCCESS)
}

fn bt(args: BtArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let fit = bt_fit(&PairCounts::parse(&text)?)?;
    if fit.regularized {
        println!("# {PSEUDO_COUNT} added to both directions of every compared pair");
    }
    let mut order: Vec<usize> = (0..fit.names.len()).collect();
    order.sort_by(|&a, &b| fit.scores[b].total_cmp(&fit.scores[a]));
    for i in order {
        println!("{} {:.6}", fit.names[i], fit.scores[i]);
    }
    Ok(ExitCode::SUCCESS)
}

fn check(args: CheckArgs) -> Result<ExitCode> {
    let mut reports = eval::run_invariant_suite(args.seed, args.scale)?;
    if args.smoke {
        let run = eval::run_smoke_training(&eval::SmokeConfig::desk(args.seed), |_, _| {})?;
        reports.extend(run.reports);
    }
    print!("{}", eval::render_table(&reports));
    for r in &reports {
        println!("{}", r.line());
    }
    Ok(if reports.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Harmonize(a) => harmonize::run(a),
        Command::Timing(a) => harmonize::timing(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SynthData(a) => synth_data(a),
        Command::BtFit(a) => bt(a),
        Command::Check(a) => check(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
