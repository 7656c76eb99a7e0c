use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use pharnet::checkpoint;
use pharnet::config::ModelConfig;
use pharnet::data::{load_image, load_mask, save_image};
use pharnet::generator::{Generator, SIZE_MULTIPLE};
use pharnet::tensor::Shape;
use pharnet::Tensor;

const WARMUPS: usize = 3;

#[derive(Args)]
pub struct HarmonizeArgs {
    #[arg(long)]
    composite: PathBuf,
    #[arg(long)]
    background: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output image; `.png` writes PNG, anything else PPM.
    #[arg(long)]
    out: PathBuf,
    /// Also write the learned soft mask as a gray image.
    #[arg(long)]
    soft_mask: Option<PathBuf>,
    /// Report mean wall-clock time of the forward pass.
    #[arg(long)]
    time: bool,
    #[arg(long, default_value_t = 100)]
    reps: usize,
}

#[derive(Args)]
pub struct TimingArgs {
    /// Model to time; without it a freshly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    scale: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn padded_extent(n: usize) -> usize {
    n.div_ceil(SIZE_MULTIPLE).max(2) * SIZE_MULTIPLE
}

/// Extends `t` to `h × w` by repeating its last row and column, or with
/// zeros when `replicate` is false.
fn pad_to(t: &Tensor, h: usize, w: usize, replicate: bool) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s.with_spatial(h, w), |n, c, y, x| {
        if replicate {
            t.at(n, c, y.min(s.h - 1), x.min(s.w - 1))
        } else if y < s.h && x < s.w {
            t.at(n, c, y, x)
        } else {
            0.0
        }
    })
}

fn crop_to(t: &Tensor, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(t.shape().with_spatial(h, w), |n, c, y, x| t.at(n, c, y, x))
}

/// Mean milliseconds of `f` over `reps` calls after a few warmups.
fn mean_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..WARMUPS {
        f()?;
    }
    let start = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / reps.max(1) as f64)
}

pub fn run(args: HarmonizeArgs) -> Result<ExitCode> {
    let composite = load_image(&args.composite).with_context(|| format!("composite {}", args.composite.display()))?;
    let background = load_image(&args.background).with_context(|| format!("background {}", args.background.display()))?;
    let mask = load_mask(&args.mask).with_context(|| format!("mask {}", args.mask.display()))?;
    let s = composite.shape();
    for (what, other) in [("background", background.shape()), ("mask", mask.shape())] {
        if (other.h, other.w) != (s.h, s.w) {
            bail!("{what} is {}x{} but the composite is {}x{}", other.w, other.h, s.w, s.h);
        }
    }
    if mask.sum_f64() == 0.0 {
        bail!("mask {} selects no pixels; nothing to harmonize", args.mask.display());
    }
    let generator = checkpoint::load(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?.generator;

    let (h, w) = (padded_extent(s.h), padded_extent(s.w));
    let (composite, background, mask) = if (h, w) != (s.h, s.w) {
        eprintln!("warning: {}x{} is not a multiple of {SIZE_MULTIPLE}; padding to {w}x{h} and cropping the result", s.w, s.h);
        (pad_to(&composite, h, w, true), pad_to(&background, h, w, true), pad_to(&mask, h, w, false))
    } else {
        (composite, background, mask)
    };
    let result = generator.harmonize_images(&composite, &background, &mask)?;
    save_image(&crop_to(&result.output, s.h, s.w), &args.out)?;
    if let Some(path) = &args.soft_mask {
        save_image(&crop_to(&result.soft_mask, s.h, s.w), path)?;
    }
    if args.time {
        let ms = mean_ms(args.reps, || {
            generator.harmonize_images(&composite, &background, &mask)?;
            Ok(())
        })?;
        println!("mean_ms={ms:.3}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn timing(args: TimingArgs) -> Result<ExitCode> {
    let generator = match &args.checkpoint {
        Some(path) => checkpoint::load(path)?.generator,
        None => Generator::new(ModelConfig { scale: args.scale, ..ModelConfig::default() }, args.seed)?,
    };
    let (h, w) = (args.height, args.width);
    Generator::check_extent(h, w)?;
    let shape = Shape::new(1, 3, h, w);
    let composite = Tensor::from_fn(shape, |_, c, y, x| ((x * 7 + y * 3 + c * 5) % 255) as f32 / 255.0);
    let background = Tensor::from_fn(shape, |_, c, y, x| ((x * 2 + y * 11 + c * 13) % 255) as f32 / 255.0);
    let mask =
        Tensor::from_fn(shape.with_channels(1), |_, _, y, x| (y >= h / 4 && y < 3 * h / 4 && x >= w / 4 && x < 3 * w / 4) as u8 as f32);
    let ms = mean_ms(args.reps, || {
        generator.harmonize_images(&composite, &background, &mask)?;
        Ok(())
    })?;
    eprintln!("{w}x{h}, scale {}, {} reps after {WARMUPS} warmups", generator.config.scale, args.reps);
    println!("mean_ms={ms:.3}");
    Ok(ExitCode::SUCCESS)
}
