//! Procedural stand-in corpus: smooth, warm "photographic" foreground shapes
//! with exact masks, and cool, textured "painterly" backgrounds.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image_io::{encode_pnm, RawImage};
use super::manifest::{ForegroundEntry, Manifest, Split};
use super::DataError;

pub const MANIFEST_NAME: &str = "manifest.txt";

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Foreground image and mask. The shape is an ellipse covering a large part
/// of the frame, shaded with a linear gradient and a soft highlight.
pub fn synth_foreground(size: usize, rng: &mut impl Rng) -> (RawImage, RawImage) {
    let s = size as f64;
    let (cy, cx) = (rng.random_range(0.4..0.6) * s, rng.random_range(0.4..0.6) * s);
    let (ry, rx) = (rng.random_range(0.22..0.36) * s, rng.random_range(0.22..0.36) * s);
    let angle: f64 = rng.random_range(0.0..TAU);
    let base = [rng.random_range(0.78..0.92), rng.random_range(0.5..0.68), rng.random_range(0.28..0.42)];
    let backdrop = [rng.random_range(0.62..0.75), rng.random_range(0.58..0.7), rng.random_range(0.5..0.62)];
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut img = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
            let inside = u * u + v * v <= 1.0;
            mask.push(if inside { 255 } else { 0 });
            let t = ((y as f64 / s - 0.5) * dy + (x as f64 / s - 0.5) * dx) * 0.2;
            for c in 0..3 {
                let value = if inside {
                    let highlight = 0.08 * (1.0 - (u + 0.3).powi(2) - (v + 0.3).powi(2)).max(0.0);
                    base[c] + t + highlight
                } else {
                    backdrop[c] + 0.5 * t
                };
                img.push(to_byte(value));
            }
        }
    }
    (RawImage { width: size, height: size, channels: 3, data: img }, RawImage { width: size, height: size, channels: 1, data: mask })
}

/// Background with a dark, blue-green palette and brush-like sinusoidal texture.
pub fn synth_background(size: usize, rng: &mut impl Rng) -> RawImage {
    let s = size as f64;
    let base = [rng.random_range(0.12..0.28), rng.random_range(0.22..0.38), rng.random_range(0.38..0.58)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..TAU);
            let freq = rng.random_range(2.0..9.0) * TAU / s;
            (angle.sin() * freq, angle.cos() * freq, rng.random_range(0.0..TAU), rng.random_range(0.03..0.08))
        })
        .collect();
    let tint = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let texture: f64 = waves.iter().map(|&(fy, fx, ph, amp)| amp * (fy * y as f64 + fx * x as f64 + ph).sin()).sum();
            for c in 0..3 {
                data.push(to_byte(base[c] + texture * tint[c]));
            }
        }
    }
    RawImage { width: size, height: size, channels: 3, data }
}

/// The images [`synth_corpus`] writes, in memory.
pub fn synth_images(n_fg: usize, n_bg: usize, size: usize, seed: u64) -> (Vec<(RawImage, RawImage)>, Vec<RawImage>) {
    let mut fg_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(seed);
    bg_rng.set_stream(1);
    let fgs = (0..n_fg).map(|_| synth_foreground(size, &mut fg_rng)).collect();
    let bgs = (0..n_bg).map(|_| synth_background(size, &mut bg_rng)).collect();
    (fgs, bgs)
}

/// Writes `n_fg` foregrounds (image + mask), `n_bg` backgrounds and
/// `manifest.txt` into `dir`. Output bytes depend only on the arguments.
pub fn synth_corpus(dir: &Path, n_fg: usize, n_bg: usize, size: usize, seed: u64) -> Result<Manifest, DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let write = |name: &str, bytes: Vec<u8>| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| DataError::Io { path: path.clone(), source })?;
        Ok::<_, DataError>(path)
    };
    let (fgs, bgs) = synth_images(n_fg, n_bg, size, seed);
    let mut manifest = Manifest { split: Split::Train, ..Manifest::default() };
    for (i, (img, mask)) in fgs.iter().enumerate() {
        let image = write(&format!("fg_{i:03}.ppm"), encode_pnm(img))?;
        let mask = write(&format!("fg_{i:03}_mask.pgm"), encode_pnm(mask))?;
        manifest.foregrounds.push(ForegroundEntry { image, mask });
    }
    for (i, bg) in bgs.iter().enumerate() {
        manifest.backgrounds.push(write(&format!("bg_{i:03}.ppm"), encode_pnm(bg))?);
    }
    let text = format!("# synthetic corpus: seed {seed}, size {size}\n{}", manifest.render(dir));
    write(MANIFEST_NAME, text.into_bytes())?;
    Ok(manifest)
}
