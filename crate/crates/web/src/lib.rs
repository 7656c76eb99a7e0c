//! WebAssembly bindings for the static demo page in `www/`.

use pharnet::bt::{bt_fit, PairCounts};
use pharnet::data::{composite, synth, CompositeSample};
use pharnet::generator::adain_stylize;
use pharnet::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Draws before giving up on a seed whose placements are all degenerate.
const MAX_DRAWS: usize = 64;

/// One synthetic composite and its pixel-space AdaIN counterpart.
#[wasm_bindgen]
pub struct Scene {
    sample: CompositeSample,
    stylized: Tensor,
}

fn rgba(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(4 * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = t.at(0, if s.c == 1 { 0 } else { c }, y, x);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Matches the masked foreground moments of every colour channel to the
/// background's, using the network's AdaIN on raw pixels.
pub fn pixel_adain(sample: &CompositeSample) -> Result<Tensor, String> {
    let mut tape = Tape::<f32>::new();
    let c = tape.constant(sample.composite.clone());
    let s = tape.constant(sample.background.clone());
    let m = tape.constant(sample.mask.clone());
    let out = adain_stylize(&mut tape, c, s, m).map_err(|e| e.to_string())?;
    Ok(tape.value(out).clone())
}

pub fn draw_scene(seed: u32, size: usize) -> Result<Scene, String> {
    if !(32..=512).contains(&size) {
        return Err(format!("size {size} is outside 32..=512"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let bg = synth::synth_background(size, &mut rng).to_rgb_tensor();
    for _ in 0..MAX_DRAWS {
        let (img, mask) = synth::synth_foreground(size, &mut rng);
        if let Ok(sample) = composite(&img.to_rgb_tensor(), &mask.to_mask(), &bg, size, &mut rng) {
            let stylized = pixel_adain(&sample)?;
            return Ok(Scene { sample, stylized });
        }
    }
    Err(format!("seed {seed} produced no valid placement"))
}

/// Fitted scores as `name score` lines, best first.
pub fn fit_pairs(text: &str) -> Result<String, String> {
    let counts = PairCounts::parse(text).map_err(|e| e.to_string())?;
    let fit = bt_fit(&counts).map_err(|e| e.to_string())?;
    let mut order: Vec<usize> = (0..fit.names.len()).collect();
    order.sort_by(|&a, &b| fit.scores[b].total_cmp(&fit.scores[a]));
    let mut out: String = order.iter().map(|&i| format!("{} {:+.4}\n", fit.names[i], fit.scores[i])).collect();
    if fit.regularized {
        out.push_str("(0.5 pseudo-count added per direction)\n");
    }
    Ok(out)
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Result<Scene, JsError> {
        draw_scene(seed, size).map_err(|e| JsError::new(&e))
    }

    pub fn size(&self) -> usize {
        self.sample.mask.shape().w
    }

    pub fn area_fraction(&self) -> f64 {
        self.sample.area_fraction()
    }

    pub fn composite_rgba(&self) -> Vec<u8> {
        rgba(&self.sample.composite)
    }

    pub fn background_rgba(&self) -> Vec<u8> {
        rgba(&self.sample.background)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        rgba(&self.sample.mask)
    }

    /// Linear mix between the composite (`0`) and the AdaIN result (`1`).
    pub fn stylized_rgba(&self, strength: f32) -> Vec<u8> {
        let a = strength.clamp(0.0, 1.0);
        let c = &self.sample.composite;
        let mixed = Tensor::from_fn(c.shape(), |n, ch, y, x| (1.0 - a) * c.at(n, ch, y, x) + a * self.stylized.at(n, ch, y, x));
        rgba(&mixed)
    }
}

#[wasm_bindgen]
pub fn bt_scores(pairs: &str) -> Result<String, JsError> {
    fit_pairs(pairs).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pharnet::eval::region_moments;

    #[test]
    fn scenes_are_seeded_and_sized() {
        let a = draw_scene(3, 64).unwrap();
        let b = draw_scene(3, 64).unwrap();
        assert_eq!(a.composite_rgba(), b.composite_rgba());
        assert_eq!(a.composite_rgba().len(), 64 * 64 * 4);
        assert!(draw_scene(3, 8).is_err());
    }

    #[test]
    fn adain_moves_only_the_foreground() {
        let scene = draw_scene(11, 64).unwrap();
        let (c, m) = (&scene.sample.composite, &scene.sample.mask);
        for ch in 0..3 {
            let (mu, _) = region_moments(&scene.stylized, 0, ch, |y, x| m.at(0, 0, y, x) > 0.5);
            let (bg, _) = region_moments(&scene.sample.background, 0, ch, |_, _| true);
            assert!((mu - bg).abs() < 1e-4, "{mu} vs {bg}");
        }
        let s = c.shape();
        for y in 0..s.h {
            for x in 0..s.w {
                if m.at(0, 0, y, x) == 0.0 {
                    assert_eq!(scene.stylized.at(0, 1, y, x), c.at(0, 1, y, x));
                }
            }
        }
        assert_eq!(scene.stylized_rgba(0.0), scene.composite_rgba());
    }

    #[test]
    fn pairs_render_best_first() {
        let text = fit_pairs("PAIR a b 2 8\nPAIR b c 7 3\nPAIR a c 9 1\n").unwrap();
        assert_eq!(text.lines().next().unwrap().split(' ').next(), Some("b"));
        assert!(fit_pairs("PAIR a b x 1").is_err());
    }
}
