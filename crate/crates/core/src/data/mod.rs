//! Corpus loading, composite sampling and batching.
//!
//! Sample `cursor` of a run is a pure function of `(seed, cursor)`: the
//! foreground comes from a per-epoch permutation and the background and
//! placement from a ChaCha stream selected by the cursor. Resuming only needs
//! the next cursor.

pub mod composite;
pub mod image_io;
pub mod manifest;
pub mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use composite::{composite, CompositeSample, Skip, MAX_AREA_FRACTION, MIN_AREA_FRACTION};
pub use image_io::{load_image, load_mask, save_image, ImageError, RawImage};
pub use manifest::{ForegroundEntry, Manifest, Split};
pub use synth::synth_corpus;

use crate::tensor::{Tensor, TensorError};

/// Consecutive skipped draws tolerated before a batch is abandoned.
const MAX_CONSECUTIVE_SKIPS: usize = 256;
const PERMUTATION_STREAM: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("{count} consecutive samples skipped, last reason: {reason}")]
    TooManySkips { count: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Stacked samples, `[N, 3, H, W]` images and a `[N, 1, H, W]` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub composite: Tensor,
    pub background: Tensor,
    pub mask: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[CompositeSample]) -> Result<Self, TensorError> {
        let stack = |f: fn(&CompositeSample) -> &Tensor| Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
        Ok(Batch { composite: stack(|s| &s.composite)?, background: stack(|s| &s.background)?, mask: stack(|s| &s.mask)? })
    }

    pub fn len(&self) -> usize {
        self.mask.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoded foregrounds and backgrounds held in memory.
pub struct Corpus {
    pub foregrounds: Vec<(Tensor, Tensor)>,
    pub backgrounds: Vec<Tensor>,
}

impl Corpus {
    pub fn new(foregrounds: Vec<(Tensor, Tensor)>, backgrounds: Vec<Tensor>) -> Result<Self, DataError> {
        if foregrounds.is_empty() || backgrounds.is_empty() {
            return Err(DataError::Corpus(format!(
                "need at least one foreground and one background, got {} and {}",
                foregrounds.len(),
                backgrounds.len()
            )));
        }
        for (i, (img, mask)) in foregrounds.iter().enumerate() {
            let (a, b) = (img.shape(), mask.shape());
            if (a.h, a.w) != (b.h, b.w) {
                return Err(DataError::Corpus(format!("foreground {i}: image is {}x{} but mask is {}x{}", a.h, a.w, b.h, b.w)));
            }
        }
        Ok(Corpus { foregrounds, backgrounds })
    }

    pub fn load(manifest: &Manifest) -> Result<Self, DataError> {
        let image = |p: &PathBuf| load_image(p).map_err(|source| DataError::Image { path: p.clone(), source });
        let mask = |p: &PathBuf| load_mask(p).map_err(|source| DataError::Image { path: p.clone(), source });
        let fgs = manifest.foregrounds.iter().map(|e| Ok((image(&e.image)?, mask(&e.mask)?))).collect::<Result<Vec<_>, DataError>>()?;
        let bgs = manifest.backgrounds.iter().map(image).collect::<Result<Vec<_>, _>>()?;
        Self::new(fgs, bgs)
    }

    /// The synthetic corpus decoded straight from memory; identical to
    /// loading the files written by [`synth_corpus`] with the same arguments.
    pub fn synthetic(n_fg: usize, n_bg: usize, size: usize, seed: u64) -> Result<Self, DataError> {
        let (fgs, bgs) = synth::synth_images(n_fg, n_bg, size, seed);
        Self::new(
            fgs.iter().map(|(img, mask)| (img.to_rgb_tensor(), mask.to_mask())).collect(),
            bgs.iter().map(RawImage::to_rgb_tensor).collect(),
        )
    }

    /// Foreground order for one pass over the corpus.
    pub fn permutation(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(PERMUTATION_STREAM | epoch);
        let mut order: Vec<usize> = (0..self.foregrounds.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// The draw at `cursor`; deterministic in `(seed, cursor, size)`.
    pub fn sample(&self, seed: u64, cursor: u64, size: usize) -> Result<CompositeSample, Skip> {
        let n = self.foregrounds.len() as u64;
        let fg = self.permutation(seed, cursor / n)[(cursor % n) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(cursor);
        let bg = rng.random_range(0..self.backgrounds.len());
        let (img, mask) = &self.foregrounds[fg];
        composite(img, mask, &self.backgrounds[bg], size, &mut rng)
    }
}

/// Walks a corpus from a cursor, skipping degenerate draws.
pub struct Sampler<'c> {
    pub corpus: &'c Corpus,
    pub seed: u64,
    pub cursor: u64,
    pub size: usize,
    pub skipped: u64,
}

impl<'c> Sampler<'c> {
    pub fn new(corpus: &'c Corpus, seed: u64, cursor: u64, size: usize) -> Self {
        Sampler { corpus, seed, cursor, size, skipped: 0 }
    }

    pub fn next_sample(&mut self) -> Result<CompositeSample, DataError> {
        let mut reason = String::new();
        for _ in 0..MAX_CONSECUTIVE_SKIPS {
            let drawn = self.corpus.sample(self.seed, self.cursor, self.size);
            self.cursor += 1;
            match drawn {
                Ok(s) => return Ok(s),
                Err(skip) => {
                    self.skipped += 1;
                    reason = skip.reason;
                }
            }
        }
        Err(DataError::TooManySkips { count: MAX_CONSECUTIVE_SKIPS, reason })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch, DataError> {
        let samples = (0..batch_size).map(|_| self.next_sample()).collect::<Result<Vec<_>, _>>()?;
        Ok(Batch::from_samples(&samples)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn toy_corpus() -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fgs = (0..5)
            .map(|_| {
                let (img, mask) = synth::synth_foreground(32, &mut rng);
                (img.to_rgb_tensor(), mask.to_mask())
            })
            .collect();
        let bgs = (0..3).map(|_| synth::synth_background(48, &mut rng).to_rgb_tensor()).collect();
        Corpus::new(fgs, bgs).unwrap()
    }

    #[test]
    fn samples_are_pure_in_seed_and_cursor() {
        let c = toy_corpus();
        assert_eq!(c.sample(3, 17, 64), c.sample(3, 17, 64));
        assert_ne!(c.sample(3, 17, 64), c.sample(3, 18, 64));
        let mut a = Sampler::new(&c, 3, 0, 64);
        let first: Vec<_> = (0..6).map(|_| a.next_sample().unwrap()).collect();
        let mut b = Sampler::new(&c, 3, 4, 64);
        assert_eq!(b.next_sample().unwrap(), first[4]);
    }

    #[test]
    fn each_epoch_visits_every_foreground() {
        let c = toy_corpus();
        for epoch in 0..3 {
            let mut p = c.permutation(1, epoch);
            p.sort();
            assert_eq!(p, vec![0, 1, 2, 3, 4]);
        }
        assert_ne!(c.permutation(1, 0), c.permutation(1, 1));
    }

    #[test]
    fn batches_stack_samples() {
        let c = toy_corpus();
        let batch = Sampler::new(&c, 0, 0, 64).next_batch(3).unwrap();
        assert_eq!(batch.composite.shape(), Shape::new(3, 3, 64, 64));
        assert_eq!(batch.mask.shape(), Shape::new(3, 1, 64, 64));
        assert_eq!(batch.background.batch_item(1), c.sample(0, 1, 64).unwrap().background);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Corpus::new(vec![], vec![Tensor::zeros(Shape::new(1, 3, 4, 4))]).is_err());
    }
}
