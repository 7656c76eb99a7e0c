//! Pixel-wise discriminators: encoder-decoder stacks that score every pixel.

use crate::autodiff::{ConvOptions, PadMode, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::generator::LAYERS;
use crate::nn::{init_params, Binding, BnMode, Conv2d, DsBlock, InitScheme, ParamKind, ParamStore, UsBlock};
use crate::tensor::{Element, TensorError};

/// DS/US depth of the feature discriminator at each layer.
pub const FEATURE_DEPTHS: [usize; LAYERS] = [3, 3, 2, 2];
pub const IMAGE_DEPTH: usize = 7;
const MAX_WIDTH_MULTIPLIER: usize = 8;

pub fn feature_prefix(layer: usize) -> String {
    format!("D_f{layer}.")
}

pub const IMAGE_PREFIX: &str = "D_m.";

/// `depth` DS blocks, `depth` US blocks and a linear 1-channel 3x3 head.
#[derive(Clone)]
pub struct PixelDiscriminator {
    pub prefix: String,
    pub depth: usize,
    ds: Vec<DsBlock>,
    us: Vec<UsBlock>,
    head: Conv2d,
}

impl PixelDiscriminator {
    pub fn new(prefix: &str, in_channels: usize, base: usize, depth: usize) -> Self {
        let width = |i: usize| base * (1 << i).min(MAX_WIDTH_MULTIPLIER);
        let ds = (0..depth)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { width(i - 1) };
                DsBlock::new(&format!("{prefix}ds{i}"), cin, width(i))
            })
            .collect();
        let us = (0..depth)
            .map(|j| {
                let cin = width(depth - 1 - j);
                let cout = if j + 1 < depth { width(depth - 2 - j) } else { base };
                UsBlock::new(&format!("{prefix}us{j}"), cin, cout)
            })
            .collect();
        let head = Conv2d::new(format!("{prefix}head"), base, 1, 3, ConvOptions::new(1, 1, PadMode::Reflect), true);
        PixelDiscriminator { prefix: prefix.to_string(), depth, ds, us, head }
    }

    fn register(&self, store: &mut ParamStore) -> Result<()> {
        for b in &self.ds {
            b.register(store, ParamKind::Trainable)?;
        }
        for b in &self.us {
            b.register(store, ParamKind::Trainable)?;
        }
        self.head.register(store, ParamKind::Trainable)
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    /// Score map for an input whose extents are multiples of `2^depth`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let k = self.multiple();
        if !s.h.is_multiple_of(k) || !s.w.is_multiple_of(k) {
            return Err(Error::Tensor(TensorError::invalid(
                "pixel_discriminator",
                format!("{}: input {}x{} is not divisible by {k}", self.prefix.trim_end_matches('.'), s.h, s.w),
            )));
        }
        let mut h = x;
        for b in &self.ds {
            h = b.forward(tape, p, h)?;
        }
        for b in &self.us {
            h = b.forward(tape, p, h)?;
        }
        self.head.forward(tape, p, h)
    }

    /// Reflect-pads up to a multiple of `2^depth`, scores, and crops back.
    pub fn forward_any_size<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let k = self.multiple();
        let (ph, pw) = (s.h.div_ceil(k) * k - s.h, s.w.div_ceil(k) * k - s.w);
        if ph == 0 && pw == 0 {
            return self.forward(tape, p, x);
        }
        let (top, left) = (ph / 2, pw / 2);
        let padded = tape.pad(x, [top, ph - top, left, pw - left], PadMode::Reflect)?;
        let scores = self.forward(tape, p, padded)?;
        Ok(tape.crop(scores, top, left, s.h, s.w)?)
    }
}

/// Feature discriminators `D_f^1..4` and the image discriminator `D_m`,
/// sharing one parameter store.
#[derive(Clone)]
pub struct DiscriminatorSet {
    pub store: ParamStore,
    pub feature: Vec<PixelDiscriminator>,
    pub image: PixelDiscriminator,
}

impl DiscriminatorSet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = config.disc_base_width();
        let widths = config.encoder_widths();
        let feature: Vec<_> =
            (0..LAYERS).map(|l| PixelDiscriminator::new(&feature_prefix(l + 1), widths[l], base, FEATURE_DEPTHS[l])).collect();
        let image = PixelDiscriminator::new(IMAGE_PREFIX, 3, base, IMAGE_DEPTH);
        let mut store = ParamStore::new();
        for d in &feature {
            d.register(&mut store)?;
        }
        image.register(&mut store)?;
        init_params(&mut store, InitScheme::FanInUniform, seed);
        Ok(DiscriminatorSet { store, feature, image })
    }

    pub fn bind<'s, T: Element>(&'s self, tape: &mut Tape<T>, train: bool) -> Binding<'s> {
        self.store.bind(tape, BnMode::Train, |_| train)
    }

    /// `D_f^layer` on a feature map; `layer` is 1-based.
    pub fn score_features<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, layer: usize, features: Var) -> Result<Var> {
        self.feature[layer - 1].forward(tape, p, features)
    }

    pub fn score_image<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, image: Var) -> Result<Var> {
        self.image.forward_any_size(tape, p, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params_where;
    use crate::tensor::{Shape, Tensor};

    fn run(
        set: &DiscriminatorSet,
        f: impl Fn(&DiscriminatorSet, &mut Tape<f32>, &mut Binding, Var) -> Result<Var>,
        shape: Shape,
    ) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let mut p = set.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(shape, |n, c, h, w| ((n + c * 3 + h * 5 + w * 7) % 11) as f32 / 11.0));
        let y = f(set, &mut tape, &mut p, x)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn feature_disc_preserves_extent() {
        let set = DiscriminatorSet::new(&ModelConfig::desk(), 3).unwrap();
        let y = run(&set, |s, t, p, x| s.score_features(t, p, 1, x), Shape::new(2, 8, 64, 64)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 64, 64));
        let y = run(&set, |s, t, p, x| s.score_features(t, p, 4, x), Shape::new(2, 64, 8, 8)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 8, 8));
        let err = run(&set, |s, t, p, x| s.score_features(t, p, 1, x), Shape::new(1, 8, 12, 16)).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn image_disc_pads_and_crops() {
        let set = DiscriminatorSet::new(&ModelConfig::desk(), 3).unwrap();
        let y = run(&set, |s, t, p, x| s.score_image(t, p, x), Shape::new(2, 3, 64, 96)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 64, 96));
    }

    #[test]
    fn zeroed_head_gives_zero_scores() {
        let mut set = DiscriminatorSet::new(&ModelConfig::desk(), 3).unwrap();
        init_params_where(&mut set.store, InitScheme::ZeroWeights, 0, |p| p.contains(".head."));
        let y = run(&set, |s, t, p, x| s.score_image(t, p, x), Shape::new(1, 3, 128, 128)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
