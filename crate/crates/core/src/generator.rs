//! Dual-encoder generator.
//!
//! A frozen VGG-19 style main encoder extracts features of the composite and
//! of the background at four ReLU taps. At each tap the foreground statistics
//! of the composite features are replaced by the background statistics
//! (masked AdaIN). A trainable residual encoder looks at the composite and its
//! mask and adds correction features inside the foreground. A decoder with
//! skip connections turns the pyramid back into an image, and a blending head
//! predicts a soft mask used to mix that image with the background.

use crate::autodiff::{ConvOptions, PadMode, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{init_params_where, Binding, BnMode, Conv2d, InitScheme, ParamKind, ParamStore, ResidualBlock, BN_EPS};
use crate::tensor::{Element, Tensor, TensorError};

pub const LAYERS: usize = 4;
/// Input extents must be multiples of this (three 2x2 pools).
pub const SIZE_MULTIPLE: usize = 8;

pub const MAIN_ENCODER: &str = "E_m.";
pub const RESIDUAL_ENCODER: &str = "E_r.";
pub const DECODER: &str = "dec.";
pub const BLEND_HEAD: &str = "blend.";

/// Stabilizer of every masked standard deviation.
pub const MOMENT_EPS: f64 = BN_EPS;

#[derive(Clone)]
enum VggOp {
    Conv(Conv2d),
    Pool,
    /// The preceding conv's ReLU output is a pyramid level.
    Tap,
}

/// VGG-19 up to `relu4_1`; frozen.
#[derive(Clone)]
pub struct MainEncoder {
    ops: Vec<VggOp>,
}

impl MainEncoder {
    fn new(widths: [usize; 4]) -> Self {
        let reflect = ConvOptions::new(1, 1, PadMode::Reflect);
        let conv = |name: &str, cin, cout| VggOp::Conv(Conv2d::new(format!("{MAIN_ENCODER}{name}"), cin, cout, 3, reflect, true));
        let [w1, w2, w3, w4] = widths;
        let ops = vec![
            conv("conv1_1", 3, w1),
            VggOp::Tap,
            conv("conv1_2", w1, w1),
            VggOp::Pool,
            conv("conv2_1", w1, w2),
            VggOp::Tap,
            conv("conv2_2", w2, w2),
            VggOp::Pool,
            conv("conv3_1", w2, w3),
            VggOp::Tap,
            conv("conv3_2", w3, w3),
            conv("conv3_3", w3, w3),
            conv("conv3_4", w3, w3),
            VggOp::Pool,
            conv("conv4_1", w3, w4),
            VggOp::Tap,
        ];
        MainEncoder { ops }
    }

    fn register(&self, store: &mut ParamStore) -> Result<()> {
        for op in &self.ops {
            if let VggOp::Conv(c) = op {
                c.register(store, ParamKind::Frozen)?;
            }
        }
        Ok(())
    }

    /// Features at the four taps. Gradients flow through to `image`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Binding, image: Var) -> Result<[Var; LAYERS]> {
        let mut taps = Vec::with_capacity(LAYERS);
        let mut x = image;
        for op in &self.ops {
            match op {
                VggOp::Conv(c) => {
                    let h = c.forward(tape, p, x)?;
                    x = tape.relu(h);
                }
                VggOp::Pool => x = tape.max_pool2(x)?,
                VggOp::Tap => taps.push(x),
            }
        }
        Ok(taps.try_into().expect("four taps"))
    }
}

/// Four stages of `transition conv -> residual block` over `concat(I_c, M)`.
#[derive(Clone)]
pub struct ResidualEncoder {
    stages: Vec<(Conv2d, ResidualBlock)>,
}

impl ResidualEncoder {
    fn new(widths: [usize; 4]) -> Self {
        let mut cin = 4;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i == 0 { 1 } else { 2 };
                let prefix = format!("{RESIDUAL_ENCODER}stage{}", i + 1);
                let transition = Conv2d::new(format!("{prefix}.transition"), cin, w, 3, ConvOptions::new(stride, 1, PadMode::Zero), true);
                cin = w;
                (transition, ResidualBlock::new(&format!("{prefix}.res"), w))
            })
            .collect();
        ResidualEncoder { stages }
    }

    fn register(&self, store: &mut ParamStore) -> Result<()> {
        for (t, r) in &self.stages {
            t.register(store, ParamKind::Trainable)?;
            r.register(store, ParamKind::Trainable)?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &mut Binding, composite: Var, mask: Var) -> Result<[Var; LAYERS]> {
        let mut x = tape.concat_channels(&[composite, mask])?;
        let mut out = Vec::with_capacity(LAYERS);
        for (t, r) in &self.stages {
            let h = t.forward(tape, p, x)?;
            x = r.forward(tape, p, h)?;
            out.push(x);
        }
        Ok(out.try_into().expect("four stages"))
    }
}

/// Mirror of the main encoder with skip fusion at the three finer scales.
#[derive(Clone)]
pub struct Decoder {
    /// `(reduce conv at scale l+1, fuse conv at scale l)` for l = 3, 2, 1.
    steps: Vec<(Conv2d, Conv2d)>,
    out: Conv2d,
}

impl Decoder {
    fn new(widths: [usize; 4]) -> Self {
        let reflect = ConvOptions::new(1, 1, PadMode::Reflect);
        let conv = |name: String, cin, cout| Conv2d::new(format!("{DECODER}{name}"), cin, cout, 3, reflect, true);
        let steps = (1..LAYERS)
            .rev()
            .map(|l| {
                let (deep, here) = (widths[l], widths[l - 1]);
                (conv(format!("conv{}", l + 1), deep, here), conv(format!("fuse{l}"), 2 * here, here))
            })
            .collect();
        Decoder { steps, out: conv("out".into(), widths[0], 3) }
    }

    fn register(&self, store: &mut ParamStore) -> Result<()> {
        for (a, b) in &self.steps {
            a.register(store, ParamKind::Trainable)?;
            b.register(store, ParamKind::Trainable)?;
        }
        self.out.register(store, ParamKind::Trainable)
    }

    /// Returns `(final feature map, I_o)`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Binding, pyramid: &[Var; LAYERS]) -> Result<(Var, Var)> {
        let mut x = pyramid[LAYERS - 1];
        for ((reduce, fuse), skip) in self.steps.iter().zip(pyramid[..LAYERS - 1].iter().rev()) {
            let h = reduce.forward(tape, p, x)?;
            let h = tape.relu(h);
            let h = tape.upsample_nearest(h, 2)?;
            let h = tape.concat_channels(&[h, *skip])?;
            let h = fuse.forward(tape, p, h)?;
            x = tape.relu(h);
        }
        let image = self.out.forward(tape, p, x)?;
        Ok((x, image))
    }
}

/// `M^1 = mask`, `M^(l+1) = maxpool2(M^l)`.
pub fn mask_pyramid<T: Element>(tape: &mut Tape<T>, mask: Var) -> Result<[Var; LAYERS]> {
    let mut out = [mask; LAYERS];
    for l in 1..LAYERS {
        out[l] = tape.max_pool2(out[l - 1])?;
    }
    Ok(out)
}

/// Masked AdaIN: inside `mask` the content features are renormalized from
/// their foreground statistics to the whole-map statistics of `style`;
/// outside `mask` they pass through unchanged.
pub fn adain_stylize<T: Element>(tape: &mut Tape<T>, content: Var, style: Var, mask: Var) -> Result<Var> {
    let (mu_c, sigma_c) = tape.masked_moments(content, Some(mask), MOMENT_EPS)?;
    let (mu_s, sigma_s) = tape.masked_moments(style, None, MOMENT_EPS)?;
    let centered = tape.sub(content, mu_c)?;
    let normalized = tape.div(centered, sigma_c)?;
    let scaled = tape.mul(normalized, sigma_s)?;
    let stylized = tape.add(scaled, mu_s)?;
    Ok(tape.blend(mask, stylized, content)?)
}

/// `stylized + residual * mask`.
pub fn inject_residual<T: Element>(tape: &mut Tape<T>, stylized: Var, residual: Var, mask: Var) -> Result<Var> {
    let masked = tape.mul(residual, mask)?;
    Ok(tape.add(stylized, masked)?)
}

/// Everything one generator pass produces. Pyramids are ordered from the
/// finest (layer 1) to the coarsest (layer 4).
pub struct HarmonizeOutput {
    /// Final blended image `Ĩ_o`.
    pub output: Var,
    /// Decoder image `I_o` before blending.
    pub decoded: Var,
    /// Soft mask `M̃` (equal to the input mask when blending is off).
    pub soft_mask: Var,
    pub content: [Var; LAYERS],
    pub style: [Var; LAYERS],
    pub masks: [Var; LAYERS],
    pub adain: [Var; LAYERS],
    pub residual: Option<[Var; LAYERS]>,
    /// `F̃_a^l`, the decoder inputs.
    pub refined: [Var; LAYERS],
}

/// Images produced by [`Generator::harmonize_images`].
#[derive(Clone, Debug)]
pub struct Harmonized {
    pub output: Tensor,
    pub soft_mask: Tensor,
}

#[derive(Clone)]
pub struct Generator {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: MainEncoder,
    pub residual_encoder: ResidualEncoder,
    pub decoder: Decoder,
    blend_head: Conv2d,
}

impl Generator {
    /// Builds and initializes a generator. The main encoder is drawn from
    /// `config.encoder_seed`, every trainable part from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let widths = config.encoder_widths();
        let encoder = MainEncoder::new(widths);
        let residual_encoder = ResidualEncoder::new(widths);
        let decoder = Decoder::new(widths);
        let blend_head = Conv2d::new(format!("{BLEND_HEAD}conv"), widths[0] + 1, 1, 3, ConvOptions::new(1, 1, PadMode::Reflect), true);
        let mut store = ParamStore::new();
        encoder.register(&mut store)?;
        residual_encoder.register(&mut store)?;
        decoder.register(&mut store)?;
        blend_head.register(&mut store, ParamKind::Trainable)?;
        init_params_where(&mut store, InitScheme::FanInUniform, config.encoder_seed, |p| p.starts_with(MAIN_ENCODER));
        init_params_where(&mut store, InitScheme::FanInUniform, seed, |p| !p.starts_with(MAIN_ENCODER));
        Ok(Generator { config, store, encoder, residual_encoder, decoder, blend_head })
    }

    /// Copies every main-encoder parameter from `weights`.
    pub fn load_encoder_weights(&mut self, weights: &ParamStore) -> Result<()> {
        let paths: Vec<String> = self.store.iter().filter(|(p, _)| p.starts_with(MAIN_ENCODER)).map(|(p, _)| p.to_string()).collect();
        for path in paths {
            self.store.set_value(&path, weights.value(&path)?.clone())?;
        }
        Ok(())
    }

    /// Binds the store with every trainable parameter carrying gradients.
    pub fn bind<'s, T: Element>(&'s self, tape: &mut Tape<T>, mode: BnMode, train: bool) -> Binding<'s> {
        self.store.bind(tape, mode, |_| train)
    }

    pub fn check_extent(h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) || h < 2 * SIZE_MULTIPLE || w < 2 * SIZE_MULTIPLE {
            return Err(Error::Tensor(TensorError::invalid(
                "harmonize",
                format!("image is {h}x{w}; height and width must be multiples of {SIZE_MULTIPLE} and at least 16, pad the input first"),
            )));
        }
        Ok(())
    }

    /// Full forward pass on images already placed on `tape`.
    pub fn harmonize<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &mut Binding,
        composite: Var,
        background: Var,
        mask: Var,
    ) -> Result<HarmonizeOutput> {
        let s = tape.shape(composite);
        Self::check_extent(s.h, s.w)?;
        if tape.shape(background) != s {
            return Err(Error::Tensor(TensorError::Broadcast { op: "harmonize", lhs: s, rhs: tape.shape(background) }));
        }
        let content = self.encoder.forward(tape, p, composite)?;
        let style = self.encoder.forward(tape, p, background)?;
        let masks = mask_pyramid(tape, mask)?;
        let mut adain = [composite; LAYERS];
        for l in 0..LAYERS {
            adain[l] = adain_stylize(tape, content[l], style[l], masks[l])?;
        }
        let residual = if self.config.use_residual_encoder { Some(self.residual_encoder.forward(tape, p, composite, mask)?) } else { None };
        let mut refined = adain;
        if let Some(r) = &residual {
            for l in 0..LAYERS {
                if self.config.injects_residual(l + 1) {
                    refined[l] = inject_residual(tape, adain[l], r[l], masks[l])?;
                }
            }
        }
        let (features, decoded) = self.decoder.forward(tape, p, &refined)?;
        let soft_mask = if self.config.use_blending {
            let h = tape.concat_channels(&[features, mask])?;
            let logits = self.blend_head.forward(tape, p, h)?;
            tape.sigmoid(logits)
        } else {
            mask
        };
        let output = tape.blend(soft_mask, decoded, background)?;
        Ok(HarmonizeOutput { output, decoded, soft_mask, content, style, masks, adain, residual, refined })
    }

    /// Inference on `[N, 3, H, W]` images with running batch-norm statistics.
    pub fn harmonize_images(&self, composite: &Tensor, background: &Tensor, mask: &Tensor) -> Result<Harmonized> {
        let mut tape = Tape::<f32>::new();
        let mut p = self.bind(&mut tape, BnMode::Eval, false);
        let (c, b, m) = (tape.constant(composite.clone()), tape.constant(background.clone()), tape.constant(mask.clone()));
        let out = self.harmonize(&mut tape, &mut p, c, b, m)?;
        Ok(Harmonized { output: tape.value(out.output).clone(), soft_mask: tape.value(out.soft_mask).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::tensor::Shape;

    fn images(n: usize, h: usize, w: usize) -> (Tensor, Tensor, Tensor) {
        let c = Tensor::from_fn(Shape::new(n, 3, h, w), |n, c, y, x| ((n + c * 3 + y * 5 + x * 7) % 17) as f32 / 17.0);
        let b = Tensor::from_fn(Shape::new(n, 3, h, w), |n, c, y, x| ((n * 2 + c + y * 3 + x * 2) % 13) as f32 / 13.0);
        let m = Tensor::from_fn(Shape::new(n, 1, h, w), |_, _, y, x| (y >= h / 4 && y < h / 2 && x >= w / 4 && x < 3 * w / 4) as u8 as f32);
        (c, b, m)
    }

    #[test]
    fn adain_scalar_case() {
        let mut tape = Tape::<f64>::new();
        let fc = tape.constant(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let fs = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 10.0));
        let m = tape.constant(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 1.0, 0.0, 0.0]).unwrap());
        let fa = adain_stylize(&mut tape, fc, fs, m).unwrap();
        let v = tape.value(fa).data();
        // scalar evaluation of the masked AdaIN formula
        let (mu, sd) = (1.5, (0.25f64 + MOMENT_EPS).sqrt());
        let sd_s = MOMENT_EPS.sqrt();
        for (i, x) in [1.0, 2.0].iter().enumerate() {
            let expected = sd_s * (x - mu) / sd + 10.0;
            assert!((v[i] - expected).abs() < 1e-12);
            assert!((v[i] - 10.0).abs() < 4e-3);
        }
        assert_eq!(&v[2..], &[3.0, 4.0]);
    }

    #[test]
    fn mask_pyramid_keeps_single_pixel() {
        let mut tape = Tape::<f32>::new();
        let m = tape.constant(Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| (y == 0 && x == 0) as u8 as f32));
        let pyr = mask_pyramid(&mut tape, m).unwrap();
        for (l, v) in pyr.iter().enumerate() {
            let t = tape.value(*v);
            assert_eq!(t.shape().h, 8 >> l);
            assert_eq!(t.data()[0], 1.0);
            assert_eq!(t.sum_f64(), 1.0);
        }
    }

    #[test]
    fn shapes_follow_the_pyramid() {
        let g = Generator::new(ModelConfig::desk(), 1).unwrap();
        for (h, w) in [(64, 64), (96, 64)] {
            let (c, b, m) = images(2, h, w);
            let mut tape = Tape::<f32>::new();
            let mut p = g.bind(&mut tape, BnMode::Train, true);
            let (cv, bv, mv) = (tape.constant(c), tape.constant(b), tape.constant(m));
            let out = g.harmonize(&mut tape, &mut p, cv, bv, mv).unwrap();
            assert_eq!(tape.shape(out.output), Shape::new(2, 3, h, w));
            assert_eq!(tape.shape(out.soft_mask), Shape::new(2, 1, h, w));
            let widths = g.config.encoder_widths();
            for (l, &c) in widths.iter().enumerate() {
                let expected = Shape::new(2, c, h >> l, w >> l);
                assert_eq!(tape.shape(out.content[l]), expected);
                assert_eq!(tape.shape(out.residual.unwrap()[l]), expected);
            }
        }
    }

    #[test]
    fn rejects_indivisible_extent() {
        let g = Generator::new(ModelConfig::desk(), 1).unwrap();
        let (c, b, m) = images(1, 60, 64);
        let err = g.harmonize_images(&c, &b, &m).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn zeroed_residual_encoder_outputs_zero() {
        let mut g = Generator::new(ModelConfig::desk(), 1).unwrap();
        let mut zeroed = g.store.clone();
        init_params(&mut zeroed, InitScheme::ZeroWeights, 0);
        for (path, p) in zeroed.iter() {
            if path.starts_with(RESIDUAL_ENCODER) {
                g.store.set_value(path, p.value.clone()).unwrap();
            }
        }
        let (c, _, m) = images(1, 32, 32);
        let mut tape = Tape::<f32>::new();
        let mut p = g.bind(&mut tape, BnMode::Train, true);
        let (cv, mv) = (tape.constant(c), tape.constant(m));
        let r = g.residual_encoder.forward(&mut tape, &mut p, cv, mv).unwrap();
        for v in r {
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn main_encoder_is_deterministic() {
        let g = Generator::new(ModelConfig::desk(), 1).unwrap();
        let (c, _, _) = images(1, 32, 48);
        let run = || {
            let mut tape = Tape::<f32>::new();
            let p = g.bind(&mut tape, BnMode::Eval, false);
            let x = tape.constant(c.clone());
            let f = g.encoder.forward(&mut tape, &p, x).unwrap();
            f.map(|v| tape.value(v).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hard_composite_without_blending() {
        let config = ModelConfig { use_blending: false, ..ModelConfig::desk() };
        let g = Generator::new(config, 2).unwrap();
        let (c, b, m) = images(1, 32, 32);
        let out = g.harmonize_images(&c, &b, &m).unwrap();
        assert_eq!(out.soft_mask, m);
        for i in 0..m.numel() {
            if m.data()[i] == 0.0 {
                for ch in 0..3 {
                    assert_eq!(out.output.data()[ch * m.numel() + i], b.data()[ch * m.numel() + i]);
                }
            }
        }
    }
}
