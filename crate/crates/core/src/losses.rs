//! Adversarial, style and content objectives.
//!
//! Every squared error is a mean over elements. Discriminators regress
//! towards 1 on foreground (inharmonious) pixels and 0 on background
//! (harmonious) pixels; the generator pushes foreground scores towards 0.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::discriminator::DiscriminatorSet;
use crate::error::Result;
use crate::generator::{LAYERS, MOMENT_EPS};
use crate::nn::Binding;
use crate::tensor::Element;

/// Sum of `terms`; an empty list gives a constant zero.
pub fn sum_terms<T: Element>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(tape.constant(crate::tensor::Tensor::scalar(T::zero())));
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Feature discriminator loss: `Σ_l mse(D_f^l(F̃_a^l), M^l) + mse(D_f^l(F_s^l), 0)`.
/// The inputs should be detached from the generator.
pub fn feature_disc_loss<T: Element>(
    tape: &mut Tape<T>,
    discs: &DiscriminatorSet,
    p: &mut Binding,
    refined: &[Var; LAYERS],
    style: &[Var; LAYERS],
    masks: &[Var; LAYERS],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2 * LAYERS);
    for (l, &f) in refined.iter().enumerate() {
        let fake = discs.score_features(tape, p, l + 1, f)?;
        terms.push(tape.mse(fake, masks[l])?);
        let real = discs.score_features(tape, p, l + 1, style[l])?;
        terms.push(tape.mse_zero(real));
    }
    sum_terms(tape, &terms)
}

/// Generator side of the feature game: `Σ_l mse(D_f^l(F̃_a^l), 0)`.
pub fn feature_gen_loss<T: Element>(tape: &mut Tape<T>, discs: &DiscriminatorSet, p: &mut Binding, refined: &[Var; LAYERS]) -> Result<Var> {
    let mut terms = Vec::with_capacity(LAYERS);
    for (l, &f) in refined.iter().enumerate() {
        let fake = discs.score_features(tape, p, l + 1, f)?;
        terms.push(tape.mse_zero(fake));
    }
    sum_terms(tape, &terms)
}

/// `mse(D_m(Ĩ_o), M) + mse(D_m(I_s), 0)`.
pub fn image_disc_loss<T: Element>(
    tape: &mut Tape<T>,
    discs: &DiscriminatorSet,
    p: &mut Binding,
    output: Var,
    background: Var,
    mask: Var,
) -> Result<Var> {
    let fake = discs.score_image(tape, p, output)?;
    let fake_term = tape.mse(fake, mask)?;
    let real = discs.score_image(tape, p, background)?;
    let real_term = tape.mse_zero(real);
    Ok(tape.add(fake_term, real_term)?)
}

/// `mse(D_m(Ĩ_o), 0)`.
pub fn image_gen_loss<T: Element>(tape: &mut Tape<T>, discs: &DiscriminatorSet, p: &mut Binding, output: Var) -> Result<Var> {
    let fake = discs.score_image(tape, p, output)?;
    Ok(tape.mse_zero(fake))
}

/// `Σ_l mse(μ_fg(out^l), μ(bg^l)) + mse(σ_fg(out^l), σ(bg^l))`, where the
/// foreground moments of the output features are taken over `masks[l]` and
/// the background moments over the whole map.
pub fn style_loss<T: Element>(
    tape: &mut Tape<T>,
    output_feats: &[Var; LAYERS],
    background_feats: &[Var; LAYERS],
    masks: &[Var; LAYERS],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2 * LAYERS);
    for l in 0..LAYERS {
        let (mu_o, sigma_o) = tape.masked_moments(output_feats[l], Some(masks[l]), MOMENT_EPS)?;
        let (mu_b, sigma_b) = tape.masked_moments(background_feats[l], None, MOMENT_EPS)?;
        terms.push(tape.mse(mu_o, mu_b)?);
        terms.push(tape.mse(sigma_o, sigma_b)?);
    }
    sum_terms(tape, &terms)
}

/// `mse(Ψ^4(Ĩ_o), Ψ^4(I_c))`.
pub fn content_loss<T: Element>(tape: &mut Tape<T>, output_deep: Var, composite_deep: Var) -> Result<Var> {
    Ok(tape.mse(output_deep, composite_deep)?)
}

/// Scalar values of every objective for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_content: f64,
    pub l_style: f64,
    pub l_adv_feat_g: f64,
    pub l_adv_img_g: f64,
    pub l_total_g: f64,
    pub l_adv_feat_d: f64,
    pub l_adv_img_d: f64,
    pub l_total_d: f64,
}

impl LossBundle {
    /// Totals are unit-weight sums of the components; components of
    /// disabled discriminators must be zero.
    pub fn assemble(l_content: f64, l_style: f64, l_adv_feat_g: f64, l_adv_img_g: f64, l_adv_feat_d: f64, l_adv_img_d: f64) -> Self {
        LossBundle {
            l_content,
            l_style,
            l_adv_feat_g,
            l_adv_img_g,
            l_total_g: l_content + l_style + l_adv_feat_g + l_adv_img_g,
            l_adv_feat_d,
            l_adv_img_d,
            l_total_d: l_adv_feat_d + l_adv_img_d,
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("l_content", self.l_content),
            ("l_style", self.l_style),
            ("l_adv_feat_G", self.l_adv_feat_g),
            ("l_adv_img_G", self.l_adv_img_g),
            ("l_total_G", self.l_total_g),
            ("l_adv_feat_D", self.l_adv_feat_d),
            ("l_adv_img_D", self.l_adv_img_d),
            ("l_total_D", self.l_total_d),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn add(&self, other: &LossBundle) -> LossBundle {
        let mut out = *self;
        out.l_content += other.l_content;
        out.l_style += other.l_style;
        out.l_adv_feat_g += other.l_adv_feat_g;
        out.l_adv_img_g += other.l_adv_img_g;
        out.l_total_g += other.l_total_g;
        out.l_adv_feat_d += other.l_adv_feat_d;
        out.l_adv_img_d += other.l_adv_img_d;
        out.l_total_d += other.l_total_d;
        out
    }
}
