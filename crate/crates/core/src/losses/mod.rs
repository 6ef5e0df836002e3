//! Reconstruction, perceptual, style and hinge adversarial losses.
//!
//! All losses are recorded on a [`Tape`] so they can be differentiated. The
//! reconstruction terms are means, so weights do not depend on resolution.

pub mod extractor;

pub use extractor::{FeatureExtractor, Tap};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Loss coefficients. All must be finite and non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_g: f64,
}

impl LossWeights {
    /// First training stage: reconstruction, perceptual and style only.
    pub fn stage1() -> Self {
        LossWeights { lambda_a: 1.0, lambda_c: 0.0, lambda_p: 1.0, lambda_s: 2.0, lambda_g: 0.0 }
    }

    /// Second stage adds the hole term and the adversarial term.
    pub fn stage2() -> Self {
        LossWeights { lambda_c: 6.0, lambda_g: 0.1, ..Self::stage1() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_a", self.lambda_a),
            ("lambda_c", self.lambda_c),
            ("lambda_p", self.lambda_p),
            ("lambda_s", self.lambda_s),
            ("lambda_g", self.lambda_g),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape<S: Scalar>(tape: &Tape<S>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// `lambda_a * mean|pred - gt| + lambda_c * mean over the hole of |pred - gt|`.
///
/// `pred`, `gt`: `[T, C, H, W]`; `mask`: `[T, 1, H, W]` with 1 = valid. An
/// empty hole contributes zero.
pub fn recon_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    gt: Var,
    mask: &Tensor<S>,
    lambda_a: f64,
    lambda_c: f64,
) -> Result<Var> {
    same_shape(tape, "recon_loss", pred, gt)?;
    let s = tape.value(pred).shape().to_vec();
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::shape("recon_loss", format!("mask {:?} does not fit prediction {s:?}", mask.shape())));
    }
    let diff = tape.sub(pred, gt)?;
    let abs = tape.abs(diff)?;
    let all = tape.mean(abs)?;
    let all = tape.scale(all, lambda_a)?;
    if lambda_c == 0.0 {
        return Ok(all);
    }
    let (c, plane) = (s[1], s[2] * s[3]);
    let m = mask.data();
    let holes = m.iter().filter(|&&v| v == S::zero()).count() * c;
    if holes == 0 {
        return Ok(all);
    }
    let inv = S::lit(1.0 / holes as f64);
    let weights = Tensor::from_fn(s.clone(), |i| {
        if m[(i / (c * plane)) * plane + i % plane] == S::zero() {
            inv
        } else {
            S::zero()
        }
    });
    let weights = tape.constant(weights);
    let hole = tape.mul(abs, weights)?;
    let hole = tape.sum(hole)?;
    let hole = tape.scale(hole, lambda_c)?;
    tape.add(all, hole)
}

/// `sum_p ||phi_p(pred) - phi_p(gt)||_1 / N_p`, summed over frames, with
/// `N_p = C_p * H_p * W_p` per frame.
pub fn perceptual_loss<S: Scalar>(tape: &mut Tape<S>, pred: Var, gt: Var, extractor: &FeatureExtractor<S>) -> Result<Var> {
    same_shape(tape, "perceptual_loss", pred, gt)?;
    let fp = extractor.features(tape, pred)?;
    let fg = extractor.features(tape, gt)?;
    perceptual_from_features(tape, &fp, &fg)
}

/// [`perceptual_loss`] on precomputed tap features.
pub fn perceptual_from_features<S: Scalar>(tape: &mut Tape<S>, fp: &[Var], fg: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fp.len());
    for (&a, &b) in fp.iter().zip(fg) {
        same_shape(tape, "perceptual_loss", a, b)?;
        let s = tape.value(a).shape();
        let per_frame = s[1] * s[2] * s[3];
        let d = tape.sub(a, b)?;
        let l1 = tape.abs_sum(d)?;
        terms.push(tape.scale(l1, 1.0 / per_frame as f64)?);
    }
    sum_vars(tape, &terms)
}

/// Per-frame Gram matrices `[N, C, C]` of `f: [N, C, H, W]`.
pub fn gram<S: Scalar>(tape: &mut Tape<S>, f: Var) -> Result<Var> {
    let s = tape.value(f).shape().to_vec();
    let flat = tape.reshape(f, &[s[0], s[1], s[2] * s[3]])?;
    let flat_t = tape.transpose(flat)?;
    tape.matmul(flat, flat_t)
}

/// `sum_p ||G_p(pred) - G_p(gt)||_1 / (C_p^2 H_p W_p)`, summed over frames.
pub fn style_loss<S: Scalar>(tape: &mut Tape<S>, pred: Var, gt: Var, extractor: &FeatureExtractor<S>) -> Result<Var> {
    same_shape(tape, "style_loss", pred, gt)?;
    let fp = extractor.features(tape, pred)?;
    let fg = extractor.features(tape, gt)?;
    style_from_features(tape, &fp, &fg)
}

/// [`style_loss`] on precomputed tap features.
pub fn style_from_features<S: Scalar>(tape: &mut Tape<S>, fp: &[Var], fg: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fp.len());
    for (&a, &b) in fp.iter().zip(fg) {
        same_shape(tape, "style_loss", a, b)?;
        let s = tape.value(a).shape();
        let norm = (s[1] * s[1] * s[2] * s[3]) as f64;
        let ga = gram(tape, a)?;
        let gb = gram(tape, b)?;
        let d = tape.sub(ga, gb)?;
        let l1 = tape.abs_sum(d)?;
        terms.push(tape.scale(l1, 1.0 / norm)?);
    }
    sum_vars(tape, &terms)
}

/// Hinge losses: `d = mean(relu(1 - real)) + mean(relu(1 + fake))`, `g = -mean(fake)`.
pub fn adversarial_losses<S: Scalar>(tape: &mut Tape<S>, disc_real: Var, disc_fake: Var) -> Result<(Var, Var)> {
    same_shape(tape, "adversarial_losses", disc_real, disc_fake)?;
    let one = tape.constant(Tensor::scalar(S::one()));
    let r = tape.sub(one, disc_real)?;
    let r = tape.relu(r)?;
    let r = tape.mean(r)?;
    let f = tape.add(one, disc_fake)?;
    let f = tape.relu(f)?;
    let f = tape.mean(f)?;
    let d = tape.add(r, f)?;
    let g = tape.mean(disc_fake)?;
    let g = tape.neg(g)?;
    Ok((d, g))
}

/// Loss terms of one generator step. `recon` already carries `lambda_a` and `lambda_c`.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub recon: Var,
    pub perceptual: Var,
    pub style: Var,
    pub adversarial: Option<Var>,
}

/// `L_r + lambda_p L_p + lambda_s L_s + lambda_G L_G`. Terms with a zero
/// weight are left out of the sum entirely.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let named = [("L_r", Some(parts.recon)), ("L_p", Some(parts.perceptual)), ("L_s", Some(parts.style)), ("L_G", parts.adversarial)];
    for (term, v) in named {
        if let Some(v) = v {
            let val = tape.value(v);
            if val.numel() != 1 {
                return Err(Error::shape("total_loss", format!("{term} is not scalar: {:?}", val.shape())));
            }
            if !val.is_finite() {
                return Err(Error::NonFiniteLoss { term });
            }
        }
    }
    let mut terms = vec![parts.recon];
    for (w, v) in [(weights.lambda_p, Some(parts.perceptual)), (weights.lambda_s, Some(parts.style)), (weights.lambda_g, parts.adversarial)] {
        if let Some(v) = v.filter(|_| w != 0.0) {
            terms.push(tape.scale(v, w)?);
        }
    }
    sum_vars(tape, &terms)
}

/// Plain-number form of [`total_loss`] for logged values.
pub fn total_loss_value(recon: f64, perceptual: f64, style: f64, adversarial: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    for (term, v) in [("L_r", recon), ("L_p", perceptual), ("L_s", style), ("L_G", adversarial)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term });
        }
    }
    let mut total = recon;
    for (w, v) in [(weights.lambda_p, perceptual), (weights.lambda_s, style), (weights.lambda_g, adversarial)] {
        if w != 0.0 {
            total += w * v;
        }
    }
    Ok(total)
}

fn sum_vars<S: Scalar>(tape: &mut Tape<S>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars.split_first().ok_or_else(|| Error::invalid("empty loss sum"))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}
