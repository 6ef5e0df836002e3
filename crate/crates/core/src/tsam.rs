//! Temporal shift (TSM), temporal shift-and-align (TSAM) and the gated TSAM
//! convolution.
//!
//! For a clip feature `x: [T, C, H, W]` and band width `f`, channels `[0, f)`
//! of frame `t` come from frame `t-1` and channels `[f, 2f)` from frame
//! `t+1`. TSAM additionally warps those bands onto frame `t` with optical
//! flow and blends them with the frame's own features under a validity mask:
//! `out = v * warped + (1 - v) * x[t]`. Channels `[2f, C)` are never touched.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{FlowField, ValidityMask, WarpPlan};
use crate::numerics::{LinearMap, Scalar, Tape, Tensor, Var};

/// Fraction of channels shifted in each temporal direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftSpec {
    pub numerator: u32,
    pub denominator: u32,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec { numerator: 1, denominator: 8 }
    }
}

impl ShiftSpec {
    pub fn new(numerator: u32, denominator: u32) -> Result<Self> {
        if denominator == 0 || numerator == 0 || 2 * numerator > denominator {
            return Err(Error::invalid(format!("shift fraction {numerator}/{denominator} must lie in (0, 1/2]")));
        }
        Ok(ShiftSpec { numerator, denominator })
    }

    /// Parses `"1/8"` or a plain decimal like `"0.125"`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let num = a.trim().parse().map_err(|_| Error::invalid(format!("bad shift fraction `{s}`")))?;
            let den = b.trim().parse().map_err(|_| Error::invalid(format!("bad shift fraction `{s}`")))?;
            return Self::new(num, den);
        }
        let v: f64 = s.parse().map_err(|_| Error::invalid(format!("bad shift fraction `{s}`")))?;
        let den = 1_000_000u32;
        Self::new((v * den as f64).round() as u32, den)
    }

    pub fn fraction(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// Channels per shifted band: `floor(fraction * C)`, at least 1, with `2f <= C`.
    pub fn resolve(&self, channels: usize) -> Result<usize> {
        let f = (channels * self.numerator as usize / self.denominator as usize).max(1);
        if 2 * f > channels {
            return Err(Error::invalid(format!("cannot shift 2 x {f} channels out of {channels}")));
        }
        Ok(f)
    }
}

impl std::fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

/// Output of [`shift_and_align`] together with the channel range it modified.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFeature<S: Scalar> {
    pub tensor: Tensor<S>,
    pub modified: Range<usize>,
}

fn clip_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [0, ..] => Err(Error::invalid(format!("{op}: clip has no frames"))),
        [t, c, h, w] => Ok([t, c, h, w]),
        _ => Err(Error::shape(op, format!("expected [T, C, H, W], got {shape:?}"))),
    }
}

/// Plain temporal channel shift with zero fill at the clip ends.
#[derive(Debug, Clone, Copy)]
pub struct TemporalShift {
    pub spec: ShiftSpec,
}

impl<S: Scalar> LinearMap<S> for TemporalShift {
    fn name(&self) -> &'static str {
        "temporal_shift"
    }

    fn apply(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let [t, c, h, w] = clip_dims("temporal_shift", input.shape())?;
        let f = self.spec.resolve(c)?;
        let plane = h * w;
        let frame = c * plane;
        let x = input.data();
        let mut out = x.to_vec();
        for ti in 0..t {
            let dst = &mut out[ti * frame..ti * frame + 2 * f * plane];
            let (fwd, bwd) = dst.split_at_mut(f * plane);
            match ti.checked_sub(1) {
                Some(p) => fwd.copy_from_slice(&x[p * frame..p * frame + f * plane]),
                None => fwd.fill(S::zero()),
            }
            if ti + 1 < t {
                let n = ti + 1;
                bwd.copy_from_slice(&x[n * frame + f * plane..n * frame + 2 * f * plane]);
            } else {
                bwd.fill(S::zero());
            }
        }
        Tensor::new(input.shape().to_vec(), out)
    }

    fn adjoint(&self, grad_out: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
        let [t, c, h, w] = clip_dims("temporal_shift", input_shape)?;
        let f = self.spec.resolve(c)?;
        let plane = h * w;
        let frame = c * plane;
        let g = grad_out.data();
        let mut out = g.to_vec();
        for ti in 0..t {
            out[ti * frame..ti * frame + 2 * f * plane].fill(S::zero());
        }
        for ti in 0..t {
            if ti > 0 {
                let p = ti - 1;
                out[p * frame..p * frame + f * plane].copy_from_slice(&g[ti * frame..ti * frame + f * plane]);
            }
            if ti + 1 < t {
                let n = ti + 1;
                out[n * frame + f * plane..n * frame + 2 * f * plane]
                    .copy_from_slice(&g[ti * frame + f * plane..ti * frame + 2 * f * plane]);
            }
        }
        Tensor::new(input_shape.to_vec(), out)
    }
}

/// Shifts channel bands between neighbouring frames: `out[t, 0:f] = x[t-1, 0:f]`,
/// `out[t, f:2f] = x[t+1, f:2f]`, zero where the neighbour does not exist.
pub fn temporal_shift<S: Scalar>(x: &Tensor<S>, spec: &ShiftSpec) -> Result<Tensor<S>> {
    TemporalShift { spec: *spec }.apply(x)
}

/// Flow warps and validity masks for every frame of a clip at one resolution.
///
/// `to_prev[t]` pulls frame `t-1` onto frame `t`; `to_next[t]` pulls frame `t+1`.
/// Entries for non-existent neighbours are ignored and their validity is 0.
#[derive(Debug, Clone)]
pub struct FrameAlignment {
    frames: usize,
    height: usize,
    width: usize,
    to_prev: Vec<WarpPlan>,
    to_next: Vec<WarpPlan>,
    valid_prev: Vec<Vec<f32>>,
    valid_next: Vec<Vec<f32>>,
}

impl FrameAlignment {
    pub fn new(
        flows_to_prev: &[FlowField],
        flows_to_next: &[FlowField],
        valid_prev: &[ValidityMask],
        valid_next: &[ValidityMask],
    ) -> Result<Self> {
        let t = flows_to_prev.len();
        if t == 0 {
            return Err(Error::invalid("frame alignment needs at least one frame"));
        }
        if flows_to_next.len() != t || valid_prev.len() != t || valid_next.len() != t {
            return Err(Error::shape("shift_and_align", "flows and masks must have one entry per frame"));
        }
        let (h, w) = (flows_to_prev[0].height(), flows_to_prev[0].width());
        let same = |fh: usize, fw: usize| fh == h && fw == w;
        let all_match = flows_to_prev.iter().chain(flows_to_next).all(|f| same(f.height(), f.width()))
            && valid_prev.iter().chain(valid_next).all(|m| same(m.height(), m.width()));
        if !all_match {
            return Err(Error::shape("shift_and_align", "flows and masks must share one resolution"));
        }
        let mut vp: Vec<Vec<f32>> = valid_prev.iter().map(|m| m.values().to_vec()).collect();
        let mut vn: Vec<Vec<f32>> = valid_next.iter().map(|m| m.values().to_vec()).collect();
        // Missing neighbours contribute nothing.
        vp[0].fill(0.0);
        vn[t - 1].fill(0.0);
        Ok(FrameAlignment {
            frames: t,
            height: h,
            width: w,
            to_prev: flows_to_prev.iter().map(WarpPlan::new).collect(),
            to_next: flows_to_next.iter().map(WarpPlan::new).collect(),
            valid_prev: vp,
            valid_next: vn,
        })
    }

    /// Zero flows with validity 1 wherever a neighbour exists; shift-and-align
    /// then degenerates to a plain temporal shift.
    pub fn identity(frames: usize, height: usize, width: usize) -> Result<Self> {
        let flows = vec![FlowField::zeros(height, width); frames];
        let ones = vec![ValidityMask::ones(height, width); frames];
        Self::new(&flows, &flows, &ones, &ones)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn valid_prev(&self, t: usize) -> &[f32] {
        &self.valid_prev[t]
    }

    pub fn valid_next(&self, t: usize) -> &[f32] {
        &self.valid_next[t]
    }

    fn check(&self, shape: &[usize]) -> Result<[usize; 4]> {
        let dims = clip_dims("shift_and_align", shape)?;
        let [t, _, h, w] = dims;
        if t != self.frames || h != self.height || w != self.width {
            return Err(Error::shape(
                "shift_and_align",
                format!(
                    "feature {shape:?} vs alignment for {} frames at {}x{}",
                    self.frames, self.height, self.width
                ),
            ));
        }
        Ok(dims)
    }
}

/// Shift-and-align as a linear tape op (flows and masks are constants).
#[derive(Debug, Clone)]
pub struct ShiftAlign {
    pub spec: ShiftSpec,
    pub alignment: Arc<FrameAlignment>,
}

impl<S: Scalar> LinearMap<S> for ShiftAlign {
    fn name(&self) -> &'static str {
        "shift_and_align"
    }

    fn apply(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let [t, c, h, w] = self.alignment.check(input.shape())?;
        let f = self.spec.resolve(c)?;
        let a = &self.alignment;
        let plane = h * w;
        let frame = c * plane;
        let x = input.data();
        let mut out = x.to_vec();
        let mut warped = vec![S::zero(); plane];
        for ti in 0..t {
            for ch in 0..2 * f {
                let (neighbour, plan, valid) = if ch < f {
                    (ti.checked_sub(1), &a.to_prev[ti], &a.valid_prev[ti])
                } else {
                    ((ti + 1 < t).then_some(ti + 1), &a.to_next[ti], &a.valid_next[ti])
                };
                match neighbour {
                    Some(n) => plan.warp_plane(&x[n * frame + ch * plane..n * frame + (ch + 1) * plane], &mut warped),
                    None => warped.fill(S::zero()),
                }
                let base = ti * frame + ch * plane;
                for p in 0..plane {
                    let v = S::lit(valid[p] as f64);
                    out[base + p] = v * warped[p] + (S::one() - v) * x[base + p];
                }
            }
        }
        Tensor::new(input.shape().to_vec(), out)
    }

    fn adjoint(&self, grad_out: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
        let [t, c, h, w] = self.alignment.check(input_shape)?;
        let f = self.spec.resolve(c)?;
        let a = &self.alignment;
        let plane = h * w;
        let frame = c * plane;
        let g = grad_out.data();
        let mut out = g.to_vec();
        for ti in 0..t {
            out[ti * frame..ti * frame + 2 * f * plane].fill(S::zero());
        }
        let mut scaled = vec![S::zero(); plane];
        for ti in 0..t {
            for ch in 0..2 * f {
                let (neighbour, plan, valid) = if ch < f {
                    (ti.checked_sub(1), &a.to_prev[ti], &a.valid_prev[ti])
                } else {
                    ((ti + 1 < t).then_some(ti + 1), &a.to_next[ti], &a.valid_next[ti])
                };
                let base = ti * frame + ch * plane;
                for p in 0..plane {
                    let v = S::lit(valid[p] as f64);
                    out[base + p] += (S::one() - v) * g[base + p];
                    scaled[p] = v * g[base + p];
                }
                if let Some(n) = neighbour {
                    let nb = n * frame + ch * plane;
                    plan.scatter_plane(&scaled, &mut out[nb..nb + plane]);
                }
            }
        }
        Tensor::new(input_shape.to_vec(), out)
    }
}

/// Temporal shift followed by flow alignment and validity-weighted fusion.
pub fn shift_and_align<S: Scalar>(
    x: &Tensor<S>,
    alignment: &Arc<FrameAlignment>,
    spec: &ShiftSpec,
) -> Result<AlignedFeature<S>> {
    let op = ShiftAlign { spec: *spec, alignment: Arc::clone(alignment) };
    let tensor = op.apply(x)?;
    let f = spec.resolve(x.shape()[1])?;
    Ok(AlignedFeature { tensor, modified: 0..2 * f })
}

/// How a TSAM-style layer mixes information across frames before its conv.
#[derive(Debug, Clone)]
pub enum TemporalMix {
    /// Frame-independent gated convolution.
    None,
    /// Temporal shift only.
    Shift(ShiftSpec),
    /// Temporal shift, flow alignment and validity fusion.
    ShiftAlign(ShiftSpec, Arc<FrameAlignment>),
}

impl TemporalMix {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        match self {
            TemporalMix::None => Ok(x),
            TemporalMix::Shift(spec) => tape.linear(x, Arc::new(TemporalShift { spec: *spec })),
            TemporalMix::ShiftAlign(spec, a) => {
                tape.linear(x, Arc::new(ShiftAlign { spec: *spec, alignment: Arc::clone(a) }))
            }
        }
    }
}

/// Tape handles of a gated convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GatedConvVars {
    pub feature_weight: Var,
    pub feature_bias: Var,
    pub gate_weight: Var,
    pub gate_bias: Var,
}

/// `conv(mix(x)) * sigmoid(conv_gate(x))`; the gate reads the unmixed feature.
pub fn tsam_gated_conv<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    mix: &TemporalMix,
    weights: &GatedConvVars,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let mixed = mix.apply(tape, x)?;
    let feature = tape.conv2d(mixed, weights.feature_weight, Some(weights.feature_bias), stride, pad)?;
    let gate = tape.conv2d(x, weights.gate_weight, Some(weights.gate_bias), stride, pad)?;
    let gate = tape.sigmoid(gate)?;
    tape.mul(feature, gate)
}

/// Frames visible to one output frame after `n` stacked shift modules: each
/// module widens the window by one frame on either side, so one module sees 3.
pub fn receptive_field(n: usize) -> usize {
    2 * n + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_spec_resolution() {
        let s = ShiftSpec::default();
        assert_eq!(s.resolve(16).unwrap(), 2);
        assert_eq!(s.resolve(8).unwrap(), 1);
        assert_eq!(s.resolve(4).unwrap(), 1);
        assert!(s.resolve(1).is_err());
        assert_eq!(ShiftSpec::parse("1/4").unwrap().resolve(8).unwrap(), 2);
        assert_eq!(ShiftSpec::parse("0.125").unwrap().resolve(16).unwrap(), 2);
        assert!(ShiftSpec::new(3, 4).is_err());
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(0), 1);
        assert_eq!(receptive_field(1), 3);
        assert_eq!(receptive_field(21), 43);
    }

    /// Runs `n` rounds of temporal shift + all-ones 1x1 conv on a one-frame
    /// impulse and counts which input frames reach the middle output frame.
    fn measured_field(n: usize) -> usize {
        let (t, c) = (2 * n + 5, 8);
        let spec = ShiftSpec::default();
        let mix = Tensor::<f64>::ones([c, c, 1, 1]);
        (0..t)
            .filter(|&src| {
                let mut x = Tensor::<f64>::from_fn([t, c, 1, 1], |i| if i / c == src { 1.0 } else { 0.0 });
                for _ in 0..n {
                    x = temporal_shift(&x, &spec).unwrap();
                    x = crate::numerics::conv2d(&x, &mix, None, 1, 0).unwrap();
                }
                x.index0(t / 2).unwrap().data().iter().any(|&v| v != 0.0)
            })
            .count()
    }

    #[test]
    fn receptive_field_matches_measured_reach() {
        for n in 0..6 {
            assert_eq!(receptive_field(n), measured_field(n), "n = {n}");
        }
    }

    #[test]
    fn empty_clip_is_rejected() {
        let x = Tensor::<f32>::zeros([0, 8, 2, 2]);
        assert!(temporal_shift(&x, &ShiftSpec::default()).is_err());
    }
}
