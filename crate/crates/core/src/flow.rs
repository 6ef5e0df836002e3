//! Optical-flow fields, backward warping and cycle-consistency validity.
//!
//! Flow convention: `flow(x, y) = (dx, dy)` in pixels of its own grid, with
//! `dx` positive rightward and `dy` positive downward. Warping is backward:
//! the output at `(x, y)` samples the source at `(x + dx, y + dy)`. A flow
//! from frame `t` to frame `s` therefore pulls frame `s` onto frame `t`'s grid.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{LinearMap, Scalar, Tensor};

/// Sample positions this close outside the image are snapped to the border,
/// so rounding in rescaled flows does not flip validity.
const EDGE_TOL: f64 = 1e-4;

/// Per-pixel displacement field, stored as `[H, W, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    tensor: Tensor<f32>,
}

impl FlowField {
    /// Validates shape, finiteness and the `|dx| <= W`, `|dy| <= H` sanity bound.
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        let &[h, w, 2] = tensor.shape() else {
            return Err(Error::shape("flow", format!("expected [H, W, 2], got {:?}", tensor.shape())));
        };
        if h == 0 || w == 0 {
            return Err(Error::shape("flow", "empty flow field"));
        }
        for px in tensor.data().chunks_exact(2) {
            if !px[0].is_finite() || !px[1].is_finite() {
                return Err(Error::NonFinite { op: "flow" });
            }
            if px[0].abs() > w as f32 || px[1].abs() > h as f32 {
                return Err(Error::invalid(format!(
                    "flow vector ({}, {}) exceeds the {w}x{h} frame",
                    px[0], px[1]
                )));
            }
        }
        Ok(FlowField { tensor })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { tensor: Tensor::zeros([h, w, 2]) }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32) -> Result<Self> {
        Self::new(Tensor::from_fn([h, w, 2], |i| if i % 2 == 0 { dx } else { dy }))
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = 2 * (y * self.width() + x);
        let d = self.tensor.data();
        (d[i] as f64, d[i + 1] as f64)
    }

    /// Bilinear lookup at a real position already known to be in bounds.
    fn sample(&self, s: &Sample) -> (f64, f64) {
        let w = self.width();
        let d = self.tensor.data();
        let mut acc = (0.0, 0.0);
        for (idx, wt) in s.taps(w) {
            acc.0 += wt * d[2 * idx] as f64;
            acc.1 += wt * d[2 * idx + 1] as f64;
        }
        acc
    }
}

/// Per-pixel weights in `[0, 1]`; 1 marks a trustworthy warped value.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    tensor: Tensor<f32>,
}

impl ValidityMask {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.rank() != 2 {
            return Err(Error::shape("validity", format!("expected [H, W], got {:?}", tensor.shape())));
        }
        if tensor.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("validity values must lie in [0, 1]"));
        }
        Ok(ValidityMask { tensor })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        ValidityMask { tensor: Tensor::ones([h, w]) }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ValidityMask { tensor: Tensor::zeros([h, w]) }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn values(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.tensor.sum_f64() / self.tensor.numel() as f64
    }

    /// Pointwise product, used to combine an in-bounds indicator with a cycle check.
    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        Ok(ValidityMask { tensor: self.tensor.zip_map(&other.tensor, |a, b| a * b)? })
    }
}

/// Cycle-consistency threshold `delta` (pixels) and the optional soft variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidityConfig {
    pub delta: f64,
    pub soft: bool,
    pub soft_scale: f64,
}

impl Default for ValidityConfig {
    fn default() -> Self {
        ValidityConfig { delta: 1.0, soft: false, soft_scale: 1.0 }
    }
}

impl ValidityConfig {
    pub fn binary(delta: f64) -> Self {
        ValidityConfig { delta, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("validity delta must be > 0, got {}", self.delta)));
        }
        if self.soft && !(self.soft_scale > 0.0 && self.soft_scale.is_finite()) {
            return Err(Error::invalid("soft validity scale must be > 0"));
        }
        Ok(())
    }

    /// Same test expressed in the pixel units of a grid scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        ValidityConfig { delta: self.delta * factor, soft: self.soft, soft_scale: self.soft_scale * factor }
    }
}

/// Bilinear sampling location with its four clamped corner taps.
#[derive(Debug, Clone, Copy)]
struct Sample {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

impl Sample {
    /// `None` when `(sx, sy)` lies outside `[0, W-1] x [0, H-1]`.
    fn at(sx: f64, sy: f64, h: usize, w: usize) -> Option<Sample> {
        let (maxx, maxy) = ((w - 1) as f64, (h - 1) as f64);
        if !(sx >= -EDGE_TOL && sx <= maxx + EDGE_TOL && sy >= -EDGE_TOL && sy <= maxy + EDGE_TOL) {
            return None;
        }
        let (sx, sy) = (sx.clamp(0.0, maxx), sy.clamp(0.0, maxy));
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        Some(Sample { x0, y0, x1: (x0 + 1).min(w - 1), y1: (y0 + 1).min(h - 1), fx: sx - x0 as f64, fy: sy - y0 as f64 })
    }

    fn taps(&self, w: usize) -> [(usize, f64); 4] {
        [
            (self.y0 * w + self.x0, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.y0 * w + self.x1, self.fx * (1.0 - self.fy)),
            (self.y1 * w + self.x0, (1.0 - self.fx) * self.fy),
            (self.y1 * w + self.x1, self.fx * self.fy),
        ]
    }
}

/// Precomputed backward-warp sampling pattern for one flow field.
///
/// Applying it is linear in the source, so it doubles as a tape op.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    h: usize,
    w: usize,
    samples: Vec<Option<Sample>>,
}

impl WarpPlan {
    pub fn new(flow: &FlowField) -> Self {
        let (h, w) = (flow.height(), flow.width());
        let samples = (0..h * w)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let (dx, dy) = flow.at(x, y);
                Sample::at(x as f64 + dx, y as f64 + dy, h, w)
            })
            .collect();
        WarpPlan { h, w, samples }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn in_bounds(&self) -> ValidityMask {
        let data = self.samples.iter().map(|s| if s.is_some() { 1.0 } else { 0.0 }).collect();
        ValidityMask { tensor: Tensor::new([self.h, self.w], data).expect("mask shape") }
    }

    /// Warps one `H x W` plane.
    pub fn warp_plane<S: Scalar>(&self, src: &[S], dst: &mut [S]) {
        for (out, s) in dst.iter_mut().zip(&self.samples) {
            *out = match s {
                None => S::zero(),
                Some(s) => {
                    let mut acc = S::zero();
                    for (idx, wt) in s.taps(self.w) {
                        acc += S::lit(wt) * src[idx];
                    }
                    acc
                }
            };
        }
    }

    /// Adjoint of [`WarpPlan::warp_plane`]: scatters `grad` into `dst` (accumulating).
    pub fn scatter_plane<S: Scalar>(&self, grad: &[S], dst: &mut [S]) {
        for (&g, s) in grad.iter().zip(&self.samples) {
            if let Some(s) = s {
                for (idx, wt) in s.taps(self.w) {
                    dst[idx] += S::lit(wt) * g;
                }
            }
        }
    }

    fn check<S: Scalar>(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [c, h, w] if h == self.h && w == self.w => Ok(c),
            _ => Err(Error::shape(
                "warp_bilinear",
                format!("source {:?} vs flow resolution {}x{}", shape, self.h, self.w),
            )),
        }
    }
}

impl<S: Scalar> LinearMap<S> for WarpPlan {
    fn name(&self) -> &'static str {
        "warp_bilinear"
    }

    fn apply(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let c = self.check::<S>(input.shape())?;
        let plane = self.h * self.w;
        let mut out = vec![S::zero(); c * plane];
        for ch in 0..c {
            self.warp_plane(&input.data()[ch * plane..(ch + 1) * plane], &mut out[ch * plane..(ch + 1) * plane]);
        }
        Tensor::new(input.shape().to_vec(), out)
    }

    fn adjoint(&self, grad_out: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
        let c = self.check::<S>(input_shape)?;
        let plane = self.h * self.w;
        let mut out = vec![S::zero(); c * plane];
        for ch in 0..c {
            self.scatter_plane(&grad_out.data()[ch * plane..(ch + 1) * plane], &mut out[ch * plane..(ch + 1) * plane]);
        }
        Tensor::new(input_shape.to_vec(), out)
    }
}

/// Backward-warps `source` (`[C, H, W]`) through `flow`, zero-filling samples
/// that land outside the image; `in_bounds` marks the pixels that did not.
pub fn warp_bilinear<S: Scalar>(source: &Tensor<S>, flow: &FlowField) -> Result<(Tensor<S>, ValidityMask)> {
    let plan = WarpPlan::new(flow);
    let warped = plan.apply(source)?;
    Ok((warped, plan.in_bounds()))
}

/// Tape-ready warp of a `[C, H, W]` tensor; the flow is treated as constant.
pub fn warp_op<S: Scalar>(flow: &FlowField) -> Arc<dyn LinearMap<S>> {
    Arc::new(WarpPlan::new(flow))
}

/// Forward-backward consistency of a flow pair.
///
/// For every pixel `A` of `flow_bwd`'s grid, follow `flow_bwd` to a landing
/// point `L`, read `flow_fwd` at `L` bilinearly and step back; the pixel is
/// valid iff the round trip ends within `delta` of `A` and `L` is in bounds.
pub fn cycle_validity(flow_fwd: &FlowField, flow_bwd: &FlowField, cfg: &ValidityConfig) -> Result<ValidityMask> {
    cfg.validate()?;
    let (h, w) = (flow_bwd.height(), flow_bwd.width());
    if flow_fwd.height() != h || flow_fwd.width() != w {
        return Err(Error::shape(
            "cycle_validity",
            format!("forward {}x{} vs backward {}x{}", flow_fwd.height(), flow_fwd.width(), h, w),
        ));
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (bx, by) = flow_bwd.at(x, y);
            let (lx, ly) = (x as f64 + bx, y as f64 + by);
            let v = match Sample::at(lx, ly, h, w) {
                None => 0.0,
                Some(s) => {
                    let (fx, fy) = flow_fwd.sample(&s);
                    let err = ((lx + fx - x as f64).powi(2) + (ly + fy - y as f64).powi(2)).sqrt();
                    if cfg.soft {
                        (-(err * err) / (cfg.soft_scale * cfg.soft_scale)).exp()
                    } else if err < cfg.delta {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            out.push(v as f32);
        }
    }
    ValidityMask::new(Tensor::new([h, w], out)?)
}

/// Resamples a flow to `new_h x new_w` (bilinear, edge-clamped, pixel-centre
/// aligned) and rescales the vectors into the new grid's pixel units.
pub fn rescale_flow(flow: &FlowField, new_h: usize, new_w: usize) -> Result<FlowField> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("rescale_flow: target extent must be >= 1"));
    }
    let (h, w) = (flow.height(), flow.width());
    if (h, w) == (new_h, new_w) {
        return Ok(flow.clone());
    }
    let (sy, sx) = (h as f64 / new_h as f64, w as f64 / new_w as f64);
    let mut data = Vec::with_capacity(new_h * new_w * 2);
    for y in 0..new_h {
        let py = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for x in 0..new_w {
            let px = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let s = Sample::at(px, py, h, w).expect("clamped position");
            let (dx, dy) = flow.sample(&s);
            data.push((dx / sx) as f32);
            data.push((dy / sy) as f32);
        }
    }
    FlowField::new(Tensor::new([new_h, new_w, 2], data)?)
}

/// Rigid analytic motions used to build synthetic clips and their exact flows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Constant { dx: f64, dy: f64 },
    /// Rotation by `theta` radians about `(cx, cy)` (clockwise on screen for `theta > 0`).
    Rotation { cx: f64, cy: f64, theta: f64 },
    /// Isotropic scaling by `scale` about `(cx, cy)`.
    Zoom { cx: f64, cy: f64, scale: f64 },
}

impl Motion {
    pub fn still() -> Self {
        Motion::Constant { dx: 0.0, dy: 0.0 }
    }

    /// Where the point `(x, y)` moves after one step of the motion.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Motion::Constant { dx, dy } => (x + dx, y + dy),
            Motion::Rotation { cx, cy, theta } => {
                let (s, c) = theta.sin_cos();
                let (rx, ry) = (x - cx, y - cy);
                (cx + c * rx - s * ry, cy + s * rx + c * ry)
            }
            Motion::Zoom { cx, cy, scale } => (cx + scale * (x - cx), cy + scale * (y - cy)),
        }
    }

    pub fn inverse(&self) -> Motion {
        match *self {
            Motion::Constant { dx, dy } => Motion::Constant { dx: -dx, dy: -dy },
            Motion::Rotation { cx, cy, theta } => Motion::Rotation { cx, cy, theta: -theta },
            Motion::Zoom { cx, cy, scale } => Motion::Zoom { cx, cy, scale: 1.0 / scale },
        }
    }

    /// `steps` applications (negative for the inverse).
    pub fn power(&self, steps: i64) -> Motion {
        let k = steps as f64;
        match *self {
            Motion::Constant { dx, dy } => Motion::Constant { dx: k * dx, dy: k * dy },
            Motion::Rotation { cx, cy, theta } => Motion::Rotation { cx, cy, theta: k * theta },
            Motion::Zoom { cx, cy, scale } => Motion::Zoom { cx, cy, scale: scale.powf(k) },
        }
    }

    pub fn is_finite(&self) -> bool {
        match *self {
            Motion::Constant { dx, dy } => dx.is_finite() && dy.is_finite(),
            Motion::Rotation { cx, cy, theta } => cx.is_finite() && cy.is_finite() && theta.is_finite(),
            Motion::Zoom { cx, cy, scale } => cx.is_finite() && cy.is_finite() && scale.is_finite() && scale > 0.0,
        }
    }
}

impl std::fmt::Display for Motion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Motion::Constant { dx, dy } => write!(f, "constant:{dx},{dy}"),
            Motion::Rotation { cx, cy, theta } => write!(f, "rotation:{cx},{cy},{theta}"),
            Motion::Zoom { cx, cy, scale } => write!(f, "zoom:{cx},{cy},{scale}"),
        }
    }
}

impl std::str::FromStr for Motion {
    type Err = Error;

    /// Parses the `Display` form, e.g. `constant:1,0` or `zoom:31.5,31.5,1.02`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad motion '{s}'"));
        let (kind, args) = s.trim().split_once(':').ok_or_else(bad)?;
        let v: Vec<f64> = args.split(',').map(|a| a.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let m = match (kind, v.as_slice()) {
            ("constant", &[dx, dy]) => Motion::Constant { dx, dy },
            ("rotation", &[cx, cy, theta]) => Motion::Rotation { cx, cy, theta },
            ("zoom", &[cx, cy, scale]) => Motion::Zoom { cx, cy, scale },
            _ => return Err(bad()),
        };
        if !m.is_finite() {
            return Err(bad());
        }
        Ok(m)
    }
}

/// Displacement field `M(p) - p` of one motion step on an `h x w` grid.
pub fn synth_flow(motion: &Motion, h: usize, w: usize) -> Result<FlowField> {
    if !motion.is_finite() {
        return Err(Error::invalid(format!("motion parameters must be finite: {motion:?}")));
    }
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let (mx, my) = motion.apply(x as f64, y as f64);
            data.push((mx - x as f64) as f32);
            data.push((my - y as f64) as f32);
        }
    }
    FlowField::new(Tensor::new([h, w, 2], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_identity_warp() {
        let src = Tensor::<f32>::from_fn([2, 3, 4], |i| i as f32);
        let (out, inb) = warp_bilinear(&src, &FlowField::zeros(3, 4)).unwrap();
        assert_eq!(out, src);
        assert!(inb.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_pixel_shift_interpolates() {
        let src = Tensor::<f64>::from_f64([1, 1, 2], &[0.0, 1.0]).unwrap();
        let flow = FlowField::constant(1, 2, 0.5, 0.0).unwrap();
        let (out, inb) = warp_bilinear(&src, &flow).unwrap();
        assert_eq!(out.data()[0], 0.5);
        assert_eq!(inb.values(), &[1.0, 0.0]);
    }

    #[test]
    fn unit_shift_zero_fills_last_column() {
        let src = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let flow = FlowField::constant(2, 2, 1.0, 0.0).unwrap();
        let (out, inb) = warp_bilinear(&src, &flow).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0, 4.0, 0.0]);
        assert_eq!(inb.values(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn warp_rejects_resolution_mismatch() {
        let src = Tensor::<f32>::zeros([1, 3, 3]);
        assert!(warp_bilinear(&src, &FlowField::zeros(3, 4)).is_err());
    }

    #[test]
    fn flow_sanity_bound_rejects_huge_vectors() {
        assert!(FlowField::constant(4, 4, 5.0, 0.0).is_err());
        assert!(FlowField::constant(4, 4, 4.0, -4.0).is_ok());
        assert!(FlowField::new(Tensor::from_fn([2, 2, 2], |_| f32::NAN)).is_err());
    }

    #[test]
    fn cycle_validity_examples() {
        let cfg = ValidityConfig::default();
        let z = FlowField::zeros(8, 8);
        assert!(cycle_validity(&z, &z, &cfg).unwrap().values().iter().all(|&v| v == 1.0));

        let d = 3.0;
        let bwd = FlowField::constant(8, 8, -d, 0.0).unwrap();
        let fwd = FlowField::constant(8, 8, d, 0.0).unwrap();
        let m = cycle_validity(&fwd, &bwd, &cfg).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if x >= 3 { 1.0 } else { 0.0 };
                assert_eq!(m.values()[y * 8 + x], want, "({x},{y})");
            }
        }

        let bwd = FlowField::constant(8, 8, 5.0, 0.0).unwrap();
        let m = cycle_validity(&z, &bwd, &ValidityConfig::binary(1.0)).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));

        assert!(cycle_validity(&z, &FlowField::zeros(8, 7), &cfg).is_err());
        assert!(cycle_validity(&z, &z, &ValidityConfig::binary(0.0)).is_err());
    }

    #[test]
    fn soft_validity_decays_with_error() {
        let z = FlowField::zeros(4, 4);
        let off = FlowField::constant(4, 4, 0.0, 0.5).unwrap();
        let cfg = ValidityConfig { delta: 1.0, soft: true, soft_scale: 1.0 };
        let m = cycle_validity(&off, &z, &cfg).unwrap();
        assert!((m.values()[0] as f64 - (-0.25f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rescale_examples() {
        let f = FlowField::constant(8, 8, 4.0, 2.0).unwrap();
        assert_eq!(rescale_flow(&f, 8, 8).unwrap(), f);
        let half = rescale_flow(&f, 4, 4).unwrap();
        assert_eq!(half, FlowField::constant(4, 4, 2.0, 1.0).unwrap());
        assert_eq!(rescale_flow(&half, 8, 8).unwrap(), f);
        let neg = rescale_flow(&FlowField::constant(8, 8, -3.0, 1.0).unwrap(), 2, 2).unwrap();
        assert!(neg.tensor().data().chunks(2).all(|p| p[0] < 0.0 && p[1] > 0.0));
        assert!(rescale_flow(&f, 0, 4).is_err());
    }

    #[test]
    fn synth_flow_examples() {
        assert_eq!(synth_flow(&Motion::still(), 4, 5).unwrap(), FlowField::zeros(4, 5));
        let c = synth_flow(&Motion::Constant { dx: 3.0, dy: -1.0 }, 4, 5).unwrap();
        assert!(c.tensor().data().chunks(2).all(|p| p == [3.0, -1.0]));
        let r = synth_flow(&Motion::Rotation { cx: 4.0, cy: 3.0, theta: 0.2 }, 7, 9).unwrap();
        assert_eq!(r.at(4, 3), (0.0, 0.0));
        let z = synth_flow(&Motion::Zoom { cx: 2.0, cy: 2.0, scale: 1.1 }, 5, 5).unwrap();
        assert_eq!(z.at(2, 2), (0.0, 0.0));
        assert!(synth_flow(&Motion::Constant { dx: f64::NAN, dy: 0.0 }, 2, 2).is_err());
    }
}
