//! Synthetic clips: a textured analytic canvas transported by a rigid motion.
//!
//! Frame `t` is `I_t(q) = canvas(M^-t(q))`, so content at `p` in frame `t`
//! sits at `M(p)` in frame `t + 1`. The exact flows are
//! `F_{t->t+1} = M(p) - p` and `F_{t+1->t} = M^-1(p) - p`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{synth_flow, FlowField, Motion};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Texture {
    Checker,
    Gradient,
    NoiseBlobs,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Checker, Texture::Gradient, Texture::NoiseBlobs];

    pub fn name(&self) -> &'static str {
        match self {
            Texture::Checker => "checker",
            Texture::Gradient => "gradient",
            Texture::NoiseBlobs => "noise_blobs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Texture::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Format(format!("unknown texture '{s}'")))
    }
}

impl std::fmt::Display for Texture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Motion families for randomly drawn clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionKind {
    Still,
    Translate,
    Rotate,
    Zoom,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [MotionKind::Still, MotionKind::Translate, MotionKind::Rotate, MotionKind::Zoom];

    pub fn name(&self) -> &'static str {
        match self {
            MotionKind::Still => "still",
            MotionKind::Translate => "translate",
            MotionKind::Rotate => "rotate",
            MotionKind::Zoom => "zoom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MotionKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Format(format!("unknown motion kind '{s}'")))
    }

    /// Draws a motion whose per-frame displacement is about `magnitude` pixels.
    pub fn sample(&self, magnitude: f64, h: usize, w: usize, rng: &mut impl Rng) -> Motion {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let radius = cx.max(cy).max(1.0);
        match self {
            MotionKind::Still => Motion::still(),
            MotionKind::Translate => {
                let a = rng.random_range(0.0..2.0 * PI);
                Motion::Constant { dx: magnitude * a.cos(), dy: magnitude * a.sin() }
            }
            MotionKind::Rotate => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Motion::Rotation { cx, cy, theta: sign * magnitude / radius }
            }
            MotionKind::Zoom => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Motion::Zoom { cx, cy, scale: 1.0 + sign * magnitude / radius }
            }
        }
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Smooth RGB function of continuous canvas coordinates, values in `[-1, 1]`.
#[derive(Debug, Clone)]
struct Canvas {
    texture: Texture,
    params: Vec<f64>,
    blobs: Vec<[f64; 6]>,
}

impl Canvas {
    fn new(texture: Texture, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut blobs = Vec::new();
        match texture {
            Texture::Checker => {
                params[0] = rng.random_range(6.0..12.0);
                params[1] = rng.random_range(0.0..PI);
            }
            Texture::Gradient => {}
            Texture::NoiseBlobs => {
                let span = h.max(w) as f64;
                for _ in 0..12 {
                    blobs.push([
                        rng.random_range(-0.3..1.3) * w as f64,
                        rng.random_range(-0.3..1.3) * h as f64,
                        rng.random_range(0.06..0.2) * span,
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]);
                }
            }
        }
        Canvas { texture, params, blobs }
    }

    fn rgb(&self, x: f64, y: f64) -> [f64; 3] {
        let p = &self.params;
        match self.texture {
            Texture::Checker => {
                let (s, c) = p[1].sin_cos();
                let (u, v) = ((c * x + s * y) * PI / p[0], (-s * x + c * y) * PI / p[0]);
                let check = (2.5 * u.sin() * v.sin()).tanh();
                [0.8 * check, 0.6 * check * p[2].signum(), 0.3 * p[3] + 0.4 * check]
            }
            Texture::Gradient => {
                let ch = |k: usize| 0.9 * (0.05 * (p[3 * k] * x + p[3 * k + 1] * y) + PI * p[3 * k + 2]).sin();
                [ch(0), ch(1), ch(2)]
            }
            Texture::NoiseBlobs => {
                let mut acc = [0.1 * p[0], 0.1 * p[1], 0.1 * p[2]];
                for b in &self.blobs {
                    let g = (-((x - b[0]).powi(2) + (y - b[1]).powi(2)) / (2.0 * b[2] * b[2])).exp();
                    for (a, c) in acc.iter_mut().zip(&b[3..]) {
                        *a += c * g;
                    }
                }
                acc.map(f64::tanh)
            }
        }
    }
}

/// Ground-truth frames with exact flows in both directions.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    /// `[T, 3, H, W]` in `[-1, 1]`.
    pub frames: Tensor<f32>,
    /// `F_{t->t+1}` for `t` in `0..T-1`.
    pub flows_fwd: Vec<FlowField>,
    /// `F_{t+1->t}` for `t` in `0..T-1`.
    pub flows_bwd: Vec<FlowField>,
    pub motion: Motion,
    pub texture: Texture,
    pub seed: u64,
}

impl SyntheticClip {
    pub fn frames_len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Per-frame flows to the previous frame; frame 0 gets a zero field.
    pub fn flows_to_prev(&self) -> Vec<FlowField> {
        let mut v = vec![FlowField::zeros(self.height(), self.width())];
        v.extend(self.flows_bwd.iter().cloned());
        v
    }

    /// Per-frame flows to the next frame; the last frame gets a zero field.
    pub fn flows_to_next(&self) -> Vec<FlowField> {
        let mut v = self.flows_fwd.clone();
        v.push(FlowField::zeros(self.height(), self.width()));
        v
    }
}

/// Renders `t` frames of a random `texture` moved by `motion`.
pub fn gen_clip(motion: &Motion, texture: Texture, t: usize, h: usize, w: usize, seed: u64) -> Result<SyntheticClip> {
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("clip extent must be nonzero, got {t}x{h}x{w}")));
    }
    let fwd = synth_flow(motion, h, w)?;
    let bwd = synth_flow(&motion.inverse(), h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = Canvas::new(texture, h, w, &mut rng);
    let mut data = Vec::with_capacity(t * 3 * h * w);
    for ti in 0..t {
        let back = motion.power(-(ti as i64));
        let mut frame = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = back.apply(x as f64, y as f64);
                for (c, v) in canvas.rgb(sx, sy).into_iter().enumerate() {
                    frame[(c * h + y) * w + x] = v as f32;
                }
            }
        }
        data.extend(frame);
    }
    Ok(SyntheticClip {
        frames: Tensor::new([t, 3, h, w], data)?,
        flows_fwd: vec![fwd; t.saturating_sub(1)],
        flows_bwd: vec![bwd; t.saturating_sub(1)],
        motion: *motion,
        texture,
        seed,
    })
}
