//! Corruption masks: moving object-like blobs, moving curves, stationary shapes.
//!
//! Masks are `[T, 1, H, W]` with 1 = valid and 0 = corrupted. A binary shape is
//! drawn once until its coverage lands in the requested decile band, then moved
//! per frame by an integer random walk that keeps it fully inside the frame, so
//! every frame has the same coverage.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Allowed slack around the coverage band.
pub const COVERAGE_TOL: f64 = 0.02;
const MAX_ATTEMPTS: usize = 64;
const MAX_STAMPS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskKind {
    ObjectLike,
    Curve,
    Stationary,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::ObjectLike, MaskKind::Curve, MaskKind::Stationary];

    pub fn name(&self) -> &'static str {
        match self {
            MaskKind::ObjectLike => "object_like",
            MaskKind::Curve => "curve",
            MaskKind::Stationary => "stationary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Format(format!("unknown mask kind '{s}'")))
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Decile index: coverage in `[band/10, (band+1)/10]`, `band` in `0..7`.
    pub band: u8,
    /// Standard deviation of the per-frame random-walk step, in pixels.
    pub step_sigma: f64,
    /// Probability that a stationary mask moves anyway.
    pub animate_prob: f64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, band: u8) -> Self {
        MaskSpec { kind, band, step_sigma: 1.5, animate_prob: 0.5 }
    }

    /// Evaluation setting: stationary masks stay put.
    pub fn for_eval(kind: MaskKind, band: u8) -> Self {
        MaskSpec { animate_prob: 0.0, ..MaskSpec::new(kind, band) }
    }

    pub fn coverage_band(&self) -> (f64, f64) {
        (self.band as f64 / 10.0, (self.band as f64 + 1.0) / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.band > 6 {
            return Err(Error::invalid(format!("coverage band {} outside 0..=6", self.band)));
        }
        if !(self.step_sigma.is_finite() && self.step_sigma >= 0.0) {
            return Err(Error::invalid(format!("step_sigma must be >= 0, got {}", self.step_sigma)));
        }
        if !(0.0..=1.0).contains(&self.animate_prob) {
            return Err(Error::invalid(format!("animate_prob must be in [0, 1], got {}", self.animate_prob)));
        }
        Ok(())
    }
}

/// Binary shape on the frame grid; `true` = corrupted.
struct Shape {
    h: usize,
    w: usize,
    cells: Vec<bool>,
}

impl Shape {
    fn new(h: usize, w: usize) -> Self {
        Shape { h, w, cells: vec![false; h * w] }
    }

    fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    fn coverage(&self) -> f64 {
        self.count() as f64 / (self.h * self.w) as f64
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64) {
        self.fill_where(cx, cy, r, |dx, dy| dx * dx + dy * dy <= r * r);
    }

    /// Star-shaped blob with a wobbly radius `r * (1 + a sin(k phi + p))`.
    fn blob(&mut self, cx: f64, cy: f64, r: f64, rng: &mut ChaCha8Rng) {
        let lobes = rng.random_range(2..6) as f64;
        let amp: f64 = rng.random_range(0.1..0.35);
        let phase = rng.random_range(0.0..2.0 * PI);
        let stretch: f64 = rng.random_range(0.7..1.4);
        self.fill_where(cx, cy, r * (1.0 + amp) * stretch.max(1.0 / stretch), |dx, dy| {
            let (ex, ey) = (dx / stretch, dy * stretch);
            let rr = r * (1.0 + amp * (lobes * ey.atan2(ex) + phase).sin());
            ex * ex + ey * ey <= rr * rr
        });
    }

    fn rect(&mut self, x0: f64, y0: f64, rw: f64, rh: f64) {
        let (cx, cy) = (x0 + rw / 2.0, y0 + rh / 2.0);
        self.fill_where(cx, cy, rw.max(rh), |dx, dy| dx.abs() <= rw / 2.0 && dy.abs() <= rh / 2.0);
    }

    fn fill_where(&mut self, cx: f64, cy: f64, reach: f64, inside: impl Fn(f64, f64) -> bool) {
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil().max(0.0) as usize).min(self.h - 1);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil().max(0.0) as usize).min(self.w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if inside(x as f64 - cx, y as f64 - cy) {
                    self.cells[y * self.w + x] = true;
                }
            }
        }
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)`, or `None` when empty.
    fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.cells.iter().enumerate().filter(|(_, &c)| c) {
            let (x, y) = (i % self.w, i / self.w);
            b = Some(match b {
                None => (x, y, x, y),
                Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)),
            });
        }
        b
    }
}

fn draw(kind: MaskKind, h: usize, w: usize, target: f64, rng: &mut ChaCha8Rng) -> Shape {
    let mut shape = Shape::new(h, w);
    let goal = (target * (h * w) as f64).ceil() as usize;
    // Object-like cluster centre, or the current pen position for curves.
    let (mut px, mut py) = (rng.random_range(0.3..0.7) * w as f64, rng.random_range(0.3..0.7) * h as f64);
    let mut heading = rng.random_range(0.0..2.0 * PI);
    let width = rng.random_range(3.0..=8.0f64);
    // Stamps that add nothing widen the scatter.
    let mut stall = 0.0;
    for _ in 0..MAX_STAMPS {
        let before = shape.count();
        if before >= goal {
            break;
        }
        let missing = (goal - before) as f64;
        match kind {
            MaskKind::ObjectLike => {
                let r = ((missing / PI).sqrt() * rng.random_range(0.5..0.9)).max(1.0);
                let spread = r.max(2.0) + stall;
                let cx = px + rng.random_range(-spread..spread);
                let cy = py + rng.random_range(-spread..spread);
                shape.blob(cx, cy, r, rng);
            }
            MaskKind::Curve => {
                shape.disc(px, py, width / 2.0);
                heading += rng.random_range(-0.35..0.35);
                let step = (width / 3.0).max(1.0);
                let (nx, ny) = (px + step * heading.cos(), py + step * heading.sin());
                if nx < 0.0 || ny < 0.0 || nx > (w - 1) as f64 || ny > (h - 1) as f64 {
                    heading += PI * rng.random_range(0.5..1.5);
                } else {
                    (px, py) = (nx, ny);
                }
            }
            MaskKind::Stationary => {
                let side = (missing.sqrt() * rng.random_range(0.6..1.0)).max(1.0);
                let aspect = rng.random_range(0.6..1.6f64);
                let (rw, rh) = ((side * aspect).min(w as f64), (side / aspect).min(h as f64));
                let x0 = rng.random_range(0.0..=(w as f64 - rw).max(0.0));
                let y0 = rng.random_range(0.0..=(h as f64 - rh).max(0.0));
                if rng.random_bool(0.5) {
                    shape.rect(x0, y0, rw, rh);
                } else {
                    shape.blob(x0 + rw / 2.0, y0 + rh / 2.0, rw.min(rh) / 2.0 + 0.5, rng);
                }
            }
        }
        stall = if shape.count() > before { 0.0 } else { stall + 1.0 };
    }
    shape
}

/// Generates `[T, 1, H, W]` binary masks (0 = corrupted).
pub fn gen_mask(spec: &MaskSpec, t: usize, h: usize, w: usize, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("mask extent must be nonzero, got {t}x{h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.coverage_band();
    let (accept_lo, accept_hi) = ((lo - COVERAGE_TOL).max(0.0), hi + COVERAGE_TOL);
    let mut shape = None;
    for _ in 0..MAX_ATTEMPTS {
        let target = rng.random_range(lo..hi).max(0.01);
        let s = draw(spec.kind, h, w, target, &mut rng);
        if (accept_lo..=accept_hi).contains(&s.coverage()) {
            shape = Some(s);
            break;
        }
    }
    let shape = shape.ok_or_else(|| {
        Error::invalid(format!(
            "coverage band [{lo:.1}, {hi:.1}] unreachable for a {h}x{w} {} mask",
            spec.kind
        ))
    })?;

    let moving = match spec.kind {
        MaskKind::Stationary => rng.random_bool(spec.animate_prob),
        _ => true,
    };
    let offsets = walk(&shape, t, moving, spec.step_sigma, &mut rng)?;
    let mut out = vec![1.0f32; t * h * w];
    for (frame, &(ox, oy)) in out.chunks_mut(h * w).zip(&offsets) {
        for (i, _) in shape.cells.iter().enumerate().filter(|(_, &c)| c) {
            let x = (i % w) as i64 + ox;
            let y = (i / w) as i64 + oy;
            frame[y as usize * w + x as usize] = 0.0;
        }
    }
    Tensor::new([t, 1, h, w], out)
}

/// Integer offsets per frame that keep the shape's bounding box in the frame.
fn walk(shape: &Shape, t: usize, moving: bool, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<(i64, i64)>> {
    let Some((x0, y0, x1, y1)) = shape.bbox() else {
        return Ok(vec![(0, 0); t]);
    };
    let (min_x, max_x) = (-(x0 as i64), (shape.w - 1 - x1) as i64);
    let (min_y, max_y) = (-(y0 as i64), (shape.h - 1 - y1) as i64);
    let step = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let (mut ox, mut oy) = (0i64, 0i64);
    let mut offsets = Vec::with_capacity(t);
    for _ in 0..t {
        offsets.push((ox, oy));
        if moving && sigma > 0.0 {
            ox = (ox + step.sample(rng).round() as i64).clamp(min_x, max_x);
            oy = (oy + step.sample(rng).round() as i64).clamp(min_y, max_y);
        }
    }
    Ok(offsets)
}

/// Corrupted fraction of each frame of a `[T, 1, H, W]` mask.
pub fn coverage_per_frame(mask: &Tensor<f32>) -> Vec<f64> {
    let s = mask.shape();
    let plane = s[2] * s[3];
    mask.data().chunks(plane).map(|f| f.iter().filter(|&&v| v == 0.0).count() as f64 / plane as f64).collect()
}
