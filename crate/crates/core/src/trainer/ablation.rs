//! Shift-only versus flow-aligned generators on held-out synthetic clips.
//!
//! Every arm of one seed sees the same training clips, evaluation clips,
//! initial weights and schedule. Arms differ only in alignment: plain
//! temporal shift, shift-align with the exact analytic flows, or shift-align
//! with flows corrupted by a smooth random field (a stand-in for estimated
//! flow).

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowField, ValidityConfig};
use crate::metrics::{psnr, ssim_video, SsimConfig};
use crate::model::{AlignmentMode, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::numerics::Tensor;
use crate::synth::{gen_clip, gen_mask, MaskKind, MaskSpec, MotionKind, SyntheticClip, Texture};
use crate::trainer::{train_prepared, PreparedClip, Schedule, Stage, TrainOptions};

/// Peak-to-peak range of frames in `[-1, 1]`.
const PEAK: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationArm {
    Tsm,
    TsamExact,
    TsamPerturbed,
}

impl AblationArm {
    pub const ALL: [AblationArm; 3] = [AblationArm::Tsm, AblationArm::TsamExact, AblationArm::TsamPerturbed];

    pub fn name(&self) -> &'static str {
        match self {
            AblationArm::Tsm => "tsm",
            AblationArm::TsamExact => "tsam_exact",
            AblationArm::TsamPerturbed => "tsam_perturbed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Format(format!("unknown ablation arm '{s}'")))
    }

    pub fn alignment(&self) -> AlignmentMode {
        match self {
            AblationArm::Tsm => AlignmentMode::Shift,
            _ => AlignmentMode::ShiftAlign,
        }
    }
}

impl std::fmt::Display for AblationArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub train_clips: usize,
    /// Held-out clips per mask kind.
    pub eval_clips: usize,
    pub steps: usize,
    pub lr: f64,
    /// Typical per-frame displacement in pixels.
    pub motion_magnitude: f64,
    /// Inclusive range of coverage bands for training masks.
    pub train_bands: (u8, u8),
    pub eval_band: u8,
    /// RMS amplitude in pixels of the flow corruption.
    pub perturb_px: f64,
    pub validity: ValidityConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            frames: 5,
            height: 32,
            width: 32,
            base_channels: 8,
            train_clips: 16,
            eval_clips: 2,
            steps: 300,
            lr: 1e-3,
            motion_magnitude: 3.0,
            train_bands: (1, 4),
            eval_band: 3,
            perturb_px: 1.0,
            validity: ValidityConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 || self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("ablation clips need >= 3 frames and sides divisible by 8"));
        }
        if self.train_clips == 0 || self.eval_clips == 0 {
            return Err(Error::invalid("ablation needs training and evaluation clips"));
        }
        if self.train_bands.0 > self.train_bands.1 || self.train_bands.1 > 6 || self.eval_band > 6 {
            return Err(Error::invalid("coverage bands must lie in 0..=6"));
        }
        if !(self.perturb_px >= 0.0 && self.motion_magnitude >= 0.0) {
            return Err(Error::invalid("perturbation and motion magnitudes must be >= 0"));
        }
        self.validity.validate()
    }
}

/// Mean metrics of one arm on one mask kind for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub arm: AblationArm,
    pub mask_kind: MaskKind,
    pub psnr: f64,
    pub ssim: f64,
    pub hole_l1: f64,
}

/// Metrics of one arm averaged over mask kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmSummary {
    pub seed: u64,
    pub arm: AblationArm,
    pub psnr: f64,
    pub ssim: f64,
    pub hole_l1: f64,
}

struct Sample {
    clip: SyntheticClip,
    masks: Tensor<f32>,
}

struct SeedData {
    train: Vec<Sample>,
    eval: Vec<(MaskKind, Vec<Sample>)>,
}

fn random_clip(cfg: &AblationConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticClip> {
    let kinds = [MotionKind::Translate, MotionKind::Translate, MotionKind::Rotate, MotionKind::Zoom];
    let kind = kinds[rng.random_range(0..kinds.len())];
    let texture = Texture::ALL[rng.random_range(0..Texture::ALL.len())];
    let magnitude = cfg.motion_magnitude * rng.random_range(0.5..1.5);
    let motion = kind.sample(magnitude, cfg.height, cfg.width, rng);
    gen_clip(&motion, texture, cfg.frames, cfg.height, cfg.width, rng.random())
}

fn seed_data(seed: u64, cfg: &AblationConfig) -> Result<SeedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xab1a_7e5d);
    let mut train = Vec::with_capacity(cfg.train_clips);
    for _ in 0..cfg.train_clips {
        let clip = random_clip(cfg, &mut rng)?;
        let kind = MaskKind::ALL[rng.random_range(0..MaskKind::ALL.len())];
        let band = rng.random_range(cfg.train_bands.0..=cfg.train_bands.1);
        let masks = gen_mask(&MaskSpec::new(kind, band), cfg.frames, cfg.height, cfg.width, rng.random())?;
        train.push(Sample { clip, masks });
    }
    let mut eval = Vec::new();
    for kind in MaskKind::ALL {
        let mut v = Vec::with_capacity(cfg.eval_clips);
        for _ in 0..cfg.eval_clips {
            let clip = random_clip(cfg, &mut rng)?;
            let spec = MaskSpec::for_eval(kind, cfg.eval_band);
            let masks = gen_mask(&spec, cfg.frames, cfg.height, cfg.width, rng.random())?;
            v.push(Sample { clip, masks });
        }
        eval.push((kind, v));
    }
    Ok(SeedData { train, eval })
}

/// `flow` plus a smooth random field of RMS `amplitude` pixels per component.
pub fn perturb_flow(flow: &FlowField, amplitude: f64, seed: u64) -> Result<FlowField> {
    if amplitude == 0.0 {
        return Ok(flow.clone());
    }
    const WAVES: usize = 3;
    let (h, w) = (flow.height(), flow.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = [[(0.0f64, 0.0f64, 0.0f64); WAVES]; 2];
    for comp in waves.iter_mut() {
        for wave in comp.iter_mut() {
            let (fx, fy) = loop {
                let f = (rng.random_range(-2i32..=2), rng.random_range(-2i32..=2));
                if f != (0, 0) {
                    break f;
                }
            };
            *wave = (fx as f64, fy as f64, rng.random_range(0.0..2.0 * PI));
        }
    }
    let scale = amplitude / (WAVES as f64 / 2.0).sqrt();
    let src = flow.tensor().data();
    let data = Tensor::from_fn([h, w, 2], |i| {
        let (y, x, c) = (i / (2 * w), (i / 2) % w, i % 2);
        let n: f64 = waves[c]
            .iter()
            .map(|&(fx, fy, ph)| (2.0 * PI * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + ph).sin())
            .sum();
        (src[i] as f64 + scale * n) as f32
    });
    FlowField::new(data)
}

fn prepare(
    generator: &Generator<f32>,
    arm: AblationArm,
    sample: &Sample,
    cfg: &AblationConfig,
    perturb_seed: u64,
) -> Result<PreparedClip> {
    let (fwd, bwd) = if arm == AblationArm::TsamPerturbed {
        let p = |flows: &[FlowField], salt: u64| -> Result<Vec<FlowField>> {
            flows
                .iter()
                .enumerate()
                .map(|(i, f)| perturb_flow(f, cfg.perturb_px, perturb_seed ^ salt ^ ((i as u64) << 8)))
                .collect()
        };
        (p(&sample.clip.flows_fwd, 0x1)?, p(&sample.clip.flows_bwd, 0x2)?)
    } else {
        (sample.clip.flows_fwd.clone(), sample.clip.flows_bwd.clone())
    };
    PreparedClip::new(generator, sample.clip.frames.clone(), sample.masks.clone(), &fwd, &bwd, &cfg.validity)
}

/// Mean absolute error over corrupted pixels and all channels.
pub fn hole_l1(pred: &Tensor<f32>, gt: &Tensor<f32>, masks: &Tensor<f32>) -> Result<f64> {
    let s = gt.shape();
    if pred.shape() != s || s.len() != 4 || masks.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::shape("hole_l1", format!("{:?} / {:?} / {:?}", pred.shape(), s, masks.shape())));
    }
    let (c, plane) = (s[1], s[2] * s[3]);
    let m = masks.data();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (a, b)) in pred.data().iter().zip(gt.data()).enumerate() {
        if m[(i / (c * plane)) * plane + i % plane] == 0.0 {
            sum += (*a as f64 - *b as f64).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn run_arm(arm: AblationArm, seed: u64, data: &SeedData, cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    let gconf = GeneratorConfig { alignment: arm.alignment(), ..GeneratorConfig::with_base(cfg.base_channels) };
    let mut generator = Generator::<f32>::new(gconf, seed)?;
    let mut discriminator = Discriminator::new(DiscriminatorConfig::default(), seed)?;
    let train: Vec<PreparedClip> = data
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| prepare(&generator, arm, s, cfg, seed.wrapping_mul(1000) + i as u64))
        .collect::<Result<_>>()?;
    let mut schedule = Schedule::default();
    schedule.stage1 = Stage { steps: cfg.steps, ..schedule.stage1 };
    schedule.stage2 = Stage { steps: 0, ..schedule.stage2 };
    schedule.adam.lr = cfg.lr;
    schedule.seed = seed;
    let options = TrainOptions { validity: cfg.validity, ..Default::default() };
    train_prepared(&mut generator, &mut discriminator, &train, &schedule, &options)?;

    let ssim_cfg = SsimConfig::default();
    let mut rows = Vec::new();
    for (k, (kind, samples)) in data.eval.iter().enumerate() {
        let (mut p, mut s, mut l) = (0.0, 0.0, 0.0);
        for (i, sample) in samples.iter().enumerate() {
            let salt = seed.wrapping_mul(1000) + 500 + (k * samples.len() + i) as u64;
            let prepared = prepare(&generator, arm, sample, cfg, salt)?;
            let out = generator.infer(&prepared.frames, &prepared.masks, prepared.pyramid.as_ref())?;
            let gt = &sample.clip.frames;
            p += psnr(&out, gt, PEAK)?;
            s += ssim_video(&out, gt, &ssim_cfg)?;
            l += hole_l1(&out, gt, &sample.masks)?;
        }
        let n = samples.len() as f64;
        rows.push(AblationRow { seed, arm, mask_kind: *kind, psnr: p / n, ssim: s / n, hole_l1: l / n });
    }
    Ok(rows)
}

/// Trains and evaluates every arm for every seed. Rows are sorted by seed,
/// arm and mask kind.
pub fn run_ablation(arms: &[AblationArm], seeds: &[u64], cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if arms.len() < 2 {
        return Err(Error::invalid("an ablation needs at least two arms"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("an ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let data = seed_data(seed, cfg)?;
        for &arm in arms {
            rows.extend(run_arm(arm, seed, &data, cfg)?);
        }
    }
    rows.sort_by_key(|r| (r.seed, r.arm, MaskKind::ALL.iter().position(|k| *k == r.mask_kind)));
    Ok(rows)
}

/// Per seed and arm averages over mask kinds, in row order.
pub fn summarize(rows: &[AblationRow]) -> Vec<ArmSummary> {
    let mut out: Vec<(ArmSummary, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(s, _)| s.seed == r.seed && s.arm == r.arm) {
            Some((s, n)) => {
                s.psnr += r.psnr;
                s.ssim += r.ssim;
                s.hole_l1 += r.hole_l1;
                *n += 1;
            }
            None => out.push((ArmSummary { seed: r.seed, arm: r.arm, psnr: r.psnr, ssim: r.ssim, hole_l1: r.hole_l1 }, 1)),
        }
    }
    out.into_iter()
        .map(|(s, n)| {
            let n = n as f64;
            ArmSummary { psnr: s.psnr / n, ssim: s.ssim / n, hole_l1: s.hole_l1 / n, ..s }
        })
        .collect()
}

pub const TABLE_HEADER: &str = "seed,arm,mask_kind,psnr,ssim,hole_l1";

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6},{:.6}", r.seed, r.arm, r.mask_kind, r.psnr, r.ssim, r.hole_l1);
    }
    s
}
