//! Two-stage training loop and the alignment ablation harness.
//!
//! Stage 1 trains the generator on reconstruction, perceptual and style
//! losses. Stage 2 adds the hole term and the adversarial term and updates
//! the discriminator once before every generator step. Losses are taken on
//! the raw prediction; the discriminator judges the composite.

pub mod ablation;
pub mod adam;

pub use ablation::{run_ablation, AblationArm, AblationConfig, AblationRow, ArmSummary};
pub use adam::{Adam, AdamConfig};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowField, ValidityConfig};
use crate::losses::{
    perceptual_from_features, recon_loss, style_from_features, total_loss, FeatureExtractor, LossParts, LossWeights,
};
use crate::model::{AlignmentMode, Discriminator, FlowPyramid, Generator};
use crate::numerics::{Tape, Tensor};
use crate::synth::ClipBundle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub weights: LossWeights,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub stage1: Stage,
    pub stage2: Stage,
    pub adam: AdamConfig,
    /// Drives the clip visiting order.
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stage1: Stage { weights: LossWeights::stage1(), steps: 200 },
            stage2: Stage { weights: LossWeights::stage2(), steps: 100 },
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn total_steps(&self) -> usize {
        self.stage1.steps + self.stage2.steps
    }

    /// Stage (1 or 2) of a 0-based step index.
    pub fn stage_of(&self, step: usize) -> u8 {
        if step < self.stage1.steps {
            1
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.weights.validate()?;
        self.stage2.weights.validate()?;
        self.adam.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub validity: ValidityConfig,
    pub extractor_seed: u64,
    /// Where the final (or last good) generator is written.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            validity: ValidityConfig::default(),
            extractor_seed: crate::losses::extractor::DEFAULT_SEED,
            checkpoint_dir: None,
        }
    }
}

/// One row of the loss log. `l_r` already includes `lambda_a` and `lambda_c`;
/// the other terms are unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub stage: u8,
    pub l_r: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub l_g: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,stage,L_r,L_p,L_s,L_G,total";

pub fn log_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:e},{:e},{:e},{:e},{:e}", r.step, r.stage, r.l_r, r.l_p, r.l_s, r.l_g, r.total);
    }
    s
}

/// A training clip with its flow pyramid, built once.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub frames: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub pyramid: Option<FlowPyramid>,
}

impl PreparedClip {
    /// Builds the pyramid only when the generator aligns with flow.
    pub fn new(
        generator: &Generator<f32>,
        frames: Tensor<f32>,
        masks: Tensor<f32>,
        flows_fwd: &[FlowField],
        flows_bwd: &[FlowField],
        validity: &ValidityConfig,
    ) -> Result<Self> {
        let s = frames.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("prepared_clip", format!("frames {s:?}")));
        }
        let pyramid = match generator.config().alignment {
            AlignmentMode::Shift => None,
            AlignmentMode::ShiftAlign => Some(FlowPyramid::build(
                flows_fwd,
                flows_bwd,
                s[0],
                (s[2], s[3]),
                &generator.pyramid_resolutions(s[2], s[3]),
                validity,
            )?),
        };
        Ok(PreparedClip { frames, masks, pyramid })
    }

    pub fn from_bundle(generator: &Generator<f32>, b: &ClipBundle, validity: &ValidityConfig) -> Result<Self> {
        Self::new(generator, b.clip.frames.clone(), b.masks.clone(), &b.clip.flows_fwd, &b.clip.flows_bwd, validity)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LossRow>,
}

impl TrainReport {
    pub fn first_total(&self) -> Option<f64> {
        self.log.first().map(|r| r.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.log.last().map(|r| r.total)
    }
}

/// Trains `generator` (and `discriminator` in stage 2) in place.
///
/// On a non-finite loss the models are rolled back to the weights before the
/// failing step, the generator is written to the checkpoint directory if one
/// is set, and [`Error::Diverged`] is returned.
pub fn train(
    generator: &mut Generator<f32>,
    discriminator: &mut Discriminator<f32>,
    clips: &[ClipBundle],
    schedule: &Schedule,
    options: &TrainOptions,
) -> Result<TrainReport> {
    if clips.is_empty() {
        return Err(Error::invalid("training needs at least one clip"));
    }
    let prepared: Vec<PreparedClip> =
        clips.iter().map(|b| PreparedClip::from_bundle(generator, b, &options.validity)).collect::<Result<_>>()?;
    train_prepared(generator, discriminator, &prepared, schedule, options)
}

/// [`train`] on clips that already carry their pyramids.
pub fn train_prepared(
    generator: &mut Generator<f32>,
    discriminator: &mut Discriminator<f32>,
    clips: &[PreparedClip],
    schedule: &Schedule,
    options: &TrainOptions,
) -> Result<TrainReport> {
    schedule.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("training needs at least one clip"));
    }
    let extractor = FeatureExtractor::<f32>::new(options.extractor_seed);
    let mut opt_g = Adam::new(schedule.adam, generator.params())?;
    let mut opt_d = Adam::new(schedule.adam, discriminator.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(schedule.total_steps());

    for step in 0..schedule.total_steps() {
        if order.is_empty() {
            order = (0..clips.len()).collect();
            order.shuffle(&mut rng);
        }
        let clip = &clips[order.pop().expect("refilled above")];
        let stage = schedule.stage_of(step);
        let weights = if stage == 1 { schedule.stage1.weights } else { schedule.stage2.weights };

        let good_g = generator.params().clone();
        let good_d = discriminator.params().clone();
        let result = train_step(
            generator,
            discriminator,
            &mut opt_g,
            &mut opt_d,
            clip,
            &extractor,
            &weights,
            stage,
            step + 1,
        );
        match result {
            Ok(row) => log.push(row),
            Err(e) if e.is_numeric() => {
                *generator.params_mut() = good_g;
                *discriminator.params_mut() = good_d;
                let checkpoint = match &options.checkpoint_dir {
                    Some(dir) => {
                        generator.save(dir)?;
                        fs::write(dir.join("loss_log.csv"), log_csv(&log))?;
                        Some(dir.clone())
                    }
                    None => None,
                };
                return Err(Error::Diverged { step: step + 1, cause: e.to_string(), checkpoint });
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(dir) = &options.checkpoint_dir {
        generator.save(dir)?;
        fs::write(dir.join("loss_log.csv"), log_csv(&log))?;
    }
    Ok(TrainReport { log })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    generator: &mut Generator<f32>,
    discriminator: &mut Discriminator<f32>,
    opt_g: &mut Adam<f32>,
    opt_d: &mut Adam<f32>,
    clip: &PreparedClip,
    extractor: &FeatureExtractor<f32>,
    weights: &LossWeights,
    stage: u8,
    step: usize,
) -> Result<LossRow> {
    let mut tape = Tape::new();
    let bound = generator.bind(&mut tape);
    let out = generator.forward(&mut tape, &bound, &clip.frames, &clip.masks, clip.pyramid.as_ref())?;
    let gt = tape.constant(clip.frames.clone());

    let adversarial = if stage == 2 && weights.lambda_g > 0.0 {
        let fake = tape.value(out.composite).clone();
        discriminator_step(discriminator, opt_d, &clip.frames, fake)?;
        let frozen = discriminator.bind_frozen(&mut tape);
        let score = discriminator.forward(&mut tape, &frozen, out.composite)?;
        let g = tape.mean(score)?;
        Some(tape.neg(g)?)
    } else {
        None
    };

    let recon = recon_loss(&mut tape, out.raw, gt, &clip.masks, weights.lambda_a, weights.lambda_c)?;
    let fp = extractor.features(&mut tape, out.raw)?;
    let fg = extractor.features(&mut tape, gt)?;
    let perceptual = perceptual_from_features(&mut tape, &fp, &fg)?;
    let style = style_from_features(&mut tape, &fp, &fg)?;
    let parts = LossParts { recon, perceptual, style, adversarial };
    let total = total_loss(&mut tape, &parts, weights)?;
    let total_value = tape.value(total).item()? as f64;
    if !total_value.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total" });
    }
    tape.backward(total)?;
    let grads: Vec<_> = bound.vars().iter().map(|&v| tape.grad(v)).collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "generator_gradient" });
    }
    opt_g.step(generator.params_mut(), &grads)?;

    let scalar = |v| tape.value(v).item().map(|x: f32| x as f64);
    Ok(LossRow {
        step,
        stage,
        l_r: scalar(recon)?,
        l_p: scalar(perceptual)?,
        l_s: scalar(style)?,
        l_g: adversarial.map(scalar).transpose()?.unwrap_or(0.0),
        total: total_value,
    })
}

fn discriminator_step(
    discriminator: &mut Discriminator<f32>,
    opt: &mut Adam<f32>,
    real: &Tensor<f32>,
    fake: Tensor<f32>,
) -> Result<()> {
    let mut tape = Tape::new();
    let bound = discriminator.bind(&mut tape);
    let real = tape.constant(real.clone());
    let fake = tape.constant(fake);
    let dr = discriminator.forward(&mut tape, &bound, real)?;
    let df = discriminator.forward(&mut tape, &bound, fake)?;
    let (d_loss, _) = crate::losses::adversarial_losses(&mut tape, dr, df)?;
    if !tape.value(d_loss).is_finite() {
        return Err(Error::NonFiniteLoss { term: "L_D" });
    }
    tape.backward(d_loss)?;
    let grads: Vec<_> = bound.vars().iter().map(|&v| tape.grad(v)).collect();
    opt.step(discriminator.params_mut(), &grads)
}

/// Writes `rows` as CSV to `path`.
pub fn write_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    fs::write(path, log_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Motion;
    use crate::model::{DiscriminatorConfig, GeneratorConfig};
    use crate::synth::{gen_clip, gen_mask, MaskKind, MaskSpec, Texture};

    fn bundle(t: usize, hw: usize, seed: u64) -> ClipBundle {
        let clip = gen_clip(&Motion::Constant { dx: 1.0, dy: 0.5 }, Texture::Checker, t, hw, hw, seed).unwrap();
        let spec = MaskSpec::new(MaskKind::ObjectLike, 2);
        let masks = gen_mask(&spec, t, hw, hw, seed + 1).unwrap();
        ClipBundle { clip, masks, mask_spec: spec, mask_seed: seed + 1 }
    }

    fn tiny() -> (Generator<f32>, Discriminator<f32>) {
        let g = Generator::new(GeneratorConfig::with_base(4), 3).unwrap();
        let d = Discriminator::new(DiscriminatorConfig { base_channels: 4, ..Default::default() }, 4).unwrap();
        (g, d)
    }

    fn schedule(s1: usize, s2: usize) -> Schedule {
        let mut s = Schedule::default();
        s.stage1.steps = s1;
        s.stage2.steps = s2;
        s.adam.lr = 1e-3;
        s
    }

    #[test]
    fn zero_steps_leave_weights_untouched() {
        let (mut g, mut d) = tiny();
        let init = g.params().clone();
        let r = train(&mut g, &mut d, &[bundle(3, 16, 1)], &schedule(0, 0), &TrainOptions::default()).unwrap();
        assert!(r.log.is_empty());
        assert_eq!(&init, g.params());
    }

    #[test]
    fn same_seed_same_curve_and_stage_one_total() {
        let clips = [bundle(3, 16, 1), bundle(3, 16, 9)];
        let run = || {
            let (mut g, mut d) = tiny();
            train(&mut g, &mut d, &clips, &schedule(2, 2), &TrainOptions::default()).unwrap().log
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![1, 1, 2, 2]);
        let w = LossWeights::stage1();
        for r in &a[..2] {
            assert_eq!(r.l_g, 0.0);
            let want = r.l_r + w.lambda_p * r.l_p + w.lambda_s * r.l_s;
            assert!((r.total - want).abs() <= 1e-5 * want.abs());
        }
    }

    #[test]
    fn discriminator_moves_only_in_stage_two() {
        let clips = [bundle(3, 16, 2)];
        let (mut g, mut d) = tiny();
        let d0 = d.params().clone();
        train(&mut g, &mut d, &clips, &schedule(2, 0), &TrainOptions::default()).unwrap();
        assert_eq!(&d0, d.params());
        train(&mut g, &mut d, &clips, &schedule(0, 1), &TrainOptions::default()).unwrap();
        assert_ne!(&d0, d.params());
    }

    #[test]
    fn nan_weights_abort_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (mut g, mut d) = tiny();
        for p in g.params_mut().iter_mut() {
            if p.name == "head.w" {
                p.tensor.data_mut()[0] = f32::NAN;
            }
        }
        let before = g.params().clone();
        let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        let err = train(&mut g, &mut d, &[bundle(3, 16, 1)], &schedule(3, 0), &opts).unwrap_err();
        match err {
            Error::Diverged { step, checkpoint, .. } => {
                assert_eq!(step, 1);
                assert_eq!(checkpoint.as_deref(), Some(dir.path()));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(g.params().iter().zip(before.iter()).all(|(a, b)| a.tensor.shape() == b.tensor.shape()));
        let back = Generator::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.params().len(), before.len());
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let row = LossRow { step: 1, stage: 1, l_r: 0.5, l_p: 1.0, l_s: 2.0, l_g: 0.0, total: 5.5 };
        let s = log_csv(&[row]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines[1].split(',').count(), 7);
    }
}
