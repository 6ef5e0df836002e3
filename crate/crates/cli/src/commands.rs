//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsam_core::flow::{cycle_validity, FlowField, ValidityConfig};
use tsam_core::losses::FeatureExtractor;
use tsam_core::metrics::{psnr, ssim_video, vfid_lite, SsimConfig};
use tsam_core::model::{Discriminator, DiscriminatorConfig, Generator};
use tsam_core::numerics::tsr1;
use tsam_core::synth::{encode_pgm, encode_ppm, gen_clip, gen_mask, read_bundle, write_bundle, ClipBundle, MaskKind, MotionKind, Texture};
use tsam_core::trainer::{self, ablation, run_ablation, PreparedClip, TrainOptions};
use tsam_core::{Error, Tensor};

use crate::config::{ConfigError, MotionChoice, RunConfig, TextureChoice};

pub const RUN_CONFIG_FILE: &str = "run_config.txt";

/// Peak-to-peak range of frames in `[-1, 1]`.
const PEAK: f64 = 2.0;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn write_config(cfg: &RunConfig, out: &Path) -> CliResult {
    fs::create_dir_all(out)?;
    fs::write(out.join(RUN_CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

/// A clip directory itself, or its clip subdirectories in name order.
fn clip_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join("manifest.txt").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("no clip directories under {}", root.display())));
    }
    Ok(dirs)
}

fn export_frames(dir: &Path, frames: &Tensor<f32>) -> CliResult {
    for i in 0..frames.shape()[0] {
        fs::write(dir.join(format!("frame_{i:03}.ppm")), encode_ppm(&frames.index0(i)?)?)?;
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult {
    write_config(cfg, out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let moving = [MotionKind::Translate, MotionKind::Rotate, MotionKind::Zoom];
    for i in 0..cfg.clips {
        let kind = match cfg.motion {
            MotionChoice::Random => moving[rng.random_range(0..moving.len())],
            MotionChoice::Fixed(k) => k,
        };
        let texture = match cfg.texture {
            TextureChoice::Random => Texture::ALL[rng.random_range(0..Texture::ALL.len())],
            TextureChoice::Fixed(t) => t,
        };
        let motion = kind.sample(cfg.motion_magnitude, cfg.height, cfg.width, &mut rng);
        let (clip_seed, mask_seed) = (rng.random(), rng.random());
        let clip = gen_clip(&motion, texture, cfg.frames, cfg.height, cfg.width, clip_seed)?;
        let spec = cfg.mask_spec();
        let masks = gen_mask(&spec, cfg.frames, cfg.height, cfg.width, mask_seed)?;
        let bundle = ClipBundle { clip, masks, mask_spec: spec, mask_seed };
        write_bundle(&out.join(format!("clip_{i:03}")), &bundle, cfg.export_images)?;
    }
    println!("wrote {} clips to {}", cfg.clips, out.display());
    Ok(())
}

fn load_flow(path: &Path) -> CliResult<FlowField> {
    let t: Tensor<f32> = tsr1::load_as(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let t = match t.shape() {
        [1, _, _, 2] => t.index0(0)?,
        _ => t,
    };
    Ok(FlowField::new(t)?)
}

pub fn flow_validity(fwd: &Path, bwd: &Path, delta: f64, out: &Path) -> CliResult {
    let (f, b) = (load_flow(fwd)?, load_flow(bwd)?);
    if (f.height(), f.width()) != (b.height(), b.width()) {
        return Err(CliError::Usage(format!(
            "flow resolutions differ: {}x{} vs {}x{}",
            f.height(),
            f.width(),
            b.height(),
            b.width()
        )));
    }
    let mask = cycle_validity(&f, &b, &ValidityConfig::binary(delta))?;
    fs::create_dir_all(out)?;
    tsr1::save(out.join("validity.tsr"), mask.tensor())?;
    fs::write(out.join("validity.pgm"), encode_pgm(mask.tensor())?)?;
    println!("valid fraction {:.6}", mask.valid_fraction());
    Ok(())
}

fn load_bundles(data: &Path) -> CliResult<Vec<ClipBundle>> {
    clip_dirs(data)?.iter().map(|d| read_bundle(d).map_err(CliError::from)).collect()
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult {
    let clips = load_bundles(data)?;
    write_config(cfg, out)?;
    let mut generator = Generator::<f32>::new(cfg.generator_config(), cfg.seed)?;
    let mut discriminator = Discriminator::<f32>::new(DiscriminatorConfig::default(), cfg.seed.wrapping_add(1))?;
    let options = TrainOptions { validity: cfg.validity(), checkpoint_dir: Some(out.join("checkpoint")), ..Default::default() };
    let report = trainer::train(&mut generator, &mut discriminator, &clips, &cfg.schedule(), &options)?;
    trainer::write_log(&out.join("loss_log.csv"), &report.log)?;
    if let (Some(a), Some(b)) = (report.first_total(), report.last_total()) {
        println!("{} steps, total loss {a:.6} -> {b:.6}", report.log.len());
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> CliResult {
    write_config(cfg, out)?;
    let rows = run_ablation(&cfg.ablation_arms, &cfg.ablation_seeds, &cfg.ablation_config())?;
    fs::write(out.join("ablation.csv"), ablation::table_csv(&rows))?;
    let mut summary = String::from("seed,arm,psnr,ssim,hole_l1\n");
    for s in ablation::summarize(&rows) {
        summary += &format!("{},{},{:.6},{:.6},{:.6}\n", s.seed, s.arm, s.psnr, s.ssim, s.hole_l1);
    }
    fs::write(out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn inpaint(cfg: &RunConfig, checkpoint: &Path, clip: &Path, mask: Option<&Path>, out: &Path) -> CliResult {
    let generator = Generator::<f32>::load(checkpoint)
        .map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let mut bundle = read_bundle(clip).map_err(|e| CliError::Usage(format!("clip {}: {e}", clip.display())))?;
    if let Some(m) = mask {
        bundle.masks = tsr1::load_as(m).map_err(|e| CliError::Usage(format!("mask {}: {e}", m.display())))?;
    }
    let prepared = PreparedClip::from_bundle(&generator, &bundle, &cfg.validity())?;
    let composite = generator.infer(&prepared.frames, &prepared.masks, prepared.pyramid.as_ref())?;
    if !composite.is_finite() {
        return Err(CliError::Numeric("inpainted frames contain non-finite values".into()));
    }
    write_config(cfg, out)?;
    tsr1::save(out.join("frames.tsr"), &composite)?;
    export_frames(out, &composite)?;
    println!("inpainted {} frames into {}", composite.shape()[0], out.display());
    Ok(())
}

pub fn eval(gt: &Path, pred: &Path, out: Option<&Path>) -> CliResult {
    let gt_dirs = clip_dirs(gt)?;
    let single = gt_dirs.len() == 1 && gt_dirs[0] == gt;
    let mut groups: Vec<(MaskKind, Vec<Tensor<f32>>, Vec<Tensor<f32>>)> = Vec::new();
    for dir in &gt_dirs {
        let bundle = read_bundle(dir)?;
        let pred_dir = if single { pred.to_path_buf() } else { pred.join(dir.file_name().expect("clip dir has a name")) };
        let p: Tensor<f32> = tsr1::load_as(pred_dir.join("frames.tsr"))
            .map_err(|e| CliError::Usage(format!("prediction {}: {e}", pred_dir.display())))?;
        if p.shape() != bundle.clip.frames.shape() {
            return Err(CliError::Usage(format!(
                "prediction {:?} does not match ground truth {:?}",
                p.shape(),
                bundle.clip.frames.shape()
            )));
        }
        if !p.is_finite() {
            return Err(CliError::Numeric(format!("prediction {} is not finite", pred_dir.display())));
        }
        let kind = bundle.mask_spec.kind;
        match groups.iter_mut().find(|g| g.0 == kind) {
            Some(g) => {
                g.1.push(bundle.clip.frames);
                g.2.push(p);
            }
            None => groups.push((kind, vec![bundle.clip.frames], vec![p])),
        }
    }
    groups.sort_by_key(|g| MaskKind::ALL.iter().position(|k| *k == g.0));
    let extractor = FeatureExtractor::<f32>::new(tsam_core::losses::extractor::DEFAULT_SEED);
    let ssim_cfg = SsimConfig::default();
    let mut report = String::from("mask_kind,clips,psnr,ssim,vfid_lite\n");
    for (kind, real, fake) in &groups {
        let n = real.len() as f64;
        let mut p = 0.0;
        let mut s = 0.0;
        for (r, f) in real.iter().zip(fake) {
            p += psnr(f, r, PEAK)?;
            s += ssim_video(f, r, &ssim_cfg)?;
        }
        let v = vfid_lite(real, fake, &extractor)?;
        report += &format!("{kind},{},{:.6},{:.6},{:.6}\n", real.len(), p / n, s / n, v);
    }
    print!("{report}");
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, &report)?;
    }
    Ok(())
}
