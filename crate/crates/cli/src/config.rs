//! `key=value` run configuration.

use std::fmt;
use std::path::Path;

use tsam_core::flow::ValidityConfig;
use tsam_core::losses::LossWeights;
use tsam_core::model::{AlignmentMode, GeneratorConfig};
use tsam_core::synth::{parse_key_values, MaskKind, MaskSpec, MotionKind, Texture};
use tsam_core::trainer::{AblationArm, AblationConfig, AdamConfig, Schedule, Stage};
use tsam_core::tsam::ShiftSpec;

#[derive(Debug)]
pub enum ConfigError {
    UnknownKey(String),
    BadValue { key: String, value: String, reason: String },
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey(k) => write!(f, "unknown config key '{k}'"),
            ConfigError::BadValue { key, value, reason } => write!(f, "bad value '{value}' for '{key}': {reason}"),
            ConfigError::Io(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Texture choice for generated clips; `Random` draws one per clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureChoice {
    Random,
    Fixed(Texture),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionChoice {
    Random,
    Fixed(MotionKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub clips: usize,
    pub motion: MotionChoice,
    pub motion_magnitude: f64,
    pub texture: TextureChoice,
    pub mask_kind: MaskKind,
    pub mask_band: u8,
    pub mask_step_sigma: f64,
    pub mask_animate_prob: f64,
    pub export_images: bool,
    pub delta: f64,
    pub shift: ShiftSpec,
    pub alignment: AlignmentMode,
    pub base_channels: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr: f64,
    pub lambda_a: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_g: f64,
    pub ablation_seeds: Vec<u64>,
    pub ablation_arms: Vec<AblationArm>,
    pub ablation_frames: usize,
    pub ablation_size: usize,
    pub ablation_base: usize,
    pub ablation_steps: usize,
    pub ablation_lr: f64,
    pub ablation_train_clips: usize,
    pub ablation_eval_clips: usize,
    pub ablation_eval_band: u8,
    pub perturb_px: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = LossWeights::stage1();
        let s2 = LossWeights::stage2();
        let ab = AblationConfig::default();
        RunConfig {
            seed: 0,
            frames: 8,
            height: 64,
            width: 64,
            clips: 4,
            motion: MotionChoice::Random,
            motion_magnitude: 2.0,
            texture: TextureChoice::Random,
            mask_kind: MaskKind::ObjectLike,
            mask_band: 1,
            mask_step_sigma: 1.5,
            mask_animate_prob: 0.5,
            export_images: true,
            delta: ValidityConfig::default().delta,
            shift: ShiftSpec::default(),
            alignment: AlignmentMode::ShiftAlign,
            base_channels: GeneratorConfig::default().base_channels,
            stage1_steps: 200,
            stage2_steps: 100,
            lr: AdamConfig::default().lr,
            lambda_a: s1.lambda_a,
            lambda_p: s1.lambda_p,
            lambda_s: s1.lambda_s,
            lambda_c: s2.lambda_c,
            lambda_g: s2.lambda_g,
            ablation_seeds: vec![0, 1, 2, 3, 4],
            ablation_arms: AblationArm::ALL.to_vec(),
            ablation_frames: ab.frames,
            ablation_size: ab.height,
            ablation_base: ab.base_channels,
            ablation_steps: ab.steps,
            ablation_lr: ab.lr,
            ablation_train_clips: ab.train_clips,
            ablation_eval_clips: ab.eval_clips,
            ablation_eval_band: ab.eval_band,
            perturb_px: ab.perturb_px,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl fmt::Display) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.to_string() }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn finite(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = num(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value, "not finite"))
    }
}

fn list<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T, ConfigError>) -> Result<Vec<T>, ConfigError> {
    let items: Vec<T> = value.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).map(f).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(bad(key, value, "empty list"));
    }
    Ok(items)
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let pairs = parse_key_values(text).map_err(|e| ConfigError::Io(e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| bad("--set", o, "expected key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "seed" => self.seed = num(key, v)?,
            "frames" => self.frames = num(key, v)?,
            "height" => self.height = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "clips" => self.clips = num(key, v)?,
            "motion" => {
                self.motion = match v {
                    "random" => MotionChoice::Random,
                    _ => MotionChoice::Fixed(MotionKind::parse(v).map_err(|e| bad(key, v, e))?),
                }
            }
            "motion_magnitude" => self.motion_magnitude = finite(key, v)?,
            "texture" => {
                self.texture = match v {
                    "random" => TextureChoice::Random,
                    _ => TextureChoice::Fixed(Texture::parse(v).map_err(|e| bad(key, v, e))?),
                }
            }
            "mask_kind" => self.mask_kind = MaskKind::parse(v).map_err(|e| bad(key, v, e))?,
            "mask_band" => self.mask_band = num(key, v)?,
            "mask_step_sigma" => self.mask_step_sigma = finite(key, v)?,
            "mask_animate_prob" => self.mask_animate_prob = finite(key, v)?,
            "export_images" => self.export_images = num(key, v)?,
            "delta" => self.delta = finite(key, v)?,
            "shift" => self.shift = ShiftSpec::parse(v).map_err(|e| bad(key, v, e))?,
            "alignment" => self.alignment = AlignmentMode::parse(v).map_err(|e| bad(key, v, e))?,
            "base_channels" => self.base_channels = num(key, v)?,
            "stage1_steps" => self.stage1_steps = num(key, v)?,
            "stage2_steps" => self.stage2_steps = num(key, v)?,
            "lr" => self.lr = finite(key, v)?,
            "lambda_a" => self.lambda_a = finite(key, v)?,
            "lambda_p" => self.lambda_p = finite(key, v)?,
            "lambda_s" => self.lambda_s = finite(key, v)?,
            "lambda_c" => self.lambda_c = finite(key, v)?,
            "lambda_g" => self.lambda_g = finite(key, v)?,
            "ablation_seeds" => self.ablation_seeds = list(key, v, |s| num(key, s))?,
            "ablation_arms" => self.ablation_arms = list(key, v, |s| AblationArm::parse(s).map_err(|e| bad(key, s, e)))?,
            "ablation_frames" => self.ablation_frames = num(key, v)?,
            "ablation_size" => self.ablation_size = num(key, v)?,
            "ablation_base" => self.ablation_base = num(key, v)?,
            "ablation_steps" => self.ablation_steps = num(key, v)?,
            "ablation_lr" => self.ablation_lr = finite(key, v)?,
            "ablation_train_clips" => self.ablation_train_clips = num(key, v)?,
            "ablation_eval_clips" => self.ablation_eval_clips = num(key, v)?,
            "ablation_eval_band" => self.ablation_eval_band = num(key, v)?,
            "perturb_px" => self.perturb_px = finite(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, value: String, reason: &str| if ok { Ok(()) } else { Err(bad(key, &value, reason)) };
        check(self.frames > 0, "frames", self.frames.to_string(), "must be > 0")?;
        check(self.height > 0 && self.height % 8 == 0, "height", self.height.to_string(), "must be a positive multiple of 8")?;
        check(self.width > 0 && self.width % 8 == 0, "width", self.width.to_string(), "must be a positive multiple of 8")?;
        self.mask_spec().validate().map_err(|e| bad("mask_band", &self.mask_band.to_string(), e))?;
        self.validity().validate().map_err(|e| bad("delta", &self.delta.to_string(), e))?;
        self.generator_config().validate().map_err(|e| bad("base_channels", &self.base_channels.to_string(), e))?;
        self.schedule().validate().map_err(|e| bad("lr", &self.lr.to_string(), e))?;
        self.ablation_config().validate().map_err(|e| bad("ablation_size", &self.ablation_size.to_string(), e))?;
        Ok(())
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            kind: self.mask_kind,
            band: self.mask_band,
            step_sigma: self.mask_step_sigma,
            animate_prob: self.mask_animate_prob,
        }
    }

    pub fn validity(&self) -> ValidityConfig {
        ValidityConfig::binary(self.delta)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig { shift: self.shift, alignment: self.alignment, ..GeneratorConfig::with_base(self.base_channels) }
    }

    pub fn schedule(&self) -> Schedule {
        let stage1 = LossWeights {
            lambda_a: self.lambda_a,
            lambda_c: 0.0,
            lambda_p: self.lambda_p,
            lambda_s: self.lambda_s,
            lambda_g: 0.0,
        };
        let stage2 = LossWeights { lambda_c: self.lambda_c, lambda_g: self.lambda_g, ..stage1 };
        Schedule {
            stage1: Stage { weights: stage1, steps: self.stage1_steps },
            stage2: Stage { weights: stage2, steps: self.stage2_steps },
            adam: AdamConfig { lr: self.lr, ..Default::default() },
            seed: self.seed,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            frames: self.ablation_frames,
            height: self.ablation_size,
            width: self.ablation_size,
            base_channels: self.ablation_base,
            train_clips: self.ablation_train_clips,
            eval_clips: self.ablation_eval_clips,
            steps: self.ablation_steps,
            lr: self.ablation_lr,
            eval_band: self.ablation_eval_band,
            perturb_px: self.perturb_px,
            validity: self.validity(),
            ..Default::default()
        }
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let motion = match self.motion {
            MotionChoice::Random => "random".to_string(),
            MotionChoice::Fixed(m) => m.to_string(),
        };
        let texture = match self.texture {
            TextureChoice::Random => "random".to_string(),
            TextureChoice::Fixed(t) => t.to_string(),
        };
        let lines = [
            ("seed", self.seed.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("clips", self.clips.to_string()),
            ("motion", motion),
            ("motion_magnitude", self.motion_magnitude.to_string()),
            ("texture", texture),
            ("mask_kind", self.mask_kind.to_string()),
            ("mask_band", self.mask_band.to_string()),
            ("mask_step_sigma", self.mask_step_sigma.to_string()),
            ("mask_animate_prob", self.mask_animate_prob.to_string()),
            ("export_images", self.export_images.to_string()),
            ("delta", self.delta.to_string()),
            ("shift", self.shift.to_string()),
            ("alignment", self.alignment.name().to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("stage1_steps", self.stage1_steps.to_string()),
            ("stage2_steps", self.stage2_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("lambda_a", self.lambda_a.to_string()),
            ("lambda_p", self.lambda_p.to_string()),
            ("lambda_s", self.lambda_s.to_string()),
            ("lambda_c", self.lambda_c.to_string()),
            ("lambda_g", self.lambda_g.to_string()),
            ("ablation_seeds", join(&self.ablation_seeds)),
            ("ablation_arms", join(&self.ablation_arms)),
            ("ablation_frames", self.ablation_frames.to_string()),
            ("ablation_size", self.ablation_size.to_string()),
            ("ablation_base", self.ablation_base.to_string()),
            ("ablation_steps", self.ablation_steps.to_string()),
            ("ablation_lr", self.ablation_lr.to_string()),
            ("ablation_train_clips", self.ablation_train_clips.to_string()),
            ("ablation_eval_clips", self.ablation_eval_clips.to_string()),
            ("ablation_eval_band", self.ablation_eval_band.to_string()),
            ("perturb_px", self.perturb_px.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["motion=zoom".into(), "ablation_arms=tsm,tsam_exact".into(), "delta=0.5".into()]).unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("seed=1\nbogus_key=3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::from_text("height=60").is_err());
        assert!(RunConfig::from_text("mask_band=9").is_err());
        assert!(RunConfig::from_text("lr=nan").is_err());
        assert!(RunConfig::from_text("ablation_arms=tsm,warp").is_err());
    }
}
