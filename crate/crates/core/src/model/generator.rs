//! Encoder-decoder inpainting generator with TSAM bottlenecks.
//!
//! Input per frame: masked RGB plus the mask (4 channels). The encoder is a
//! gated stem followed by four stages of bottleneck blocks; each block opens
//! with a 1x1 TSAM gated conv. The decoder reduces channels, then runs a TSAM
//! conv at 1/8 resolution and three gated deconv + skip concat + TSAM conv
//! stages, one more TSAM conv at full resolution and a 1x1 RGB head with tanh.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::params::{Bound, Init, ParamId, ParamRole, ParamStore};
use crate::model::pyramid::FlowPyramid;
use crate::numerics::{LinearMap, Scalar, Tape, Tensor, Var};
use crate::synth::io::parse_key_values;
use crate::tsam::{tsam_gated_conv, GatedConvVars, ShiftSpec, TemporalMix};

/// Takes `[known; raw]` stacked along frames (`[2T, 3, H, W]`) and copies
/// the known value where the mask is 1, the raw value elsewhere. Known pixels
/// pass through bit for bit, signed zeros included.
struct MaskSelect {
    valid: Vec<bool>,
    frames: usize,
    plane: usize,
}

impl MaskSelect {
    fn check(&self, shape: &[usize]) -> Result<usize> {
        let n = self.frames * 3 * self.plane;
        if shape.len() != 4 || shape[0] != 2 * self.frames || shape[1] != 3 || shape[2] * shape[3] != self.plane {
            return Err(Error::shape("mask_select", format!("expected [{}, 3, H, W], got {shape:?}", 2 * self.frames)));
        }
        Ok(n)
    }

    fn is_valid(&self, i: usize) -> bool {
        self.valid[(i / (3 * self.plane)) * self.plane + i % self.plane]
    }
}

impl<S: Scalar> LinearMap<S> for MaskSelect {
    fn name(&self) -> &'static str {
        "mask_select"
    }

    fn apply(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let n = self.check(input.shape())?;
        let x = input.data();
        let s = input.shape();
        Ok(Tensor::from_fn([self.frames, 3, s[2], s[3]], |i| if self.is_valid(i) { x[i] } else { x[n + i] }))
    }

    fn adjoint(&self, grad_out: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
        let n = self.check(input_shape)?;
        let g = grad_out.data();
        Ok(Tensor::from_fn(input_shape.to_vec(), |i| {
            let (j, known) = if i < n { (i, true) } else { (i - n, false) };
            if self.is_valid(j) == known {
                g[j]
            } else {
                S::zero()
            }
        }))
    }
}

/// Number of TSAM conv layers in the decoder.
pub const DECODER_TSAM_LAYERS: usize = 5;
/// Number of gated deconv stages in the decoder.
pub const DECODER_UPSAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignmentMode {
    /// Temporal shift only.
    Shift,
    /// Temporal shift with flow alignment.
    ShiftAlign,
}

impl AlignmentMode {
    pub fn name(&self) -> &'static str {
        match self {
            AlignmentMode::Shift => "shift",
            AlignmentMode::ShiftAlign => "shift_align",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "shift" => Ok(AlignmentMode::Shift),
            "shift_align" => Ok(AlignmentMode::ShiftAlign),
            _ => Err(Error::Format(format!("unknown alignment mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub stages: Vec<StageSpec>,
    pub shift: ShiftSpec,
    pub alignment: AlignmentMode,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::with_base(16)
    }
}

impl GeneratorConfig {
    /// Four stages of {1, 2, 2, 2} blocks with widths `b, 2b, 4b, 4b`.
    pub fn with_base(base: usize) -> Self {
        let stage = |blocks, channels, stride| StageSpec { blocks, channels, stride };
        GeneratorConfig {
            base_channels: base,
            stages: vec![stage(1, base, 1), stage(2, 2 * base, 2), stage(2, 4 * base, 2), stage(2, 4 * base, 2)],
            shift: ShiftSpec::default(),
            alignment: AlignmentMode::ShiftAlign,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let strides: Vec<usize> = self.stages.iter().map(|s| s.stride).collect();
        if strides != [1, 2, 2, 2] {
            return Err(Error::invalid(format!("encoder needs four stages with strides 1,2,2,2, got {strides:?}")));
        }
        if self.base_channels < 2 {
            return Err(Error::invalid("base_channels must be at least 2"));
        }
        for s in &self.stages {
            if s.blocks == 0 || s.channels < 4 {
                return Err(Error::invalid(format!("bad stage {s:?}: need >= 1 block and >= 4 channels")));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::invalid("leaky_slope must be >= 0"));
        }
        Ok(())
    }

    /// TSAM layers in the whole generator: one per encoder block plus the decoder's.
    pub fn n_tsam(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum::<usize>() + DECODER_TSAM_LAYERS
    }

    /// Decoder widths at 1/8, 1/4, 1/2 and full resolution.
    pub fn decoder_widths(&self) -> [usize; 4] {
        let c: Vec<usize> = self.stages.iter().map(|s| s.channels).collect();
        [c[3] / 2, c[2] / 2, c[1] / 2, c[0]]
    }

    /// Feature resolutions at which TSAM layers run, one entry per layer.
    pub fn tsam_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for s in &self.stages {
            for b in 0..s.blocks {
                out.push((ch, cw));
                if b == 0 && s.stride == 2 {
                    (ch, cw) = (ch / 2, cw / 2);
                }
            }
        }
        out.push((h / 8, w / 8));
        out.extend([(h / 4, w / 4), (h / 2, w / 2), (h, w), (h, w)]);
        out
    }

    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self.stages.iter().map(|s| format!("{}:{}:{}", s.blocks, s.channels, s.stride)).collect();
        format!(
            "base_channels={}\nstages={}\nshift_fraction={}\nalignment={}\nleaky_slope={}\n",
            self.base_channels,
            stages.join(","),
            self.shift,
            self.alignment.name(),
            self.leaky_slope
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv: BTreeMap<String, String> = parse_key_values(text)?.into_iter().collect();
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("generator config lacks '{k}'")));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::Format(format!("bad integer '{s}'")));
        let stages = get("stages")?
            .split(',')
            .map(|s| {
                let p: Vec<&str> = s.split(':').collect();
                match p[..] {
                    [b, c, st] => Ok(StageSpec { blocks: int(b)?, channels: int(c)?, stride: int(st)? }),
                    _ => Err(Error::Format(format!("bad stage '{s}'"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = GeneratorConfig {
            base_channels: int(get("base_channels")?)?,
            stages,
            shift: ShiftSpec::parse(get("shift_fraction")?)?,
            alignment: AlignmentMode::parse(get("alignment")?)?,
            leaky_slope: get("leaky_slope")?.parse().map_err(|_| Error::Format("bad leaky_slope".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct Gated {
    feature_w: ParamId,
    feature_b: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    stride: usize,
    pad: usize,
    temporal: bool,
    transpose: bool,
}

#[derive(Debug, Clone)]
struct Plain {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Block {
    entry: Gated,
    spatial: Plain,
    expand: Plain,
    shortcut: Option<Plain>,
}

struct Builder<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    init: Init,
}

impl<S: Scalar> Builder<'_, S> {
    fn plain(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Result<Plain> {
        let w = self.init.conv([cout, cin, k, k], cin * k * k, gain);
        Ok(Plain {
            w: self.store.add(format!("{name}.w"), ParamRole::Weight, w)?,
            b: self.store.add(format!("{name}.b"), ParamRole::Bias, Tensor::zeros([cout]))?,
            stride,
            pad: k / 2,
        })
    }

    fn gated(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, temporal: bool) -> Result<Gated> {
        let fw = self.init.conv([cout, cin, k, k], cin * k * k, 1.0);
        let gw = self.init.conv([cout, cin, k, k], cin * k * k, 1.0);
        Ok(Gated {
            feature_w: self.store.add(format!("{name}.fw"), ParamRole::Weight, fw)?,
            feature_b: self.store.add(format!("{name}.fb"), ParamRole::Bias, Tensor::zeros([cout]))?,
            gate_w: self.store.add(format!("{name}.gw"), ParamRole::Weight, gw)?,
            gate_b: self.store.add(format!("{name}.gb"), ParamRole::Bias, Tensor::zeros([cout]))?,
            stride,
            pad: k / 2,
            temporal,
            transpose: false,
        })
    }

    /// 4x4 stride-2 gated transposed conv, weights `[in, out, 4, 4]`.
    fn gated_up(&mut self, name: &str, cin: usize, cout: usize) -> Result<Gated> {
        let fan_in = cin * 4;
        let fw = self.init.conv([cin, cout, 4, 4], fan_in, 1.0);
        let gw = self.init.conv([cin, cout, 4, 4], fan_in, 1.0);
        Ok(Gated {
            feature_w: self.store.add(format!("{name}.fw"), ParamRole::Weight, fw)?,
            feature_b: self.store.add(format!("{name}.fb"), ParamRole::Bias, Tensor::zeros([cout]))?,
            gate_w: self.store.add(format!("{name}.gw"), ParamRole::Weight, gw)?,
            gate_b: self.store.add(format!("{name}.gb"), ParamRole::Bias, Tensor::zeros([cout]))?,
            stride: 2,
            pad: 1,
            temporal: false,
            transpose: true,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorOutput {
    /// Raw prediction `tanh(head)`, `[T, 3, H, W]`.
    pub raw: Var,
    /// Known pixels from the input, predicted pixels elsewhere.
    pub composite: Var,
}

#[derive(Debug, Clone)]
pub struct Generator<S: Scalar> {
    config: GeneratorConfig,
    params: ParamStore<S>,
    stem: Gated,
    blocks: Vec<Block>,
    reduce: Plain,
    bottom: Gated,
    ups: Vec<(Gated, Gated)>,
    top: Gated,
    head: Plain,
}

impl<S: Scalar> Generator<S> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, init: Init::new(seed) };
        let stem = b.gated("stem", 4, config.base_channels, 3, 1, false)?;
        let mut blocks = Vec::new();
        let mut cin = config.base_channels;
        for (si, s) in config.stages.iter().enumerate() {
            let mid = (s.channels / 2).max(2);
            for bi in 0..s.blocks {
                let name = format!("enc{si}.b{bi}");
                let stride = if bi == 0 { s.stride } else { 1 };
                let entry = b.gated(&format!("{name}.entry"), cin, mid, 1, 1, true)?;
                let spatial = b.plain(&format!("{name}.spatial"), mid, mid, 3, stride, 1.0)?;
                let expand = b.plain(&format!("{name}.expand"), mid, s.channels, 1, 1, 1.0)?;
                let shortcut = if cin != s.channels || stride != 1 {
                    Some(b.plain(&format!("{name}.short"), cin, s.channels, 1, stride, 1.0)?)
                } else {
                    None
                };
                blocks.push(Block { entry, spatial, expand, shortcut });
                cin = s.channels;
            }
        }
        let d = config.decoder_widths();
        let skips: Vec<usize> = config.stages.iter().map(|s| s.channels).collect();
        let reduce = b.plain("reduce", cin, d[0], 1, 1, 1.0)?;
        let bottom = b.gated("dec0.tsam", d[0], d[0], 3, 1, true)?;
        let mut ups = Vec::new();
        for i in 0..DECODER_UPSAMPLES {
            let up = b.gated_up(&format!("dec{}.up", i + 1), d[i], d[i + 1])?;
            let skip = skips[2 - i];
            let fuse = b.gated(&format!("dec{}.tsam", i + 1), d[i + 1] + skip, d[i + 1], 3, 1, true)?;
            ups.push((up, fuse));
        }
        let top = b.gated("dec4.tsam", d[3], d[3], 3, 1, true)?;
        let head = b.plain("head", d[3], 3, 1, 1, 0.5)?;
        Ok(Generator { config, params, stem, blocks, reduce, bottom, ups, top, head })
    }

    /// Rebuilds a generator from a checkpoint written by [`Generator::save`].
    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (params, echo) = ParamStore::<S>::load(dir)?;
        let mut g = Generator::new(GeneratorConfig::from_text(&echo)?, 0)?;
        if !g.params.same_layout(&params) {
            return Err(Error::Format(format!("checkpoint at {} does not match its config", dir.display())));
        }
        g.params = params;
        Ok(g)
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        self.params.save(dir, &self.config.to_text())
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Same architecture in another precision.
    pub fn cast<T: Scalar>(&self) -> Generator<T> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            reduce: self.reduce.clone(),
            bottom: self.bottom.clone(),
            ups: self.ups.clone(),
            top: self.top.clone(),
            head: self.head.clone(),
        }
    }

    /// Resolutions that need a pyramid level for an `h x w` input.
    pub fn pyramid_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.config.tsam_resolutions(h, w)
    }

    /// Records a forward pass. `frames: [T, 3, H, W]` in `[-1, 1]`,
    /// `masks: [T, 1, H, W]` with 1 = valid. A pyramid is required in
    /// shift-align mode.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        frames: &Tensor<S>,
        masks: &Tensor<S>,
        pyramid: Option<&FlowPyramid>,
    ) -> Result<GeneratorOutput> {
        let fs = frames.shape();
        if fs.len() != 4 || fs[1] != 3 || masks.shape() != [fs[0], 1, fs[2], fs[3]] {
            return Err(Error::shape(
                "generator_forward",
                format!("frames {:?} and masks {:?} must be [T, 3, H, W] and [T, 1, H, W]", fs, masks.shape()),
            ));
        }
        let (t, h, w) = (fs[0], fs[2], fs[3]);
        if t == 0 || h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(format!("resolution {h}x{w} must be nonzero and divisible by 8")));
        }
        if let Some(p) = pyramid {
            let a = p.level(h, w)?;
            if a.frames() != t {
                return Err(Error::invalid(format!("pyramid has {} frames, clip has {t}", a.frames())));
            }
        }
        let plane = h * w;
        let (f, m) = (frames.data(), masks.data());
        let input = Tensor::from_fn([t, 4, h, w], |i| {
            let (ti, c, p) = (i / (4 * plane), (i / plane) % 4, i % plane);
            let mv = m[ti * plane + p];
            if c == 3 {
                mv
            } else {
                f[(ti * 3 + c) * plane + p] * mv
            }
        });
        let select = Arc::new(MaskSelect { valid: m.iter().map(|&v| v == S::one()).collect(), frames: t, plane });

        let x = tape.constant(input);
        let mut x = self.gated(tape, bound, x, &self.stem, pyramid)?;
        let mut skips = Vec::new();
        let mut bi = 0;
        for s in &self.config.stages {
            for _ in 0..s.blocks {
                x = self.block(tape, bound, x, &self.blocks[bi], pyramid)?;
                bi += 1;
            }
            skips.push(x);
        }
        let x = self.plain(tape, bound, skips[3], &self.reduce)?;
        let x = tape.leaky_relu(x, self.config.leaky_slope)?;
        let mut x = self.gated(tape, bound, x, &self.bottom, pyramid)?;
        for (i, (up, fuse)) in self.ups.iter().enumerate() {
            let u = self.gated(tape, bound, x, up, pyramid)?;
            let cat = tape.concat(&[u, skips[2 - i]], 1)?;
            x = self.gated(tape, bound, cat, fuse, pyramid)?;
        }
        let x = self.gated(tape, bound, x, &self.top, pyramid)?;
        let x = self.plain(tape, bound, x, &self.head)?;
        let raw = tape.tanh(x)?;
        let known = tape.constant(frames.clone());
        let both = tape.concat(&[known, raw], 0)?;
        let composite = tape.linear(both, select)?;
        Ok(GeneratorOutput { raw, composite })
    }

    /// Composite output with frozen weights.
    pub fn infer(&self, frames: &Tensor<S>, masks: &Tensor<S>, pyramid: Option<&FlowPyramid>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, frames, masks, pyramid)?;
        Ok(tape.value(out.composite).clone())
    }

    /// Records the weights as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        self.params.bind(tape)
    }

    fn bind_frozen(&self, tape: &mut Tape<S>) -> Bound {
        let vars = self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        Bound::from_vars(vars)
    }

    fn mix(&self, tape: &Tape<S>, x: Var, pyramid: Option<&FlowPyramid>) -> Result<TemporalMix> {
        match self.config.alignment {
            AlignmentMode::Shift => Ok(TemporalMix::Shift(self.config.shift)),
            AlignmentMode::ShiftAlign => {
                let s = tape.value(x).shape();
                let p = pyramid.ok_or_else(|| Error::invalid("shift-align generator needs a flow pyramid"))?;
                Ok(TemporalMix::ShiftAlign(self.config.shift, p.level(s[2], s[3])?.clone()))
            }
        }
    }

    fn gated(&self, tape: &mut Tape<S>, bound: &Bound, x: Var, g: &Gated, pyramid: Option<&FlowPyramid>) -> Result<Var> {
        let vars = GatedConvVars {
            feature_weight: bound.var(g.feature_w),
            feature_bias: bound.var(g.feature_b),
            gate_weight: bound.var(g.gate_w),
            gate_bias: bound.var(g.gate_b),
        };
        let y = if g.transpose {
            let feature = tape.conv_transpose2d(x, vars.feature_weight, Some(vars.feature_bias), g.stride, g.pad)?;
            let gate = tape.conv_transpose2d(x, vars.gate_weight, Some(vars.gate_bias), g.stride, g.pad)?;
            let gate = tape.sigmoid(gate)?;
            tape.mul(feature, gate)?
        } else {
            let mix = if g.temporal { self.mix(tape, x, pyramid)? } else { TemporalMix::None };
            tsam_gated_conv(tape, x, &mix, &vars, g.stride, g.pad)?
        };
        // The gate is positive, so activating after gating equals gating the activation.
        tape.leaky_relu(y, self.config.leaky_slope)
    }

    fn plain(&self, tape: &mut Tape<S>, bound: &Bound, x: Var, p: &Plain) -> Result<Var> {
        tape.conv2d(x, bound.var(p.w), Some(bound.var(p.b)), p.stride, p.pad)
    }

    fn block(&self, tape: &mut Tape<S>, bound: &Bound, x: Var, b: &Block, pyramid: Option<&FlowPyramid>) -> Result<Var> {
        let a = self.config.leaky_slope;
        let y = self.gated(tape, bound, x, &b.entry, pyramid)?;
        let y = self.plain(tape, bound, y, &b.spatial)?;
        let y = tape.leaky_relu(y, a)?;
        let y = self.plain(tape, bound, y, &b.expand)?;
        let s = match &b.shortcut {
            Some(p) => self.plain(tape, bound, x, p)?,
            None => x,
        };
        let y = tape.add(y, s)?;
        tape.leaky_relu(y, a)
    }
}
