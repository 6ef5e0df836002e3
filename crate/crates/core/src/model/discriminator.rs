//! Temporal patch discriminator: a stack of 3x5x5 spatio-temporal convs.
//!
//! A 3-D conv with temporal extent 3 and temporal padding 1 is computed as a
//! 2-D conv over the channel concat of frames `t-1`, `t`, `t+1` (zero beyond
//! the clip ends). Weight `[out, 3 * in, 5, 5]` holds the three temporal taps
//! as consecutive input-channel blocks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::params::{Bound, Init, ParamId, ParamRole, ParamStore};
use crate::numerics::{LinearMap, Scalar, Tape, Tensor, Var};

pub const TEMPORAL_KERNEL: usize = 3;
pub const SPATIAL_KERNEL: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { layers: 4, base_channels: 16, leaky_slope: 0.2 }
    }
}

impl DiscriminatorConfig {
    /// Output channels per layer; the last layer emits one score channel.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|i| if i + 1 == self.layers { 1 } else { self.base_channels << i.min(2) })
            .collect()
    }
}

/// `out[t] = x[t + offset]`, zero outside the clip.
#[derive(Debug, Clone, Copy)]
pub struct FrameShift {
    pub offset: isize,
}

impl FrameShift {
    fn run<S: Scalar>(&self, x: &Tensor<S>, offset: isize) -> Result<Tensor<S>> {
        if x.rank() < 1 {
            return Err(Error::shape("frame_shift", "rank-0 input"));
        }
        let t = x.shape()[0] as isize;
        let frame = if t == 0 { 0 } else { x.numel() / t as usize };
        let mut out = vec![S::zero(); x.numel()];
        for dst in 0..t {
            let src = dst + offset;
            if (0..t).contains(&src) {
                out[dst as usize * frame..(dst as usize + 1) * frame]
                    .copy_from_slice(&x.data()[src as usize * frame..(src as usize + 1) * frame]);
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

impl<S: Scalar> LinearMap<S> for FrameShift {
    fn name(&self) -> &'static str {
        "frame_shift"
    }

    fn apply(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        self.run(input, self.offset)
    }

    fn adjoint(&self, grad_out: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>> {
        if grad_out.shape() != input_shape {
            return Err(Error::shape("frame_shift", format!("{:?} vs {:?}", grad_out.shape(), input_shape)));
        }
        self.run(grad_out, -self.offset)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Discriminator<S: Scalar> {
    config: DiscriminatorConfig,
    params: ParamStore<S>,
    layers: Vec<Layer>,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.base_channels == 0 {
            return Err(Error::invalid("discriminator needs at least one layer and one channel"));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        let k = SPATIAL_KERNEL;
        for (i, cout) in config.widths().into_iter().enumerate() {
            let fan_in = TEMPORAL_KERNEL * cin * k * k;
            let w = init.conv([cout, TEMPORAL_KERNEL * cin, k, k], fan_in, 1.0);
            layers.push(Layer {
                w: params.add(format!("disc{i}.w"), ParamRole::Weight, w)?,
                b: params.add(format!("disc{i}.b"), ParamRole::Bias, Tensor::zeros([cout]))?,
            });
            cin = cout;
        }
        Ok(Discriminator { config, params, layers })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        self.params.bind(tape)
    }

    /// Binds the weights as constants, for generator steps.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Bound {
        Bound::from_vars(self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect())
    }

    /// `video: [T, 3, H, W]` to a patch score map `[T, 1, H', W']`.
    pub fn forward(&self, tape: &mut Tape<S>, bound: &Bound, video: Var) -> Result<Var> {
        let s = tape.value(video).shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("discriminator_forward", format!("expected [T, 3, H, W], got {s:?}")));
        }
        if s[0] < TEMPORAL_KERNEL {
            return Err(Error::invalid(format!(
                "video too short: {} frames, discriminator needs at least {TEMPORAL_KERNEL}",
                s[0]
            )));
        }
        let mut x = video;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer_forward(tape, x, bound.var(layer.w), bound.var(layer.b))?;
            if i != last {
                x = tape.leaky_relu(x, self.config.leaky_slope)?;
            }
        }
        Ok(x)
    }
}

/// One 3x5x5 spatio-temporal conv with stride (1, 2, 2) and padding (1, 2, 2).
pub fn layer_forward<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let prev = tape.linear(x, Arc::new(FrameShift { offset: -1 }))?;
    let next = tape.linear(x, Arc::new(FrameShift { offset: 1 }))?;
    let taps = tape.concat(&[prev, x, next], 1)?;
    tape.conv2d(taps, w, Some(b), 2, SPATIAL_KERNEL / 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_walk_8_frames_64() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig { base_channels: 4, ..Default::default() }, 3).unwrap();
        let mut tape = Tape::new();
        let b = d.bind_frozen(&mut tape);
        let v = tape.constant(Tensor::zeros([8, 3, 64, 64]));
        let out = d.forward(&mut tape, &b, v).unwrap();
        assert_eq!(tape.value(out).shape(), &[8, 1, 4, 4]);
    }

    #[test]
    fn short_video_rejected() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig::default(), 3).unwrap();
        let mut tape = Tape::new();
        let b = d.bind_frozen(&mut tape);
        let v = tape.constant(Tensor::zeros([2, 3, 16, 16]));
        assert!(d.forward(&mut tape, &b, v).is_err());
    }

    #[test]
    fn default_widths() {
        assert_eq!(DiscriminatorConfig::default().widths(), vec![16, 32, 64, 1]);
    }
}
