//! Frozen multi-scale feature extractor used by the perceptual and style
//! losses and by the video embedding.
//!
//! Four 3x3 stride-2 conv + ReLU stages. Each stage's filters are rows of a
//! Gaussian matrix orthonormalised by Gram-Schmidt, drawn from a seeded
//! ChaCha stream, so weights depend only on the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_SEED: u64 = 0x5eed_f00d;
pub const DEFAULT_WIDTHS: [usize; 4] = [8, 16, 32, 32];

/// Where a feature map is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// The input itself.
    Identity,
    /// Output of stage `i` (0-based).
    Stage(usize),
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor<S: Scalar> {
    seed: u64,
    stages: Vec<(Tensor<S>, Tensor<S>)>,
    taps: Vec<Tap>,
}

impl<S: Scalar> FeatureExtractor<S> {
    /// Default pyramid with a tap after every stage.
    pub fn new(seed: u64) -> Self {
        Self::with_widths(seed, &DEFAULT_WIDTHS, (0..DEFAULT_WIDTHS.len()).map(Tap::Stage).collect())
            .expect("default extractor is valid")
    }

    /// Taps only the input; losses then act on pixels directly.
    pub fn identity() -> Self {
        FeatureExtractor { seed: 0, stages: Vec::new(), taps: vec![Tap::Identity] }
    }

    pub fn with_widths(seed: u64, widths: &[usize], taps: Vec<Tap>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::invalid("extractor needs at least one tap"));
        }
        if let Some(Tap::Stage(i)) = taps.iter().find(|t| matches!(t, Tap::Stage(i) if *i >= widths.len())) {
            return Err(Error::invalid(format!("tap at stage {i} but only {} stages", widths.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(widths.len());
        let mut cin = 3;
        for &cout in widths {
            let fan_in = cin * 9;
            let rows = orthonormal_rows(cout, fan_in, &mut rng);
            let gain = 2f64.sqrt();
            let w = Tensor::from_fn([cout, cin, 3, 3], |i| S::lit(gain * rows[i]));
            stages.push((w, Tensor::zeros([cout])));
            cin = cout;
        }
        Ok(FeatureExtractor { seed, stages, taps })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    /// Channel count of each tap, in tap order.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|t| match t {
                Tap::Identity => 3,
                Tap::Stage(i) => self.stages[*i].0.shape()[0],
            })
            .collect()
    }

    /// Tap features of `x: [N, 3, H, W]`. Weights enter the tape as
    /// constants, so gradients reach `x` but never the extractor.
    pub fn features(&self, tape: &mut Tape<S>, x: Var) -> Result<Vec<Var>> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("feature_extractor", format!("expected [N, 3, H, W], got {s:?}")));
        }
        let deepest = self
            .taps
            .iter()
            .filter_map(|t| match t {
                Tap::Stage(i) => Some(i + 1),
                Tap::Identity => None,
            })
            .max()
            .unwrap_or(0);
        let mut maps = vec![x];
        let mut h = x;
        for (w, b) in &self.stages[..deepest] {
            let w = tape.constant(w.clone());
            let b = tape.constant(b.clone());
            h = tape.conv2d(h, w, Some(b), 2, 1)?;
            h = tape.relu(h)?;
            maps.push(h);
        }
        Ok(self
            .taps
            .iter()
            .map(|t| match t {
                Tap::Identity => maps[0],
                Tap::Stage(i) => maps[i + 1],
            })
            .collect())
    }

    /// Plain-tensor evaluation of [`FeatureExtractor::features`].
    pub fn features_of(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let f = self.features(&mut tape, v)?;
        Ok(f.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// `rows x cols` matrix with orthonormal rows (when `rows <= cols`; extra
/// rows are plain unit vectors), row-major.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    for r in 0..rows {
        let (done, rest) = m.split_at_mut(r * cols);
        let row = &mut rest[..cols];
        if r < cols {
            for prev in done.chunks(cols) {
                let d: f64 = prev.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                for (x, p) in row.iter_mut().zip(prev) {
                    *x -= d * p;
                }
            }
        }
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    m
}
