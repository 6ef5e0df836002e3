//! Image and video quality metrics: PSNR, windowed SSIM and a Fréchet
//! distance over frozen-extractor embeddings.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::numerics::{Scalar, Tensor};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

fn check_same<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::shape(op, "empty input"));
    }
    Ok(())
}

pub fn mse<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    check_same("mse", pred, gt)?;
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(sum / pred.numel() as f64)
}

/// `20 log10(peak) - 10 log10(MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, peak: f64) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::invalid(format!("peak must be > 0, got {peak}")));
    }
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((20.0 * peak.log10() - 10.0 * m.log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the pixel values.
    pub range: f64,
}

impl Default for SsimConfig {
    /// Defaults for frames in `[-1, 1]`.
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 2.0 }
    }
}

impl SsimConfig {
    pub fn with_range(range: f64) -> Self {
        SsimConfig { range, ..Default::default() }
    }

    pub fn eps1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn eps2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let k: Vec<f64> = (0..self.window).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `[C, H, W]` (or `[H, W]`) images, averaged over channels.
pub fn ssim<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &SsimConfig) -> Result<f64> {
    check_same("ssim", pred, gt)?;
    let (c, h, w) = match *pred.shape() {
        [h, w] => (1, h, w),
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        ref s => return Err(Error::shape("ssim", format!("expected [1|3, H, W] or [H, W], got {s:?}"))),
    };
    if cfg.window == 0 || cfg.window % 2 == 0 || !(cfg.sigma > 0.0) || !(cfg.range > 0.0) {
        return Err(Error::invalid(format!("bad SSIM config {cfg:?}")));
    }
    if h < cfg.window || w < cfg.window {
        return Err(Error::shape("ssim", format!("image {h}x{w} smaller than the {0}x{0} window", cfg.window)));
    }
    let k = cfg.kernel();
    let (e1, e2) = (cfg.eps1(), cfg.eps2());
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let p: Vec<f64> = pred.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let q: Vec<f64> = gt.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let mul = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mp = filter_valid(&p, h, w, &k);
        let mq = filter_valid(&q, h, w, &k);
        let spp = filter_valid(&mul(&p, &p), h, w, &k);
        let sqq = filter_valid(&mul(&q, &q), h, w, &k);
        let spq = filter_valid(&mul(&p, &q), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mp.len() {
            let (a, b) = (mp[i], mq[i]);
            let vp = spp[i] - a * a;
            let vq = sqq[i] - b * b;
            let cov = spq[i] - a * b;
            acc += ((2.0 * a * b + e1) * (2.0 * cov + e2)) / ((a * a + b * b + e1) * (vp + vq + e2));
        }
        total += acc / mp.len() as f64;
    }
    Ok(total / c as f64)
}

/// Mean SSIM over the frames of `[T, C, H, W]` videos.
pub fn ssim_video<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, cfg: &SsimConfig) -> Result<f64> {
    check_same("ssim_video", pred, gt)?;
    if pred.rank() != 4 {
        return Err(Error::shape("ssim_video", format!("expected [T, C, H, W], got {:?}", pred.shape())));
    }
    let t = pred.shape()[0];
    let mut sum = 0.0;
    for i in 0..t {
        sum += ssim(&pred.index0(i)?, &gt.index0(i)?, cfg)?;
    }
    Ok(sum / t as f64)
}

/// Gaussian fit of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FidStats {
    pub mu: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl FidStats {
    /// Mean and unbiased covariance of `samples` (each of length `d`).
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 samples for covariance, got {n}")));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::shape("fid_stats", "samples must share a nonzero dimension"));
        }
        let mut mu = vec![0.0; d];
        for s in samples {
            for (m, v) in mu.iter_mut().zip(s) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);
        let mut sigma = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mu[i];
                for j in i..d {
                    sigma[i * d + j] += di * (s[j] - mu[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = sigma[i * d + j] / (n - 1) as f64;
                sigma[i * d + j] = v;
                sigma[j * d + i] = v;
            }
        }
        let stats = FidStats { mu, sigma, n };
        stats.validate()?;
        Ok(stats)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.sigma.len() != d * d {
            return Err(Error::shape("fid_stats", format!("sigma has {} entries for d = {d}", self.sigma.len())));
        }
        if self.n < 2 {
            return Err(Error::invalid("fid stats need n >= 2"));
        }
        if self.mu.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "fid_stats" });
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.sigma[i * d + j], self.sigma[j * d + i]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::invalid(format!("sigma is not symmetric at ({i}, {j})")));
                }
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &self.sigma));
        if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
            if min < -1e-8 {
                return Err(Error::invalid(format!("sigma is not positive semidefinite (eigenvalue {min})")));
            }
        }
        Ok(())
    }
}

/// Principal square root of a symmetric PSD matrix (row-major, `d x d`);
/// negative eigenvalues are clamped to zero.
pub fn sqrtm_psd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    if m.len() != d * d {
        return Err(Error::shape("sqrtm_psd", format!("{} entries for d = {d}", m.len())));
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let r = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((0..d * d).map(|i| r[(i / d, i % d)]).collect())
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn fid(a: &FidStats, b: &FidStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::shape("fid", format!("dimension {d} vs {}", b.dim())));
    }
    if a.mu == b.mu && a.sigma == b.sigma {
        return Ok(0.0);
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let ra = DMatrix::from_row_slice(d, d, &sqrtm_psd(&a.sigma, d)?);
    let sb = DMatrix::from_row_slice(d, d, &b.sigma);
    let m = &ra * sb * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let tr = |s: &[f64]| (0..d).map(|i| s[i * d + i]).sum::<f64>();
    Ok((mean_term + tr(&a.sigma) + tr(&b.sigma) - 2.0 * tr_sqrt).max(0.0))
}

/// How video features are pooled into embedding vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalPool {
    /// One vector per clip: mean over T, H, W.
    Clip,
    /// One vector per frame: mean over H, W.
    Frame,
}

/// Per-channel mean of every extractor tap, concatenated. Dimension is the
/// sum of the tap channel counts.
pub fn video_embed<S: Scalar>(video: &Tensor<S>, extractor: &FeatureExtractor<S>, pool: TemporalPool) -> Result<Vec<Vec<f64>>> {
    if video.rank() != 4 || video.shape()[1] != 3 {
        return Err(Error::shape("video_embed", format!("expected [T, 3, H, W], got {:?}", video.shape())));
    }
    let t = video.shape()[0];
    let rows = match pool {
        TemporalPool::Clip => 1,
        TemporalPool::Frame => t,
    };
    let mut out = vec![Vec::new(); rows];
    for f in extractor.features_of(video)? {
        let s = f.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        for (r, row) in out.iter_mut().enumerate() {
            let frames = match pool {
                TemporalPool::Clip => 0..t,
                TemporalPool::Frame => r..r + 1,
            };
            for ch in 0..c {
                let mut sum = 0.0;
                for ti in frames.clone() {
                    let base = (ti * c + ch) * plane;
                    sum += f.data()[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                row.push(sum / (frames.len() * plane) as f64);
            }
        }
    }
    Ok(out)
}

/// Fréchet distance between extractor embeddings of two clip sets. With a
/// single clip per set, frames are the samples.
pub fn vfid_lite<S: Scalar>(real: &[Tensor<S>], fake: &[Tensor<S>], extractor: &FeatureExtractor<S>) -> Result<f64> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::invalid(format!("need equally many clips, got {} and {}", real.len(), fake.len())));
    }
    let pool = if real.len() >= 2 { TemporalPool::Clip } else { TemporalPool::Frame };
    let embed = |clips: &[Tensor<S>]| -> Result<Vec<Vec<f64>>> {
        let mut v = Vec::new();
        for c in clips {
            v.extend(video_embed(c, extractor, pool)?);
        }
        Ok(v)
    };
    fid(&FidStats::from_samples(&embed(real)?)?, &FidStats::from_samples(&embed(fake)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: &[f64], diag: f64) -> FidStats {
        let d = mu.len();
        FidStats { mu: mu.to_vec(), sigma: (0..d * d).map(|i| if i / d == i % d { diag } else { 0.0 }).collect(), n: 10 }
    }

    #[test]
    fn psnr_hand_values() {
        let gt = Tensor::<f64>::zeros([100]);
        let pred = Tensor::<f64>::full([100], 0.1);
        assert!((psnr(&pred, &gt, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), PSNR_CAP);
        let p255 = Tensor::<f64>::full([4], 255.0);
        assert!(psnr(&p255, &Tensor::zeros([4]), 255.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn ssim_constants_closed_form() {
        let cfg = SsimConfig::with_range(1.0);
        let (a, b) = (0.3, 0.7);
        let got = ssim(&Tensor::<f64>::full([1, 12, 12], a), &Tensor::full([1, 12, 12], b), &cfg).unwrap();
        let e1 = cfg.eps1();
        let want = (2.0 * a * b + e1) / (a * a + b * b + e1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(ssim(&Tensor::<f64>::zeros([1, 10, 10]), &Tensor::zeros([1, 10, 10]), &cfg).is_err());
    }

    #[test]
    fn fid_closed_forms() {
        assert!((fid(&stats(&[1.0, 0.0], 1.0), &stats(&[0.0, 0.0], 1.0)).unwrap() - 1.0).abs() < 1e-6);
        assert!((fid(&stats(&[0.0, 0.0], 1.0), &stats(&[0.0, 0.0], 4.0)).unwrap() - 2.0).abs() < 1e-6);
        let s = stats(&[0.5, 0.5], 2.0);
        assert_eq!(fid(&s, &s).unwrap(), 0.0);
        assert!(fid(&s, &stats(&[0.0], 1.0)).is_err());
    }
}
