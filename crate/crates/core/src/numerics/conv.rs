//! Convolution kernels over plain tensors. The tape wires these into
//! forward/backward; the forward of `conv_transpose2d` is literally the
//! input-gradient of `conv2d`, and vice versa.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a strided convolution from a "large" image to a "small" grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid(format!("{op}: stride must be >= 1")));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::shape(
                op,
                format!(
                    "kernel {kh}x{kw} does not fit padded input {}x{}",
                    height + 2 * pad,
                    width + 2 * pad
                ),
            ));
        }
        Ok(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn grid_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies in `[0, len)`.
fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    lo.min(hi)..hi
}

/// Gathers patches of `img` (`[C, H, W]`) into `cols` (`[C*kh*kw, oh*ow]`).
pub(crate) fn im2col<S: Scalar>(img: &[S], g: &ConvGeom, cols: &mut [S]) {
    let grid = g.grid_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            let ys = valid_range(g.out_h, g.height, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let xs = valid_range(g.out_w, g.width, kx, g.stride, g.pad);
                let dst = &mut cols[row * grid..(row + 1) * grid];
                dst[..ys.start * g.out_w].fill(S::zero());
                dst[ys.end * g.out_w..].fill(S::zero());
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    line[..xs.start].fill(S::zero());
                    line[xs.end..].fill(S::zero());
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    if xs.is_empty() {
                        continue;
                    }
                    let x0 = xs.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[xs.clone()].copy_from_slice(&src[x0..x0 + xs.len()]);
                    } else {
                        for (v, s) in line[xs.clone()].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `img`.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, img: &mut [S]) {
    let grid = g.grid_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            let ys = valid_range(g.out_h, g.height, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let xs = valid_range(g.out_w, g.width, kx, g.stride, g.pad);
                let src = &cols[row * grid..(row + 1) * grid];
                row += 1;
                if xs.is_empty() {
                    continue;
                }
                let x0 = xs.start * g.stride + kx - g.pad;
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let line = &src[oy * g.out_w + xs.start..oy * g.out_w + xs.end];
                    for (d, s) in dst[x0..].iter_mut().step_by(g.stride).zip(line) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn dims4(op: &'static str, t: &[usize], what: &str) -> Result<[usize; 4]> {
    match *t {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("{what} must be rank 4, got {t:?}"))),
    }
}

fn check_bias<S: Scalar>(op: &'static str, bias: Option<&Tensor<S>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(op, format!("bias {:?} vs {channels} output channels", b.shape())));
        }
    }
    Ok(())
}

/// Validated conv2d problem: input `[N, C, H, W]`, weight `[K, C, kh, kw]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dShape {
    pub batch: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
}

impl Conv2dShape {
    pub fn infer(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = dims4(OP, input, "input")?;
        let [k, wc, kh, kw] = dims4(OP, weight, "weight")?;
        if wc != c {
            return Err(Error::shape(OP, format!("input channels (axis 1) {c} vs weight axis 1 {wc}")));
        }
        Ok(Conv2dShape { batch: n, out_channels: k, geom: ConvGeom::new(OP, c, h, w, kh, kw, stride, pad)? })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.geom.out_h, self.geom.out_w]
    }
}

pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let sh = Conv2dShape::infer(input.shape(), weight.shape(), stride, pad)?;
    check_bias("conv2d", bias, sh.out_channels)?;
    Ok(conv2d_forward(&sh, input.data(), weight.data(), bias.map(|b| b.data())))
}

pub(crate) fn conv2d_forward<S: Scalar>(sh: &Conv2dShape, x: &[S], w: &[S], b: Option<&[S]>) -> Tensor<S> {
    let g = &sh.geom;
    let (k, plen, grid) = (sh.out_channels, g.patch_len(), g.grid_len());
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![S::zero(); sh.batch * k * grid];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); plen * grid] };
    for n in 0..sh.batch {
        let img = &x[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * k * grid..(n + 1) * k * grid];
        if let Some(b) = b {
            for (ch, row) in dst.chunks_mut(grid).enumerate() {
                row.fill(b[ch]);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        if g.is_pointwise() {
            S::gemm(k, plen, grid, w, false, img, false, beta, dst);
        } else {
            im2col(img, g, &mut cols);
            S::gemm(k, plen, grid, w, false, &cols, false, beta, dst);
        }
    }
    Tensor::new(sh.output_shape(), out).expect("conv2d output shape")
}

/// Gradients of conv2d. Each returned buffer is `Some` only when requested.
pub(crate) fn conv2d_backward<S: Scalar>(
    sh: &Conv2dShape,
    x: &[S],
    w: &[S],
    grad_out: &[S],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let g = &sh.geom;
    let (k, plen, grid) = (sh.out_channels, g.patch_len(), g.grid_len());
    let in_len = g.channels * g.height * g.width;
    let mut dx = want_input.then(|| vec![S::zero(); sh.batch * in_len]);
    let mut dw = want_weight.then(|| vec![S::zero(); k * plen]);
    let mut db = want_bias.then(|| vec![S::zero(); k]);
    let mut cols = vec![S::zero(); if g.is_pointwise() { 0 } else { plen * grid }];
    for n in 0..sh.batch {
        let img = &x[n * in_len..(n + 1) * in_len];
        let go = &grad_out[n * k * grid..(n + 1) * k * grid];
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                S::gemm(k, grid, plen, go, false, img, true, S::one(), dw);
            } else {
                im2col(img, g, &mut cols);
                S::gemm(k, grid, plen, go, false, &cols, true, S::one(), dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                S::gemm(plen, k, grid, w, true, go, false, S::one(), dst);
            } else {
                S::gemm(plen, k, grid, w, true, go, false, S::zero(), &mut cols);
                col2im(&cols, g, dst);
            }
        }
        if let Some(db) = db.as_mut() {
            for (ch, row) in go.chunks(grid).enumerate() {
                let mut s = S::zero();
                for &v in row {
                    s += v;
                }
                db[ch] += s;
            }
        }
    }
    (dx, dw, db)
}

/// Validated transposed convolution: input `[N, Cin, H, W]`, weight `[Cin, Cout, kh, kw]`,
/// output `[N, Cout, (H-1)*stride - 2*pad + kh, ...]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvT2dShape {
    pub batch: usize,
    pub in_channels: usize,
    /// Geometry of the equivalent forward conv from the output back to the input grid.
    pub geom: ConvGeom,
}

impl ConvT2dShape {
    pub fn infer(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv_transpose2d";
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d: stride must be >= 1"));
        }
        let [n, cin, h, w] = dims4(OP, input, "input")?;
        let [wc, cout, kh, kw] = dims4(OP, weight, "weight")?;
        if wc != cin {
            return Err(Error::shape(OP, format!("input channels (axis 1) {cin} vs weight axis 0 {wc}")));
        }
        let oh = ((h.max(1) - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0);
        let ow = ((w.max(1) - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(OP, format!("padding {pad} leaves an empty output")));
        };
        let geom = ConvGeom::new(OP, cout, oh, ow, kh, kw, stride, pad)?;
        if geom.out_h != h || geom.out_w != w {
            return Err(Error::shape(OP, "adjoint geometry does not round-trip"));
        }
        Ok(ConvT2dShape { batch: n, in_channels: cin, geom })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.geom.channels, self.geom.height, self.geom.width]
    }
}

pub fn conv_transpose2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let sh = ConvT2dShape::infer(input.shape(), weight.shape(), stride, pad)?;
    check_bias("conv_transpose2d", bias, sh.geom.channels)?;
    Ok(conv_transpose2d_forward(&sh, input.data(), weight.data(), bias.map(|b| b.data())))
}

pub(crate) fn conv_transpose2d_forward<S: Scalar>(
    sh: &ConvT2dShape,
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
) -> Tensor<S> {
    let g = &sh.geom;
    let (cin, plen, grid) = (sh.in_channels, g.patch_len(), g.grid_len());
    let out_len = g.channels * g.height * g.width;
    let mut out = vec![S::zero(); sh.batch * out_len];
    let mut cols = vec![S::zero(); plen * grid];
    for n in 0..sh.batch {
        let src = &x[n * cin * grid..(n + 1) * cin * grid];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        S::gemm(plen, cin, grid, w, true, src, false, S::zero(), &mut cols);
        col2im(&cols, g, dst);
        if let Some(b) = b {
            let plane = g.height * g.width;
            for (ch, p) in dst.chunks_mut(plane).enumerate() {
                for v in p {
                    *v += b[ch];
                }
            }
        }
    }
    Tensor::new(sh.output_shape(), out).expect("conv_transpose2d output shape")
}

pub(crate) fn conv_transpose2d_backward<S: Scalar>(
    sh: &ConvT2dShape,
    x: &[S],
    w: &[S],
    grad_out: &[S],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let g = &sh.geom;
    let (cin, plen, grid) = (sh.in_channels, g.patch_len(), g.grid_len());
    let out_len = g.channels * g.height * g.width;
    let mut dx = want_input.then(|| vec![S::zero(); sh.batch * cin * grid]);
    let mut dw = want_weight.then(|| vec![S::zero(); cin * plen]);
    let mut db = want_bias.then(|| vec![S::zero(); g.channels]);
    let mut cols = vec![S::zero(); plen * grid];
    for n in 0..sh.batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if dx.is_some() || dw.is_some() {
            im2col(go, g, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            S::gemm(cin, plen, grid, w, false, &cols, false, S::zero(), &mut dx[n * cin * grid..(n + 1) * cin * grid]);
        }
        if let Some(dw) = dw.as_mut() {
            let src = &x[n * cin * grid..(n + 1) * cin * grid];
            S::gemm(cin, grid, plen, src, false, &cols, true, S::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            let plane = g.height * g.width;
            for (ch, p) in go.chunks(plane).enumerate() {
                let mut s = S::zero();
                for &v in p {
                    s += v;
                }
                db[ch] += s;
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let sh = Conv2dShape::infer(&[1, 2, 7, 6], &[3, 2, 3, 3], 2, 1).unwrap();
        assert_eq!(sh.output_shape(), vec![1, 3, 4, 3]);
        let t = ConvT2dShape::infer(&[1, 3, 4, 4], &[3, 2, 4, 4], 2, 1).unwrap();
        assert_eq!(t.output_shape(), vec![1, 2, 8, 8]);
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let e = Conv2dShape::infer(&[1, 2, 5, 5], &[3, 4, 3, 3], 1, 0).unwrap_err();
        assert!(e.to_string().contains("axis 1"), "{e}");
        assert!(Conv2dShape::infer(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(Conv2dShape::infer(&[1, 1, 2, 2], &[1, 1, 3, 3], 0, 1).is_err());
    }
}
