use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type tag used by the TSR1 file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Floating point element type of a [`Tensor`](super::Tensor).
///
/// `f32` is used for training and inference, `f64` for gradient verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    /// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers, with
    /// `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[inline]
fn strides(cols: usize, trans: bool) -> (isize, isize) {
    // Strides of op(x) where x is stored row-major with `cols` columns before op.
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! check_gemm {
    ($m:expr, $k:expr, $n:expr, $a:expr, $b:expr, $c:expr) => {
        assert!($a.len() >= $m * $k, "gemm: lhs buffer too small");
        assert!($b.len() >= $k * $n, "gemm: rhs buffer too small");
        assert!($c.len() >= $m * $n, "gemm: output buffer too small");
    };
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm!(m, k, n, a, b, c);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(if a_trans { m } else { k }, a_trans);
        let (rsb, csb) = strides(if b_trans { k } else { n }, b_trans);
        // SAFETY: buffer extents are checked above and the strides describe
        // dense row-major storage of exactly those extents.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm!(m, k, n, a, b, c);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(if a_trans { m } else { k }, a_trans);
        let (rsb, csb) = strides(if b_trans { k } else { n }, b_trans);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if at { a[p * m + i] } else { a[i * k + p] };
                    let bv = if bt { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_transpose_flags_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for &at in &[false, true] {
            for &bt in &[false, true] {
                let mut c = vec![0.0; m * n];
                f64::gemm(m, k, n, &a, at, &b, bt, 0.0, &mut c);
                let want = naive(m, k, n, &a, at, &b, bt);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
