use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the worst relative error
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over every input element.
///
/// Runs in 64-bit only; finite differences are too noisy in 32-bit.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function output must be scalar, got {:?}", tape.value(out).shape()),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |args: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = args.iter().map(|a| t.constant(a.clone())).collect();
        let o = f(&mut t, &vs)?;
        t.value(o).item()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[i].data()[j];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
