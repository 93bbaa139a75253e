//! Central finite-difference checks of reverse-mode gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::Result;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

/// Checks `d sum(f(x)) / dx` at `x` (must be 64-bit) against central
/// differences with step `h`.
pub fn check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert_eq!(x.dtype(), DType::F64, "gradient checks run in 64-bit");
    let var = Var::from_tensor(x)?;
    let out = f(var.as_tensor())?.sum_all()?;
    let grads = out.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };
    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let mut numeric = Vec::with_capacity(base.len());
    let eval = |values: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(values, x.shape(), x.device())?;
        Ok(f(&t)?.sum_all()?.to_scalar::<f64>()?)
    };
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = eval(&probe)?;
        probe[i] = base[i] - h;
        let down = eval(&probe)?;
        probe[i] = base[i];
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(compare(&analytic, &numeric))
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic).max(norm(numeric));
    GradCheck {
        rel_error: if denom == 0.0 { 0.0 } else { norm(&diff) / denom },
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        grad_norm: norm(analytic),
    }
}
