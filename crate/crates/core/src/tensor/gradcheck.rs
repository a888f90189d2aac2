use super::{Param, Tape, Tensor, TensorId};
use crate::error::{Error, Result};

fn eval_scalar(loss_of: &mut dyn FnMut(&mut Tape) -> Result<TensorId>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = loss_of(&mut tape)?;
    let v = tape.val(loss);
    if !v.is_scalar() {
        return Err(Error::contract(format!("expected scalar loss, got shape {:?}", v.shape)));
    }
    Ok(v.data[0] as f64)
}

/// Central-difference comparison at the given coordinates of `param`.
/// Returns max over coordinates of |analytic − fd| / max(|analytic|, |fd|, 1e-8).
pub fn grad_check_coords(
    mut loss_of: impl FnMut(&mut Tape) -> Result<TensorId>,
    param: &Param,
    coords: &[usize],
    eps: f32,
) -> Result<f32> {
    param.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = loss_of(&mut tape)?;
        tape.backward(loss)?;
    }
    let analytic = param
        .grad_clone()
        .ok_or_else(|| Error::contract("loss does not depend on the checked tensor"))?;

    let mut worst = 0.0f32;
    for &c in coords {
        let orig = param.value().data[c];
        let (hi, lo) = (orig + eps, orig - eps);
        param.value_mut().data[c] = hi;
        let lp = eval_scalar(&mut loss_of)?;
        param.value_mut().data[c] = lo;
        let lm = eval_scalar(&mut loss_of)?;
        param.value_mut().data[c] = orig;
        let fd = ((lp - lm) / (hi - lo) as f64) as f32;
        let a = analytic[c];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Central-difference comparison of the directional derivative along `dir`.
///
/// Per-coordinate checks are noise-limited in f32 wherever a coordinate's
/// derivative happens to be tiny (batch-norm centering produces such
/// coordinates routinely); the derivative along a random ±1 direction
/// concentrates at rms·√n scale, so it stays far above the rounding floor
/// and tolerates a small step.
pub fn grad_check_dir(
    mut loss_of: impl FnMut(&mut Tape) -> Result<TensorId>,
    param: &Param,
    dir: &[f32],
    eps: f32,
) -> Result<f32> {
    if dir.len() != param.numel() {
        return Err(Error::contract("direction length must match parameter size"));
    }
    param.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = loss_of(&mut tape)?;
        tape.backward(loss)?;
    }
    let grad = param
        .grad_clone()
        .ok_or_else(|| Error::contract("loss does not depend on the checked tensor"))?;
    let analytic: f64 = grad.iter().zip(dir).map(|(&g, &d)| g as f64 * d as f64).sum();

    let orig = param.value().data.clone();
    let shift = |p: &Param, sign: f32| {
        let mut v = p.value_mut();
        for ((x, &o), &d) in v.data.iter_mut().zip(&orig).zip(dir) {
            *x = o + sign * eps * d;
        }
    };
    shift(param, 1.0);
    let lp = eval_scalar(&mut loss_of)?;
    shift(param, -1.0);
    let lm = eval_scalar(&mut loss_of)?;
    param.value_mut().data.copy_from_slice(&orig);
    let fd = (lp - lm) / (2.0 * eps as f64);
    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
    Ok(rel as f32)
}

/// Directional central-difference check against a double-precision loss
/// oracle. The f32 parameter is nudged ±eps·dir in place (quantized to f32),
/// the oracle is evaluated at both points, and the measured per-coordinate
/// half-steps weight the analytic gradient so quantization cancels exactly.
/// The oracle's ~1e-16 rounding floor makes directions measurable that f32
/// finite differences cannot resolve.
pub fn grad_check_dir_f64(
    analytic_grad: &[f32],
    param: &Param,
    dir: &[f32],
    eps: f32,
    mut oracle: impl FnMut() -> Result<f64>,
) -> Result<f64> {
    if dir.len() != param.numel() || analytic_grad.len() != param.numel() {
        return Err(Error::contract("direction/gradient length must match parameter size"));
    }
    let orig = param.value().data.clone();
    let shift = |p: &Param, sign: f32| -> Vec<f32> {
        let mut v = p.value_mut();
        for ((x, &o), &d) in v.data.iter_mut().zip(&orig).zip(dir) {
            *x = o + sign * eps * d;
        }
        v.data.clone()
    };
    let hi = shift(param, 1.0);
    let lp = oracle();
    let lo = shift(param, -1.0);
    let lm = oracle();
    param.value_mut().data.copy_from_slice(&orig);
    let (lp, lm) = (lp?, lm?);
    let analytic: f64 = analytic_grad
        .iter()
        .zip(hi.iter().zip(&lo))
        .map(|(&g, (&h, &l))| g as f64 * (h as f64 - l as f64) * 0.5)
        .sum();
    let fd = (lp - lm) * 0.5;
    Ok((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12))
}

/// Check a scalar function of one tensor over every coordinate.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let param = Param::new(input.clone());
    let coords: Vec<usize> = (0..input.numel()).collect();
    let p = param.clone();
    grad_check_coords(
        move |tape| {
            let x = tape.leaf(&p);
            f(tape, x)
        },
        &param,
        &coords,
        eps,
    )
}
