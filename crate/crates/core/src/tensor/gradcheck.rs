use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default denominator floor for [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Multiple of `f64::EPSILON * |f| / eps` used as the denominator floor by
/// [`grad_check_noise_aware`].
pub const ROUNDING_FLOOR_FACTOR: f64 = 1e5;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, RELATIVE_FLOOR)
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh tape from leaves holding `inputs` and
/// must return a scalar. Returns the largest [`relative_error`] over every
/// element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, inputs, eps, |_| RELATIVE_FLOOR)
}

/// Like [`grad_check`], with the denominator floored at
/// `ROUNDING_FLOOR_FACTOR * f64::EPSILON * |f| / eps`, the rounding level of
/// a central difference of `f`. For large composite losses.
pub fn grad_check_noise_aware<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, inputs, eps, |value| (ROUNDING_FLOOR_FACTOR * f64::EPSILON * value.abs() / eps).max(RELATIVE_FLOOR))
}

fn check<F>(f: F, inputs: &[Tensor], eps: f64, floor: impl Fn(f64) -> f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let first = tape.value(out).clone();
    tape.backward(out)?;

    let again = eval(inputs)?;
    if first.data()[0].to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let floor = floor(again);

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).ok_or(Error::DetachedGraph)?.to_vec();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error_with_floor(analytic[j], numeric, floor));
        }
    }
    Ok(worst)
}
