//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::math::tape::{Tape, Var};
use crate::math::tensor::Tensor2;
use crate::par::{self, ExecMode};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst entry
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor2>,
    pub numeric: Vec<Tensor2>,
}

fn evaluate<F>(f: &F, params: &[Tensor2]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` at `params` against central differences
/// with step `eps`. `f` receives one parameter leaf per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor2], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    grad_check_with(f, params, eps, ExecMode::default())
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor2],
    eps: f64,
    mode: ExecMode,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.shape() != (1, 1) || !value.data()[0].is_finite() {
        return Err(Error::NonFinite(format!(
            "grad_check function value {:?}",
            value.data()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor2> = vars.iter().map(|&v| grads.get(v).clone()).collect();

    // flat (param, entry) coordinates; each perturbation is an independent tape
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |e| (p, e)))
        .collect();
    let diffs = par::try_map(mode, &coords, |&(p, e)| {
        let mut shifted = params.to_vec();
        let base = shifted[p].data()[e];
        shifted[p].data_mut()[e] = base + eps;
        let plus = evaluate(&f, &shifted)?;
        shifted[p].data_mut()[e] = base - eps;
        let minus = evaluate(&f, &shifted)?;
        Ok((plus - minus) / (2.0 * eps))
    })?;

    let mut numeric: Vec<Tensor2> = params
        .iter()
        .map(|t| Tensor2::zeros(t.rows(), t.cols()))
        .collect();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (&(p, e), d) in coords.iter().zip(diffs) {
        numeric[p].data_mut()[e] = d;
        let a = analytic[p].data()[e];
        let rel = (a - d).abs() / a.abs().max(d.abs()).max(1e-8);
        if rel > max_rel_error || worst.is_none() {
            max_rel_error = f64::max(max_rel_error, rel);
            worst = Some((p, e));
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|t, v| t.mul(v[0], v[0]), &[Tensor2::scalar(3.0)], 1e-5).unwrap();
        assert_eq!(r.analytic[0].data(), &[6.0]);
        assert!((r.numeric[0].data()[0] - 6.0).abs() < 1e-8);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor2::scalar(4.2))),
            &[Tensor2::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.analytic[0].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let p = [Tensor2::scalar(1.0)];
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &p, 1e-2).is_err());
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor2::raw(1, 1, vec![f64::INFINITY]))),
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from the tape but not from the differences
        let r = grad_check(
            |t, v| {
                let d = t.detach(v[0]);
                t.mul(v[0], d).map(|m| t.sum(m))
            },
            &[Tensor2::scalar(2.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
