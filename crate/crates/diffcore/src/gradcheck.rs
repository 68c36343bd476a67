//! Central finite-difference gradient checking.

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::DTensor;

/// Denominator floor for relative errors of near-zero gradients.
pub const DEFAULT_FLOOR: f64 = 1e-7;

/// Central-difference formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    #[default]
    ThreePoint,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, error O(h^4).
    FivePoint,
}

impl Stencil {
    /// Offsets in units of the step and their weights, before dividing by h.
    pub fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::ThreePoint => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FivePoint => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    pub stencil: Stencil,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
}

impl FdOptions {
    pub fn new(step: f64, tol: f64) -> Self {
        Self {
            step,
            stencil: Stencil::ThreePoint,
            tol,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn with_stencil(self, stencil: Stencil) -> Self {
        Self { stencil, ..self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate, evaluating `f`
/// on fresh gradient-free tapes.
pub fn numeric_gradient<T, F>(f: &F, x: &DTensor<T>, step: f64) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    numeric_gradient_with(f, x, step, Stencil::ThreePoint)
}

pub fn numeric_gradient_with<T, F>(f: &F, x: &DTensor<T>, step: f64, stencil: Stencil) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |probe: &DTensor<T>, index: usize, offset: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe.detached());
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item()?.as_f64();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                index,
                context: format!("f(x {offset:+} h) = {value}"),
            });
        }
        Ok(value)
    };
    let mut probe = x.detached();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut acc = 0.0;
        for &(offset, weight) in stencil.taps() {
            probe.data_mut()[i] = T::lit(orig.as_f64() + offset * step);
            acc += weight * eval(&probe, i, offset)?;
        }
        probe.data_mut()[i] = orig;
        out.push(acc / step);
    }
    Ok(out)
}

/// Tape gradient of scalar `f` at `x`.
pub fn analytic_gradient<T, F>(f: &F, x: &DTensor<T>) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.detached());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let grad: Vec<f64> = tape.grad(v).expect("backward populates leaf grads").iter().map(|g| g.as_f64()).collect();
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(DiffError::NonFinite {
            index,
            context: format!("analytic gradient {}", grad[index]),
        });
    }
    Ok(grad)
}

/// Compares the tape gradient of `f` with central differences at `x`.
pub fn fd_check<T, F>(f: F, x: &DTensor<T>, h: f64, tol: f64) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    fd_check_with(f, x, FdOptions::new(h, tol))
}

pub fn fd_check_with<T, F>(f: F, x: &DTensor<T>, opts: FdOptions) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient_with(&f, x, opts.step, opts.stencil)?;
    Ok(compare(analytic, numeric, opts))
}

/// Builds a report from two precomputed gradients.
pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>, opts: FdOptions) -> FdReport {
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, opts.floor))
        .collect();
    let (worst_index, max_rel_err) = rel_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    FdReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_err,
        worst_index,
        tol: opts.tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = DTensor::from_vec(vec![0.5, -1.25, 2.0, 3.5]);
        let report = fd_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.analytic, vec![1.0, -2.5, 4.0, 7.0]);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        // Only the second coordinate's forward probe overflows.
        let x = DTensor::from_vec(vec![1.0, f64::MAX.ln() - 5e-6]);
        let err = numeric_gradient(
            &|tape: &mut Tape<f64>, x| {
                let e = tape.exp(x);
                Ok(tape.sum(e))
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { index: 1, .. }), "{err:?}");
    }
}
