//! Central finite-difference gradient checking.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    #[default]
    TwoPoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴).
    ///
    /// Allows a larger step, which keeps roundoff in the loss from
    /// swamping coordinates whose true derivative is close to zero.
    FourPoint,
}

impl Stencil {
    fn derivative(self, mut eval: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
        match self {
            Stencil::TwoPoint => Ok((eval(h)? - eval(-h)?) / (2.0 * h)),
            Stencil::FourPoint => {
                let (p2, p1, m1, m2) = (eval(2.0 * h)?, eval(h)?, eval(-h)?, eval(-2.0 * h)?);
                Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
            }
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given `step`, coordinate by coordinate.
///
/// `f` records its computation on the supplied tape, reading its input
/// from the given [`Var`], and returns the scalar output. Returns the
/// largest relative error over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, x, step, Stencil::TwoPoint)
}

pub fn grad_check_with<F>(f: F, x: &Tensor, step: f64, stencil: Stencil) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.get_or_zeros(xv, x);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let numeric = stencil.derivative(
            |delta| {
                probe.data_mut()[i] = orig + delta;
                let mut tape = Tape::new();
                let v = tape.constant(probe.clone());
                let out = f(&mut tape, v)?;
                Ok(tape.value(out).item())
            },
            step,
        )?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of [`grad_check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub coordinates: usize,
    pub tensors: Vec<TensorCheck>,
}

/// Per-tensor part of a [`ParamCheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_error: f64,
    /// Largest `|analytic − numeric|`.
    pub max_abs_diff: f64,
    /// Largest magnitude of either derivative.
    pub max_magnitude: f64,
}

/// Gradient check over every coordinate of every tensor in `store`.
///
/// `f` builds a scalar from the parameters bound on the tape.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64, stencil: Stencil) -> Result<ParamCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let out = f(&mut tape, &bound)?;
    let grads = tape.backward(out)?;

    let mut report = ParamCheck {
        max_error: 0.0,
        worst: (String::new(), 0),
        coordinates: 0,
        tensors: Vec::with_capacity(store.len()),
    };
    let mut probe = store.clone();
    for t in 0..store.len() {
        let analytic = grads.get_or_zeros(bound.var(t), store.tensor(t));
        let mut tc = TensorCheck {
            name: String::from(store.name(t)),
            max_error: 0.0,
            max_abs_diff: 0.0,
            max_magnitude: 0.0,
        };
        for i in 0..store.tensor(t).numel() {
            let orig = store.tensor(t).data()[i];
            let numeric = stencil.derivative(
                |delta| {
                    probe.tensor_mut(t).data_mut()[i] = orig + delta;
                    let mut tape = Tape::new();
                    let bound = probe.bind(&mut tape, false);
                    let out = f(&mut tape, &bound)?;
                    Ok(tape.value(out).item())
                },
                step,
            )?;
            probe.tensor_mut(t).data_mut()[i] = orig;
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            tc.max_error = tc.max_error.max(err);
            tc.max_abs_diff = tc.max_abs_diff.max((a - numeric).abs());
            tc.max_magnitude = tc.max_magnitude.max(a.abs()).max(numeric.abs());
            if err > report.max_error || report.coordinates == 0 {
                report.max_error = err;
                report.worst = (String::from(store.name(t)), i);
            }
            report.coordinates += 1;
        }
        report.tensors.push(tc);
    }
    Ok(report)
}
