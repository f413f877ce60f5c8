//! Central-difference verification of tape gradients.

pub mod suite;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate at which `max_rel_error` occurs.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<T: Element, F>(f: &mut F, x: Tensor<T>) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: function returned shape {:?}, not a scalar",
            tape.shape(out)
        )));
    }
    Ok(tape.value(out).item().f64())
}

/// Max relative error between the tape gradient of `f` at `x` and the
/// central difference with step `h`, over every coordinate.
pub fn grad_check<T: Element, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    Ok(grad_check_coords(f, x, h, &coords)?.max_rel_error)
}

/// Like [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_coords<T: Element, F>(
    mut f: F,
    x: &Tensor<T>,
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let f0 = tape.value(out).item().f64();
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("grad_check: f(x) = {f0} is not finite")));
    }
    tape.backward(out)?;
    let full: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.iter().map(|v| v.f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: coords.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let base = x.data()[i].f64();
        let mut plus = x.clone();
        plus.data_mut()[i] = T::of(base + h);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::of(base - h);
        // Use the step actually representable in T.
        let step = plus.data()[i].f64() - minus.data()[i].f64();
        let fp = eval(&mut f, plus)?;
        let fm = eval(&mut f, minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: non-finite value at coordinate {i} (f(x+h) = {fp}, f(x-h) = {fm})"
            )));
        }
        let numeric = (fp - fm) / step;
        let rel = relative_error(full[i], numeric);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = i;
        }
        report.analytic.push(full[i]);
        report.numeric.push(numeric);
    }
    Ok(report)
}
