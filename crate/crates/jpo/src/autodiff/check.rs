//! Finite-difference gradient oracle.

use crate::autodiff::{DiffValue, Tape};
use crate::error::Result;

/// Build a scalar loss on a fresh tape from a flat input vector.
pub type ScalarFn<'a> = dyn Fn(&mut Tape, DiffValue) -> Result<DiffValue> + 'a;

/// Max over coordinates of `|AD - centralFD| / (|AD| + |centralFD| + 1e-8)`.
pub fn check_gradient(f: &ScalarFn, point: &[f64], step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(point.to_vec(), vec![point.len()])?;
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let ad = grads.wrt_or_zero(x, point.len());

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let fp = eval(f, &probe)?;
        probe[i] = point[i] - step;
        let fm = eval(f, &probe)?;
        probe[i] = point[i];
        let fd = (fp - fm) / (2.0 * step);
        // absolute comparison below roundoff scale, relative above
        let err = (ad[i] - fd).abs() / (ad[i].abs() + fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Check several random points, returning the worst error.
pub fn check_gradient_multi(f: &ScalarFn, points: &[Vec<f64>], step: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in points {
        worst = worst.max(check_gradient(f, p, step)?);
    }
    Ok(worst)
}

fn eval(f: &ScalarFn, point: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(point.to_vec(), vec![point.len()])?;
    let loss = f(&mut tape, x)?;
    Ok(tape.data(loss)[0])
}
