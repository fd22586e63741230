//! Real FFT on power-of-two lengths with a packed spectrum layout.
//!
//! A real signal of length `n` maps to a packed real vector of length `n`:
//! `[re_0, re_1, ..., re_{n/2}, im_1, ..., im_{n/2-1}]`.
//! The packed layout keeps spectra inside the real-array tape.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

pub fn is_power_of_two(n: usize) -> bool {
    n >= 2 && n & (n - 1) == 0
}

/// Forward real DFT: `out[k] = sum_t x[t] e^{-2pi i k t / n}` in packed form.
pub fn rfft_packed(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert!(is_power_of_two(n) && out.len() == n);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan(n, false).process(&mut buf);
    let half = n / 2;
    for k in 0..=half {
        out[k] = buf[k].re;
    }
    for k in 1..half {
        out[half + k] = buf[k].im;
    }
}

/// Inverse of [`rfft_packed`] including the 1/n normalization.
pub fn irfft_packed(s: &[f64], out: &mut [f64]) {
    let n = s.len();
    debug_assert!(is_power_of_two(n) && out.len() == n);
    let half = n / 2;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[0] = Complex64::new(s[0], 0.0);
    buf[half] = Complex64::new(s[half], 0.0);
    for k in 1..half {
        buf[k] = Complex64::new(s[k], s[half + k]);
        buf[n - k] = Complex64::new(s[k], -s[half + k]);
    }
    plan(n, true).process(&mut buf);
    let inv_n = 1.0 / n as f64;
    for t in 0..n {
        out[t] = buf[t].re * inv_n;
    }
}

/// Vector-Jacobian product of the forward DFT: a scaled inverse DFT.
pub fn rfft_vjp(grad: &[f64], out: &mut [f64]) {
    let n = grad.len();
    let half = n / 2;
    let mut adj = vec![0.0; n];
    adj[0] = grad[0];
    adj[half] = grad[half];
    for k in 1..half {
        adj[k] = grad[k] * 0.5;
        adj[half + k] = grad[half + k] * 0.5;
    }
    irfft_packed(&adj, out);
    let nf = n as f64;
    for v in out.iter_mut() {
        *v *= nf;
    }
}

/// Vector-Jacobian product of the inverse DFT: a scaled forward DFT.
pub fn irfft_vjp(grad: &[f64], out: &mut [f64]) {
    let n = grad.len();
    let half = n / 2;
    rfft_packed(grad, out);
    let inv_n = 1.0 / n as f64;
    out[0] *= inv_n;
    out[half] *= inv_n;
    for k in 1..half {
        out[k] *= 2.0 * inv_n;
        out[half + k] *= 2.0 * inv_n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_identity() {
        let mut rng = crate::rng::keyed_rng(3, &[0]);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s = vec![0.0; 64];
        let mut y = vec![0.0; 64];
        rfft_packed(&x, &mut s);
        irfft_packed(&s, &mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn vjp_is_transpose() {
        // <F x, g> == <x, F^T g> for both directions.
        let n = 32;
        let mut rng = crate::rng::keyed_rng(5, &[1]);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut fx = vec![0.0; n];
        rfft_packed(&x, &mut fx);
        let mut ftg = vec![0.0; n];
        rfft_vjp(&g, &mut ftg);
        let lhs: f64 = fx.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ftg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));

        let mut ix = vec![0.0; n];
        irfft_packed(&x, &mut ix);
        let mut itg = vec![0.0; n];
        irfft_vjp(&g, &mut itg);
        let lhs: f64 = ix.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&itg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
