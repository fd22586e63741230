//! Forced Kuramoto-Sivashinsky equation on [0, 32*pi) at resolution 128:
//! recover the forcing strength alpha and advection strength beta from the
//! initial and final states. Linear terms integrate exactly in frequency
//! space; the nonlinear term uses midpoint RK2 with integrating factors.

use num_complex::Complex64;
use rand::Rng;

use crate::autodiff::fft::{irfft_packed, rfft_packed};
use crate::autodiff::{DiffValue, Tape};
use crate::error::{JpoError, Result};
use crate::problems::{DivergenceLog, Family, ProblemSet};
use crate::rng::keyed_rng;

pub const RESOLUTION: usize = 128;
pub const DOMAIN: f64 = 32.0 * std::f64::consts::PI;
pub const DT: f64 = 0.25;
pub const STEPS: usize = 100;
pub const GUARD: f64 = 1e6;
/// Uniform prior box over (alpha, beta).
pub const PRIOR_BOX: [(f64, f64); 2] = [(0.5, 1.5), (0.5, 1.5)];
pub const PRIOR_MEAN: [f64; 2] = [1.0, 1.0];
/// Spectral smoothing scale of the random initial state.
const INIT_K0: f64 = 0.5;

fn wavenumbers() -> Vec<f64> {
    (0..=RESOLUTION / 2).map(|j| j as f64 / 16.0).collect()
}

/// The fixed forcing G(x) on the grid.
pub fn forcing() -> Vec<f64> {
    (0..RESOLUTION)
        .map(|i| {
            let x = i as f64 * DOMAIN / RESOLUTION as f64;
            0.1 * x.cos() - 0.01 * (x / 16.0).cos() * (1.0 - 2.0 * (x / 16.0).sin())
        })
        .collect()
}

/// exp((k^2 - k^4) * dt) per mode.
fn linear_factor(dt: f64) -> Vec<f64> {
    wavenumbers()
        .iter()
        .map(|&k| ((k * k - k.powi(4)) * dt).exp())
        .collect()
}

/// Spectral derivative factor i*k, Nyquist zeroed.
fn derivative_factors() -> (Vec<f64>, Vec<f64>) {
    let mut ci = wavenumbers();
    let last = ci.len() - 1;
    ci[last] = 0.0;
    (vec![0.0; ci.len()], ci)
}

/// Random smooth initial state: unit-normal complex modes under a Gaussian
/// spectral envelope, normalized to unit RMS.
pub fn random_initial_state(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 1.0).unwrap();
    let half = RESOLUTION / 2;
    let mut spectrum = vec![Complex64::new(0.0, 0.0); half + 1];
    for (j, slot) in spectrum.iter_mut().enumerate().take(half).skip(1) {
        let k = j as f64 / 16.0;
        let envelope = (-k * k / (2.0 * INIT_K0 * INIT_K0)).exp();
        *slot = Complex64::new(normal.sample(rng), normal.sample(rng)) * envelope;
    }
    let mut packed = vec![0.0; RESOLUTION];
    for j in 0..=half {
        packed[j] = spectrum[j].re;
        if j > 0 && j < half {
            packed[half + j] = spectrum[j].im;
        }
    }
    let mut u = vec![0.0; RESOLUTION];
    irfft_packed(&packed, &mut u);
    let rms = (u.iter().map(|v| v * v).sum::<f64>() / RESOLUTION as f64).sqrt();
    if rms > 0.0 {
        for v in u.iter_mut() {
            *v /= rms;
        }
    }
    u
}

fn mul_packed(packed: &mut [f64], cr: &[f64], ci: &[f64]) {
    let half = packed.len() / 2;
    packed[0] *= cr[0];
    packed[half] *= cr[half];
    for j in 1..half {
        let (re, im) = (packed[j], packed[half + j]);
        packed[j] = cr[j] * re - ci[j] * im;
        packed[half + j] = cr[j] * im + ci[j] * re;
    }
}

/// Plain (non-tape) forward run; errors on divergence naming the step.
pub fn forward(alpha: f64, beta: f64, u0: &[f64], steps: usize) -> Result<Vec<f64>> {
    if u0.len() != RESOLUTION {
        return Err(JpoError::ShapeMismatch {
            op: "ks::forward",
            detail: format!("u0 length {}", u0.len()),
        });
    }
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(JpoError::NonFinite("ks parameters".into()));
    }
    let g = forcing();
    let e_full = linear_factor(DT);
    let e_half = linear_factor(DT / 2.0);
    let (_, ik) = derivative_factors();
    let zeros = vec![0.0; e_full.len()];
    let n = RESOLUTION;

    let nonlin = |u: &[f64], buf: &mut Vec<f64>| {
        let mut hat = vec![0.0; n];
        rfft_packed(u, &mut hat);
        mul_packed(&mut hat, &zeros, &ik);
        let mut ux = vec![0.0; n];
        irfft_packed(&hat, &mut ux);
        buf.clear();
        buf.extend((0..n).map(|i| alpha * g[i] - beta * u[i] * ux[i]));
    };

    let mut u = u0.to_vec();
    let mut k1 = Vec::with_capacity(n);
    let mut k2 = Vec::with_capacity(n);
    for step in 0..steps {
        nonlin(&u, &mut k1);
        let staged: Vec<f64> = (0..n).map(|i| u[i] + 0.5 * DT * k1[i]).collect();
        let mut mid_hat = vec![0.0; n];
        rfft_packed(&staged, &mut mid_hat);
        mul_packed(&mut mid_hat, &e_half, &zeros);
        let mut mid = vec![0.0; n];
        irfft_packed(&mid_hat, &mut mid);
        nonlin(&mid, &mut k2);

        let mut u_hat = vec![0.0; n];
        rfft_packed(&u, &mut u_hat);
        mul_packed(&mut u_hat, &e_full, &zeros);
        let mut k2_hat = vec![0.0; n];
        rfft_packed(&k2, &mut k2_hat);
        mul_packed(&mut k2_hat, &e_half, &zeros);
        for i in 0..n {
            u_hat[i] += DT * k2_hat[i];
        }
        irfft_packed(&u_hat, &mut u);
        if u.iter().any(|v| !v.is_finite() || v.abs() > GUARD) {
            return Err(JpoError::Divergence { step, guard: GUARD });
        }
    }
    Ok(u)
}

pub fn generate(n: usize, seed: u64) -> Result<ProblemSet> {
    let mut gammas = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = keyed_rng(seed, &[Family::Ks as u64, i as u64]);
        let alpha = rng.gen_range(PRIOR_BOX[0].0..PRIOR_BOX[0].1);
        let beta = rng.gen_range(PRIOR_BOX[1].0..PRIOR_BOX[1].1);
        let u0 = random_initial_state(&mut rng);
        let y = forward(alpha, beta, &u0, STEPS)?;
        gammas.push(u0);
        targets.push(y);
        truth.push(vec![alpha, beta]);
    }
    ProblemSet::new(Family::Ks, seed, gammas, targets, Some(truth))
}

/// Batched tape forward: x [B, 2] holds (alpha, beta); returns the final
/// states [B, RESOLUTION] with diverged rows masked to zero, plus the log.
pub fn forward_tape(
    tape: &mut Tape,
    x: DiffValue,
    u0s: &[Vec<f64>],
    steps: usize,
) -> Result<(DiffValue, DivergenceLog)> {
    let b = u0s.len();
    let n = RESOLUTION;
    let alpha = tape.column(x, 0)?; // [B]
    let beta = tape.column(x, 1)?;
    let g = forcing();
    let g_tiled: Vec<f64> = std::iter::repeat(&g).take(b).flatten().copied().collect();
    let g_bl = tape.constant(g_tiled, vec![b, n])?;
    let e_full = linear_factor(DT);
    let e_half = linear_factor(DT / 2.0);
    let (dr, di) = derivative_factors();
    let zeros = vec![0.0; e_full.len()];

    let flat: Vec<f64> = u0s.iter().flatten().copied().collect();
    let mut u = tape.constant(flat, vec![b, n])?;
    let mut log = DivergenceLog::clean(b);
    let mut alive = vec![true; b];
    let mut any_dead = false;

    for step in 0..steps {
        // nonlinear term at u
        let u_hat = tape.rfft(u)?;
        let ux_hat = tape.complex_scale(u_hat, &dr, &di)?;
        let ux = tape.irfft(ux_hat)?;
        let uux = tape.mul(u, ux)?;
        let adv = tape.mul_col(beta, uux)?;
        let force = tape.mul_col(alpha, g_bl)?;
        let k1 = tape.sub(force, adv)?;

        let k1s = tape.scale(k1, 0.5 * DT);
        let staged = tape.add(u, k1s)?;
        let staged_hat = tape.rfft(staged)?;
        let mid_hat = tape.complex_scale(staged_hat, &e_half, &zeros)?;
        let mid = tape.irfft(mid_hat)?;

        // nonlinear term at the midpoint
        let m_hat = tape.rfft(mid)?;
        let mx_hat = tape.complex_scale(m_hat, &dr, &di)?;
        let mx = tape.irfft(mx_hat)?;
        let mmx = tape.mul(mid, mx)?;
        let adv2 = tape.mul_col(beta, mmx)?;
        let k2 = tape.sub(force, adv2)?;

        let uh = tape.complex_scale(u_hat, &e_full, &zeros)?;
        let k2_hat = tape.rfft(k2)?;
        let k2h = tape.complex_scale(k2_hat, &e_half, &zeros)?;
        let k2hd = tape.scale(k2h, DT);
        let next_hat = tape.add(uh, k2hd)?;
        u = tape.irfft(next_hat)?;

        let data = tape.data(u);
        let mut newly_dead = false;
        for (row, ok) in alive.iter_mut().enumerate() {
            if *ok {
                let bad = data[row * n..(row + 1) * n]
                    .iter()
                    .any(|v| !v.is_finite() || v.abs() > GUARD);
                if bad {
                    *ok = false;
                    log.diverged_at[row] = Some(step);
                    newly_dead = true;
                }
            }
        }
        any_dead |= newly_dead;
        if any_dead {
            u = tape.mask_rows(u, &alive)?;
        }
    }
    Ok((u, log))
}

/// Per-example MSE of final states [B], diverged rows masked.
pub fn batch_loss(
    tape: &mut Tape,
    set: &ProblemSet,
    x: DiffValue,
) -> Result<(DiffValue, DivergenceLog)> {
    let (u_final, log) = forward_tape(tape, x, &set.gammas, STEPS)?;
    let y_flat: Vec<f64> = set.targets.iter().flatten().copied().collect();
    let y = tape.constant(y_flat, vec![set.n, RESOLUTION])?;
    let r = tape.sub(u_final, y)?;
    let r2 = tape.mul(r, r)?;
    let mut losses = tape.mean_rows(r2)?;
    if log.any() {
        let alive: Vec<bool> = log.diverged_at.iter().map(|d| d.is_none()).collect();
        losses = tape.mask_rows(losses, &alive)?;
    }
    Ok((losses, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    #[test]
    fn neutral_mode_is_stationary_without_forcing() {
        // k = 1 has growth rate k^2 - k^4 = 0; with alpha = beta = 0 the
        // state cos(x) must come back unchanged
        let u0: Vec<f64> = (0..RESOLUTION)
            .map(|i| (i as f64 * DOMAIN / RESOLUTION as f64).cos())
            .collect();
        let u = forward(0.0, 0.0, &u0, STEPS).unwrap();
        let max_dev = u0
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-8, "max dev = {max_dev}");
    }

    #[test]
    fn truth_parameters_give_zero_loss() {
        let set = generate(2, 4).unwrap();
        for i in 0..2 {
            let truth = &set.ground_truth().unwrap()[i];
            let u = forward(truth[0], truth[1], &set.gammas[i], STEPS).unwrap();
            let mse: f64 = u
                .iter()
                .zip(&set.targets[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / RESOLUTION as f64;
            assert!(mse < 1e-24, "mse = {mse}");
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let set = generate(2, 8).unwrap();
        let params = [[0.9, 1.1], [1.2, 0.7]];
        let mut tape = Tape::new();
        let flat: Vec<f64> = params.iter().flatten().copied().collect();
        let x = tape.input(flat, vec![2, 2]).unwrap();
        let (u, log) = forward_tape(&mut tape, x, &set.gammas, 10).unwrap();
        assert!(!log.any());
        let data = tape.data(u).to_vec();
        for i in 0..2 {
            let plain = forward(params[i][0], params[i][1], &set.gammas[i], 10).unwrap();
            for j in 0..RESOLUTION {
                assert!((data[i * RESOLUTION + j] - plain[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_matches_fd_on_short_horizon() {
        use crate::autodiff::{check_gradient, ScalarFn};
        let set = generate(1, 15).unwrap();
        let truth = set.ground_truth().unwrap()[0].clone();
        let gammas = set.gammas.clone();
        let targets = set.targets.clone();
        let f: &ScalarFn = &move |t: &mut Tape, x: DiffValue| {
            let x = t.reshape(x, vec![1, 2])?;
            let (u, _) = forward_tape(t, x, &gammas, 3)?;
            let y = t.constant(targets[0].clone(), vec![1, RESOLUTION])?;
            let r = t.sub(u, y)?;
            let r2 = t.mul(r, r)?;
            Ok(t.mean(r2))
        };
        let err = check_gradient(f, &truth, 1e-6).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn chaotic_sensitivity_to_beta() {
        let mut rng = keyed_rng(21, &[0]);
        let u0 = random_initial_state(&mut rng);
        let a = forward(1.0, 1.0, &u0, STEPS).unwrap();
        let b = forward(1.0, 1.0 + 1e-6, &u0, STEPS).unwrap();
        let diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(diff > 1e-5, "diff = {diff}");
    }

    #[test]
    fn guard_reports_divergence_step() {
        let mut rng = keyed_rng(3, &[1]);
        let u0 = random_initial_state(&mut rng);
        // absurd advection strength blows the scheme up
        match forward(1.0, 1e6, &u0, STEPS) {
            Err(JpoError::Divergence { step, .. }) => assert!(step < STEPS),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn masked_rows_keep_healthy_gradients() {
        let set = generate(2, 30).unwrap();
        let truth0 = set.ground_truth().unwrap()[0].clone();
        let mut tape = Tape::new();
        let x = tape
            .input(vec![truth0[0], truth0[1], 1.0, 1e6], vec![2, 2])
            .unwrap();
        let (losses, log) = batch_loss(&mut tape, &set, x).unwrap();
        assert!(log.diverged_at[1].is_some());
        assert!(log.diverged_at[0].is_none());
        let l = tape.sum(losses);
        let g = tape.backward(l).unwrap();
        let grad = g.wrt_or_zero(x, 4);
        assert!(grad[0].is_finite() && grad[1].is_finite());
        assert_eq!(grad[2], 0.0);
        assert_eq!(grad[3], 0.0);
    }
}

