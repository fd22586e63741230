//! Wave-packet localization: recover the center t0 of a noisy oscillating
//! packet sampled at t = 1..256.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{DiffValue, Tape};
use crate::error::Result;
use crate::problems::{Family, ProblemSet};
use crate::rng::keyed_rng;

pub const SAMPLES: usize = 256;
pub const T0_MIN: f64 = 26.0;
pub const T0_MAX: f64 = 230.0;
pub const NOISE_STD: f64 = 0.1;
/// Envelope: exp(-d^2 / (2 s^2)) with s = 10.
const ENVELOPE_S2X2: f64 = 200.0;

/// The packet value at offset d = t - t0.
pub fn waveform(d: f64) -> f64 {
    (-d * d / ENVELOPE_S2X2).exp() * d.sin()
}

/// Soft clamp of an unconstrained candidate onto (1, 256).
pub fn clamp_t0(z: f64) -> f64 {
    128.5 + 127.5 * ((z - 128.5) / 127.5).tanh()
}

/// Inverse of the soft clamp: the unconstrained coordinate whose clamped
/// value is `t0`. Solution candidates live in this coordinate.
pub fn inv_clamp_t0(t0: f64) -> f64 {
    128.5 + 127.5 * ((t0 - 128.5) / 127.5).atanh()
}

fn time_grid() -> Vec<f64> {
    (1..=SAMPLES).map(|t| t as f64).collect()
}

pub fn generate(n: usize, seed: u64) -> Result<ProblemSet> {
    generate_with_noise(n, seed, NOISE_STD)
}

/// Test hook: sigma = 0 produces noise-free observations.
pub fn generate_with_noise(n: usize, seed: u64, sigma: f64) -> Result<ProblemSet> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let grid = time_grid();
    let mut gammas = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = keyed_rng(seed, &[Family::Wavepacket as u64, i as u64]);
        let t0 = rng.gen_range(T0_MIN..T0_MAX);
        let y: Vec<f64> = grid
            .iter()
            .map(|&t| waveform(t - t0) + sigma * normal.sample(&mut rng))
            .collect();
        gammas.push(Vec::new());
        targets.push(y);
        // ground truth in the unconstrained solution coordinate
        truth.push(vec![inv_clamp_t0(t0)]);
    }
    ProblemSet::new(Family::Wavepacket, seed, gammas, targets, Some(truth))
}

/// Plain evaluation of the objective at an (unclamped) candidate.
pub fn loss_scalar(y: &[f64], z: f64) -> f64 {
    let t0 = clamp_t0(z);
    let mut acc = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let r = waveform((i + 1) as f64 - t0) - yi;
        acc += r * r;
    }
    acc / y.len() as f64
}

/// Per-example MSE losses [B] for candidates x [B, 1].
pub fn batch_loss(tape: &mut Tape, set: &ProblemSet, x: DiffValue) -> Result<DiffValue> {
    let b = set.n;
    let z = tape.column(x, 0)?; // [B]
    // soft clamp onto (1, 256)
    let t0 = {
        let c = tape.add_const(z, -128.5);
        let c = tape.scale(c, 1.0 / 127.5);
        let c = tape.tanh(c);
        let c = tape.scale(c, 127.5);
        tape.add_const(c, 128.5)
    };
    let grid = tape.constant(time_grid(), vec![SAMPLES])?;
    let d = tape.sub_outer(grid, t0)?; // [B, L] of t - t0
    let d2 = tape.mul(d, d)?;
    let envelope = {
        let e = tape.scale(d2, -1.0 / ENVELOPE_S2X2);
        tape.exp(e)
    };
    let carrier = tape.sin(d);
    let w = tape.mul(envelope, carrier)?;
    let y_flat: Vec<f64> = set.targets.iter().flatten().copied().collect();
    let y = tape.constant(y_flat, vec![b, SAMPLES])?;
    let r = tape.sub(w, y)?;
    let r2 = tape.mul(r, r)?;
    tape.mean_rows(r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, ScalarFn};

    #[test]
    fn zero_noise_truth_has_zero_loss() {
        let set = generate_with_noise(3, 5, 0.0).unwrap();
        for i in 0..3 {
            let t0 = set.ground_truth().unwrap()[i][0];
            let l = loss_scalar(&set.targets[i], t0);
            assert!(l < 1e-20, "loss = {l}");
        }
    }

    #[test]
    fn noisy_floor_is_positive() {
        let set = generate(3, 5).unwrap();
        for i in 0..3 {
            let t0 = set.ground_truth().unwrap()[i][0];
            let l = loss_scalar(&set.targets[i], t0);
            assert!(l > 1e-4, "loss = {l}");
        }
    }

    #[test]
    fn displaced_candidate_costs_like_zero_fit() {
        // one envelope width (s=10) away, the packet overlap is tiny: the
        // residual is close to fitting zeros plus an independent packet
        let set = generate_with_noise(1, 9, 0.0).unwrap();
        let t0 = clamp_t0(set.ground_truth().unwrap()[0][0]);
        let shift = if t0 + 40.0 < 250.0 { 40.0 } else { -40.0 };
        let zero_fit: f64 =
            set.targets[0].iter().map(|y| y * y).sum::<f64>() / SAMPLES as f64;
        let displaced = loss_scalar(&set.targets[0], inv_clamp_t0(t0 + shift));
        assert!((displaced - 2.0 * zero_fit).abs() < 0.35 * 2.0 * zero_fit,
            "displaced = {displaced}, 2x zero fit = {}", 2.0 * zero_fit);
    }

    #[test]
    fn clamp_maps_into_range() {
        assert!(clamp_t0(-1e9) >= 1.0 && clamp_t0(-1e9) < 1.01);
        assert!(clamp_t0(1e9) <= 256.0);
        assert!((clamp_t0(128.5) - 128.5).abs() < 1e-12);
        for t0 in [26.0, 100.0, 230.0] {
            assert!((clamp_t0(inv_clamp_t0(t0)) - t0).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_loss_matches_scalar_and_fd() {
        let set = generate(2, 3).unwrap();
        for (i, z) in [(0usize, 100.0f64), (1, 187.3)] {
            let expect = loss_scalar(&set.targets[i], z);
            let set2 = set.clone();
            let f: &ScalarFn = &move |t: &mut Tape, x: DiffValue| {
                let x = t.reshape(x, vec![1, 1])?;
                let sub = ProblemSet::new(
                    Family::Wavepacket,
                    set2.seed,
                    vec![set2.gammas[i].clone()],
                    vec![set2.targets[i].clone()],
                    None,
                )?;
                let l = batch_loss(t, &sub, x)?;
                Ok(t.sum(l))
            };
            let mut tape = Tape::new();
            let xv = tape.input(vec![z], vec![1]).unwrap();
            let lv = f(&mut tape, xv).unwrap();
            assert!((tape.data(lv)[0] - expect).abs() < 1e-12);
            let err = check_gradient(f, &[z], 1e-5).unwrap();
            assert!(err < 1e-5, "err = {err}");
        }
    }
}
