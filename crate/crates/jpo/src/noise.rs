//! Synthetic noisy loss landscapes: a linear signal slope toward the optimum
//! plus a Fourier-series noise term, the closed-form alignment probabilities
//! they induce, and Monte Carlo estimators to verify both.

use rand::Rng;
use statrs::function::erf::erf;

use crate::error::{JpoError, Result};
use crate::rng::keyed_rng;

/// One synthetic landscape: `L(x) = lambda |x - x*| - sum_j A_j cos(w_j x + phi_j)`.
#[derive(Debug, Clone)]
pub struct LandscapeSpec {
    pub lambda: f64,
    pub x_star: f64,
    /// (amplitude, angular frequency, phase) triples.
    pub components: Vec<(f64, f64, f64)>,
}

impl LandscapeSpec {
    /// `|A w|_2` over the components.
    pub fn aw_norm(&self) -> f64 {
        self.components
            .iter()
            .map(|&(a, w, _)| (a * w) * (a * w))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct LandscapeBatch {
    pub specs: Vec<LandscapeSpec>,
    pub shared_optimum: bool,
}

impl LandscapeBatch {
    /// Batch whose examples all share one optimum location.
    pub fn shared(specs: Vec<LandscapeSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(JpoError::InvalidArg("empty batch".into()));
        }
        let x0 = specs[0].x_star;
        if specs.iter().any(|s| s.x_star != x0) {
            return Err(JpoError::InvalidArg("shared batch requires equal x*".into()));
        }
        Ok(LandscapeBatch { specs, shared_optimum: true })
    }
}

/// Samplable law for amplitudes and frequencies.
#[derive(Debug, Clone, Copy)]
pub enum Law {
    Const(f64),
    Uniform(f64, f64),
}

impl Law {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Law::Const(v) => v,
            Law::Uniform(a, b) => rng.gen_range(a..b),
        }
    }
}

pub fn make_landscape(
    m: usize,
    amplitude: Law,
    frequency: Law,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<LandscapeSpec> {
    if m == 0 {
        return Err(JpoError::InvalidArg(
            "component count must be >= 1 (use amplitude 0 for the noise-free case)".into(),
        ));
    }
    let components = (0..m)
        .map(|_| {
            let a = amplitude.sample(rng);
            let w = frequency.sample(rng);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            (a, w, phi)
        })
        .collect();
    Ok(LandscapeSpec {
        lambda,
        x_star: 0.0,
        components,
    })
}

pub fn landscape_loss(spec: &LandscapeSpec, x: f64) -> f64 {
    let signal = spec.lambda * (x - spec.x_star).abs();
    let noise: f64 = spec
        .components
        .iter()
        .map(|&(a, w, phi)| -a * (w * x + phi).cos())
        .sum();
    signal + noise
}

/// Closed-form gradient. At the kink `x = x*` the signal term contributes 0.
pub fn landscape_grad(spec: &LandscapeSpec, x: f64) -> f64 {
    let d = x - spec.x_star;
    let sig = if d == 0.0 { 0.0 } else { spec.lambda * d.signum() };
    let noise: f64 = spec
        .components
        .iter()
        .map(|&(a, w, phi)| a * w * (w * x + phi).sin())
        .sum();
    sig + noise
}

/// Gradient at a point with the oscillator phases resampled uniformly. For a
/// uniform x over an unbounded domain the phase terms `w x + phi` (mod 2 pi)
/// equidistribute independently, so this is the faithful sampler for the
/// "random x" probabilities; a fixed phase draw over a finite window is not.
fn landscape_grad_random_phase(spec: &LandscapeSpec, x: f64, rng: &mut impl Rng) -> f64 {
    let d = x - spec.x_star;
    let sig = if d == 0.0 { 0.0 } else { spec.lambda * d.signum() };
    let noise: f64 = spec
        .components
        .iter()
        .map(|&(a, w, _)| a * w * rng.gen_range(0.0..std::f64::consts::TAU).sin())
        .sum();
    sig + noise
}

/// Probability that a single example's gradient points toward the optimum:
/// `1/2 + 1/2 erf(lambda / |Aw|_2)`.
pub fn prob_aligned_single(lambda: f64, aw_norm: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(JpoError::InvalidArg("lambda must be >= 0".into()));
    }
    if aw_norm < 0.0 {
        return Err(JpoError::InvalidArg("aw_norm must be >= 0".into()));
    }
    if aw_norm == 0.0 {
        return Ok(if lambda > 0.0 { 1.0 } else { 0.5 });
    }
    Ok(0.5 + 0.5 * erf(lambda / aw_norm))
}

/// Sum-of-losses alignment probability: `1/2 + 1/2 erf(sum_i lambda_i / |Aw|_2)`
/// with the norm taken over all examples' components.
pub fn prob_aligned_sum(lambdas: &[f64], aw_norm_total: f64) -> Result<f64> {
    if lambdas.is_empty() {
        return Err(JpoError::InvalidArg("empty lambda list".into()));
    }
    let total: f64 = lambdas.iter().sum();
    if lambdas.iter().any(|&l| l < 0.0) {
        return Err(JpoError::InvalidArg("lambdas must be >= 0".into()));
    }
    prob_aligned_single(total, aw_norm_total)
}

/// Exact majority-vote probability by Bernoulli enumeration. Even `N` counts
/// ties as 1/2. Restricted to `N <= 64`.
pub fn prob_majority_exact(n: usize, epsilon: f64) -> Result<f64> {
    if n == 0 || n > 64 {
        return Err(JpoError::InvalidArg(format!(
            "exact majority path supports 1 <= N <= 64, got {n}"
        )));
    }
    if !(0.0..0.5).contains(&epsilon) {
        return Err(JpoError::InvalidArg("epsilon must be in [0, 0.5)".into()));
    }
    let p = 0.5 + epsilon;
    let q = 0.5 - epsilon;
    // pmf via multiplicative binomial recurrence
    let mut prob = 0.0;
    let mut pmf = q.powi(n as i32); // k = 0
    for k in 0..=n {
        if 2 * k > n {
            prob += pmf;
        } else if 2 * k == n {
            prob += 0.5 * pmf;
        }
        if k < n {
            pmf *= (n - k) as f64 / (k + 1) as f64 * (p / q);
        }
    }
    Ok(prob.min(1.0))
}

/// Normal approximation to the majority vote:
/// `1/2 + 1/2 erf(sqrt(N) eps / sqrt(2 (1/4 - eps^2)))`.
pub fn prob_majority_normal(n: usize, epsilon: f64) -> Result<f64> {
    if n == 0 {
        return Err(JpoError::InvalidArg("N must be >= 1".into()));
    }
    if !(0.0..0.5).contains(&epsilon) {
        return Err(JpoError::InvalidArg("epsilon must be in [0, 0.5)".into()));
    }
    let arg = (n as f64).sqrt() * epsilon / (2.0 * (0.25 - epsilon * epsilon)).sqrt();
    Ok(0.5 + 0.5 * erf(arg))
}

/// Majority-vote probability from a single example's alignment probability,
/// choosing the exact path when enumeration is affordable.
pub fn prob_majority_from_single(n: usize, p_single: f64) -> Result<f64> {
    let epsilon = (p_single - 0.5).clamp(0.0, 0.5 - 1e-12);
    if n <= 64 {
        prob_majority_exact(n, epsilon)
    } else {
        prob_majority_normal(n, epsilon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reducer {
    SumOfLosses,
    MajorityVote,
}

#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub probability: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Monte Carlo alignment probability of the reduced update direction.
///
/// Samples x uniformly on `[x* - D, x* + D]` with `D = 3 (2 pi / min omega)`,
/// keyed per sample so the result is independent of evaluation order.
pub fn mc_alignment(
    batch: &LandscapeBatch,
    reducer: Reducer,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if !batch.shared_optimum {
        return Err(JpoError::InvalidArg(
            "mc_alignment requires a shared-optimum batch".into(),
        ));
    }
    if samples == 0 || batch.specs.is_empty() {
        return Err(JpoError::InvalidArg("need >= 1 sample and >= 1 example".into()));
    }
    let x_star = batch.specs[0].x_star;
    let min_w = batch
        .specs
        .iter()
        .flat_map(|s| s.components.iter())
        .filter(|&&(a, w, _)| a > 0.0 && w > 0.0)
        .map(|&(_, w, _)| w)
        .fold(f64::INFINITY, f64::min);
    let d = if min_w.is_finite() {
        3.0 * std::f64::consts::TAU / min_w
    } else {
        1.0 // noise-free: any window works
    };

    let mut hits = 0.0;
    for s in 0..samples {
        let mut rng = keyed_rng(seed, &[s as u64]);
        let x = x_star + rng.gen_range(-d..d);
        let toward = x_star - x; // desired update direction
        let update = match reducer {
            Reducer::SumOfLosses => {
                let g: f64 = batch
                    .specs
                    .iter()
                    .map(|sp| landscape_grad_random_phase(sp, x, &mut rng))
                    .sum();
                -g
            }
            Reducer::MajorityVote => {
                let votes: f64 = batch
                    .specs
                    .iter()
                    .map(|sp| -landscape_grad_random_phase(sp, x, &mut rng).signum())
                    .sum();
                votes
            }
        };
        if update == 0.0 {
            hits += 0.5; // tie
        } else if update * toward > 0.0 {
            hits += 1.0;
        }
    }
    let p = hits / samples as f64;
    Ok(McEstimate {
        probability: p,
        stderr: (p * (1.0 - p) / samples as f64).sqrt(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_is_pure_signal() {
        let mut rng = keyed_rng(1, &[]);
        let spec = make_landscape(1, Law::Const(0.0), Law::Const(5.0), 2.0, &mut rng).unwrap();
        assert!((landscape_loss(&spec, 3.0) - 6.0).abs() < 1e-12);
        assert!((landscape_grad(&spec, 3.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn landscape_is_deterministic_per_seed() {
        let a = make_landscape(3, Law::Uniform(0.0, 1.0), Law::Uniform(0.0, 20.0), 1.0, &mut keyed_rng(7, &[])).unwrap();
        let b = make_landscape(3, Law::Uniform(0.0, 1.0), Law::Uniform(0.0, 20.0), 1.0, &mut keyed_rng(7, &[])).unwrap();
        assert_eq!(a.components, b.components);
    }

    #[test]
    fn zero_components_rejected() {
        let mut rng = keyed_rng(1, &[]);
        assert!(make_landscape(0, Law::Const(0.0), Law::Const(1.0), 1.0, &mut rng).is_err());
    }

    #[test]
    fn grad_matches_finite_difference() {
        let mut rng = keyed_rng(11, &[]);
        let spec = make_landscape(8, Law::Uniform(0.1, 1.0), Law::Uniform(0.5, 10.0), 1.0, &mut rng).unwrap();
        let x = 0.37;
        let h = 1e-7;
        let fd = (landscape_loss(&spec, x + h) - landscape_loss(&spec, x - h)) / (2.0 * h);
        let g = landscape_grad(&spec, x);
        assert!((fd - g).abs() / (g.abs() + 1.0) < 1e-6, "fd {fd} vs {g}");
    }

    #[test]
    fn signal_loss_and_grad() {
        // lambda=1, no noise, x = x* + 2
        let spec = LandscapeSpec { lambda: 1.0, x_star: 0.0, components: vec![(0.0, 1.0, 0.0)] };
        assert_eq!(landscape_loss(&spec, 2.0), 2.0);
        assert_eq!(landscape_grad(&spec, 2.0), 1.0);
        // lambda=0, single component A=1, w=1, phi=0, x=pi/2 -> grad 1
        let spec = LandscapeSpec { lambda: 0.0, x_star: 0.0, components: vec![(1.0, 1.0, 0.0)] };
        assert!((landscape_grad(&spec, std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prob_single_anchors() {
        assert_eq!(prob_aligned_single(0.0, 1.0).unwrap(), 0.5);
        assert_eq!(prob_aligned_single(1.0, 0.0).unwrap(), 1.0);
        let p = prob_aligned_single(1.0, 1.0).unwrap();
        assert!((p - 0.92135).abs() < 5e-5, "p = {p}");
        assert!(prob_aligned_single(-1.0, 1.0).is_err());
    }

    #[test]
    fn prob_sum_anchors() {
        // N=1 consistency
        let a = prob_aligned_sum(&[0.7], 1.3).unwrap();
        let b = prob_aligned_single(0.7, 1.3).unwrap();
        assert_eq!(a, b);
        // N=4 equal lambda=1, per-example norm 1 => total norm 2, erf(4/2)
        let p = prob_aligned_sum(&[1.0; 4], 2.0).unwrap();
        assert!((p - (0.5 + 0.5 * erf(2.0))).abs() < 1e-15);
        assert!(prob_aligned_sum(&[], 1.0).is_err());
        // linearization for small argument
        let arg: f64 = 0.1;
        let p = prob_aligned_sum(&[arg], 1.0).unwrap();
        let lin = 0.5 + arg / std::f64::consts::PI.sqrt();
        assert!((p - lin).abs() / (p - 0.5) < 0.01);
    }

    #[test]
    fn majority_anchors() {
        assert!((prob_majority_exact(1, 0.1).unwrap() - 0.6).abs() < 1e-15);
        let p3 = prob_majority_exact(3, 0.1).unwrap();
        let expect = 0.6f64.powi(3) + 3.0 * 0.6f64.powi(2) * 0.4;
        assert!((p3 - expect).abs() < 1e-14, "p3 = {p3}");
        assert!(prob_majority_exact(66, 0.1).is_err());
        // exact vs normal approximation converge
        for &n in &[11usize, 51, 61] {
            let e = prob_majority_exact(n, 0.05).unwrap();
            let a = prob_majority_normal(n, 0.05).unwrap();
            assert!((e - a).abs() < 0.02, "N={n}: exact {e} vs normal {a}");
        }
    }

    #[test]
    fn even_n_tie_counts_half() {
        // N=2, eps=0: P(correct) = P(2 up) + 0.5 P(tie) = 0.25 + 0.25 = 0.5
        let p = prob_majority_exact(2, 0.0).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn monotonicity_in_lambda_and_noise() {
        let mut prev = 0.0;
        for i in 0..10 {
            let p = prob_aligned_single(i as f64 * 0.3, 1.0).unwrap();
            assert!(p >= prev);
            prev = p;
        }
        let mut prev = 1.0;
        for i in 1..10 {
            let p = prob_aligned_single(1.0, i as f64 * 0.4).unwrap();
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn mc_noise_free_batch_is_certain() {
        let spec = LandscapeSpec { lambda: 1.0, x_star: 0.5, components: vec![(0.0, 1.0, 0.0)] };
        let batch = LandscapeBatch { specs: vec![spec; 3], shared_optimum: true };
        let est = mc_alignment(&batch, Reducer::SumOfLosses, 1000, 3).unwrap();
        assert_eq!(est.probability, 1.0);
    }

    #[test]
    fn mc_single_example_matches_closed_form() {
        let mut rng = keyed_rng(21, &[]);
        let spec = make_landscape(32, Law::Uniform(0.2, 1.0), Law::Uniform(1.0, 20.0), 3.0, &mut rng).unwrap();
        let p_cf = prob_aligned_single(spec.lambda, spec.aw_norm()).unwrap();
        let batch = LandscapeBatch { specs: vec![spec], shared_optimum: true };
        let est = mc_alignment(&batch, Reducer::SumOfLosses, 100_000, 5).unwrap();
        assert!(
            (est.probability - p_cf).abs() < 3.0 * est.stderr.max(2e-3),
            "mc {} vs closed form {} (se {})",
            est.probability,
            p_cf,
            est.stderr
        );
    }
}
