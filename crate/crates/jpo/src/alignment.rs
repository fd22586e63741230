//! Update-alignment recursion for jointly trained networks, parameter
//! fitting, and live measurement of alignment fractions on small tasks.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{JpoError, Result};
use crate::net::{net_forward, net_init, param_count, NetSpec};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy)]
pub struct AlignmentModelParams {
    /// Plasticity A > 0: how quickly the network stops absorbing new examples.
    pub plasticity: f64,
    /// Complexity C-tilde >= 0: expected cross-example correlation mass.
    pub complexity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Predicted,
    Measured,
}

#[derive(Debug, Clone)]
pub struct AlignmentCurve {
    pub n_values: Vec<usize>,
    pub rho: Vec<f64>,
    pub provenance: Provenance,
}

/// Predicted fraction of aligned per-example updates for N = 1..n_max:
/// rho_N = ((N-1) rho_{N-1} + P(Nth aligned)) / N with rho_1 = 1, where the
/// newest example is aligned with probability
/// (1 - e^{-(N-1)/A}) (c/2 + (1-c) rho_{N-1}) + e^{-(N-1)/A}, c = C~/N
/// clamped to [0, 1].
pub fn rho_predict(params: &AlignmentModelParams, n_max: usize) -> Result<AlignmentCurve> {
    if params.plasticity <= 0.0 || params.complexity < 0.0 {
        return Err(JpoError::InvalidArg("plasticity > 0, complexity >= 0 required".into()));
    }
    if n_max < 1 {
        return Err(JpoError::InvalidArg("n_max >= 1".into()));
    }
    let mut rho = Vec::with_capacity(n_max);
    rho.push(1.0);
    for n in 2..=n_max {
        let prev = rho[n - 2];
        let corr = (params.complexity / n as f64).clamp(0.0, 1.0);
        let decay = (-(n as f64 - 1.0) / params.plasticity).exp();
        let p = (1.0 - decay) * (0.5 * corr + (1.0 - corr) * prev) + decay;
        rho.push(((n as f64 - 1.0) * prev + p) / n as f64);
    }
    Ok(AlignmentCurve {
        n_values: (1..=n_max).collect(),
        rho,
        provenance: Provenance::Predicted,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FitOutcome {
    pub params: AlignmentModelParams,
    pub residual: f64,
    /// Set when the input curve is (near-)constant and the fit degenerate.
    pub flat: bool,
}

fn fit_residual(params: &AlignmentModelParams, curve: &AlignmentCurve) -> f64 {
    let n_max = *curve.n_values.iter().max().unwrap();
    let pred = rho_predict(params, n_max).unwrap();
    curve
        .n_values
        .iter()
        .zip(&curve.rho)
        .map(|(&n, &r)| {
            let p = pred.rho[n - 1];
            (p - r) * (p - r)
        })
        .sum::<f64>()
}

/// Least-squares fit of (A, C~) by coarse grid search plus pattern-search
/// refinement in (log A, C~).
pub fn rho_fit(curve: &AlignmentCurve) -> Result<FitOutcome> {
    if curve.n_values.len() < 3 {
        return Err(JpoError::InvalidArg("need at least 3 distinct N".into()));
    }
    let spread = curve
        .rho
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        - curve.rho.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let flat = spread < 1e-3;

    let mut best = AlignmentModelParams { plasticity: 1.0, complexity: 0.0 };
    let mut best_res = f64::INFINITY;
    for ai in 0..60 {
        let a = 0.1 * 10f64.powf(3.0 * ai as f64 / 59.0); // logspace 0.1..100
        for ci in 0..=100 {
            let c = 0.5 * ci as f64; // 0..50
            let p = AlignmentModelParams { plasticity: a, complexity: c };
            let r = fit_residual(&p, curve);
            if r < best_res {
                best_res = r;
                best = p;
            }
        }
    }
    // local polish on (log A, C~)
    let mut la = best.plasticity.ln();
    let mut c = best.complexity;
    let mut step = 0.3;
    while step > 1e-5 {
        let mut improved = false;
        for (dla, dc) in [
            (step, 0.0),
            (-step, 0.0),
            (0.0, step * 5.0),
            (0.0, -step * 5.0),
        ] {
            let cand = AlignmentModelParams {
                plasticity: (la + dla).exp(),
                complexity: (c + dc).max(0.0),
            };
            let r = fit_residual(&cand, curve);
            if r < best_res {
                best_res = r;
                la += dla;
                c = (c + dc).max(0.0);
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(FitOutcome {
        params: AlignmentModelParams { plasticity: la.exp(), complexity: c },
        residual: best_res,
        flat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignTask {
    /// x* = 10 gamma on gamma in [-1, 1].
    Linear,
    /// x* = sin(2 gamma) on gamma in [-2, 2].
    Sine,
    /// Sine task with Gaussian target noise (sigma = 0.1).
    SineNoisy,
}

impl AlignTask {
    pub fn tag(&self) -> &'static str {
        match self {
            AlignTask::Linear => "linear",
            AlignTask::Sine => "sine",
            AlignTask::SineNoisy => "sine-noisy",
        }
    }

    pub fn parse(s: &str) -> Result<AlignTask> {
        match s {
            "linear" => Ok(AlignTask::Linear),
            "sine" => Ok(AlignTask::Sine),
            "sine-noisy" => Ok(AlignTask::SineNoisy),
            other => Err(JpoError::InvalidArg(format!("unknown task '{other}'"))),
        }
    }
}

/// Network and step size used for live alignment measurements; both are
/// config defaults (they shift the fitted A and C~, not the recursion).
pub fn measurement_net_spec() -> NetSpec {
    NetSpec::s2s(1, 0, vec![64, 64], 1)
}
pub const MEASUREMENT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default)]
pub struct AlignmentSample {
    pub aligned: usize,
    pub counted: usize,
    pub excluded_zero_grad: usize,
}

/// One replica: init a fresh net, take exactly one summed-SGD step on the
/// task, and count the examples whose solution moved against their own
/// pre-update gradient sign.
pub fn measure_alignment_once(task: AlignTask, n: usize, seed: u64) -> Result<AlignmentSample> {
    use rand_distr::{Distribution, Normal};
    let spec = measurement_net_spec();
    let total = param_count(&spec)?;
    let mut rng = keyed_rng(seed, &[0xD001, n as u64]);
    let params = net_init(&spec, &mut keyed_rng(seed, &[0xD002, n as u64]))?;

    let (gamma_lo, gamma_hi) = match task {
        AlignTask::Linear => (-1.0, 1.0),
        _ => (-2.0, 2.0),
    };
    let gammas: Vec<f64> = (0..n).map(|_| rng.gen_range(gamma_lo..gamma_hi)).collect();
    let normal = Normal::new(0.0, 0.1).unwrap();
    let x_star: Vec<f64> = gammas
        .iter()
        .map(|&g| match task {
            AlignTask::Linear => 10.0 * g,
            AlignTask::Sine => (2.0 * g).sin(),
            AlignTask::SineNoisy => (2.0 * g).sin() + normal.sample(&mut rng),
        })
        .collect();

    let forward = |theta_data: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let theta = tape.input(theta_data.to_vec(), vec![total])?;
        let inp = tape.constant(gammas.clone(), vec![n, 1])?;
        let out = net_forward(&mut tape, &spec, &params, theta, inp)?;
        let x = tape.column(out, 0)?; // [N]
        let star = tape.constant(x_star.clone(), vec![n])?;
        let r = tape.sub(x, star)?;
        let r2 = tape.mul(r, r)?;
        let loss = tape.sum(r2);
        let grads = tape.backward(loss)?;
        Ok((tape.data(x).to_vec(), grads.wrt_or_zero(theta, total)))
    };

    let (x_before, g_theta) = forward(&params.theta)?;
    let theta_after: Vec<f64> = params
        .theta
        .iter()
        .zip(&g_theta)
        .map(|(t, g)| t - MEASUREMENT_STEP * g)
        .collect();
    let (x_after, _) = forward(&theta_after)?;

    let mut sample = AlignmentSample::default();
    for i in 0..n {
        let g_i = 2.0 * (x_before[i] - x_star[i]); // d/dx of (x - x*)^2
        if g_i == 0.0 {
            sample.excluded_zero_grad += 1;
            continue;
        }
        let dx = x_after[i] - x_before[i];
        sample.counted += 1;
        if dx * (-g_i) > 0.0 {
            sample.aligned += 1;
        }
    }
    Ok(sample)
}

/// Mean alignment fraction over replicas, one curve point per N.
pub fn measure_alignment_curve(
    task: AlignTask,
    n_values: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<AlignmentCurve> {
    let rho: Vec<f64> = n_values
        .par_iter()
        .map(|&n| -> Result<f64> {
            let mut frac_sum = 0.0;
            let mut used = 0usize;
            for r in 0..replicas {
                let s = measure_alignment_once(task, n, seed ^ (r as u64).wrapping_mul(0x9E37))?;
                if s.counted > 0 {
                    frac_sum += s.aligned as f64 / s.counted as f64;
                    used += 1;
                }
            }
            Ok(frac_sum / used.max(1) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentCurve {
        n_values: n_values.to_vec(),
        rho,
        provenance: Provenance::Measured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_one_is_one() {
        let c = rho_predict(
            &AlignmentModelParams { plasticity: 3.7, complexity: 12.0 },
            5,
        )
        .unwrap();
        assert_eq!(c.rho[0], 1.0);
    }

    #[test]
    fn hand_evaluated_second_term() {
        let c = rho_predict(&AlignmentModelParams { plasticity: 1.0, complexity: 1.0 }, 2)
            .unwrap();
        assert!((c.rho[1] - 0.9210).abs() < 1e-4, "rho_2 = {}", c.rho[1]);
    }

    #[test]
    fn zero_complexity_small_plasticity_is_all_ones() {
        let c = rho_predict(
            &AlignmentModelParams { plasticity: 1e-9, complexity: 0.0 },
            20,
        )
        .unwrap();
        assert!(c.rho.iter().all(|&r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn huge_plasticity_is_all_ones() {
        let c = rho_predict(
            &AlignmentModelParams { plasticity: 1e12, complexity: 30.0 },
            50,
        )
        .unwrap();
        assert!(c.rho.iter().all(|&r| (r - 1.0).abs() < 1e-6));
    }

    #[test]
    fn recursion_converges_to_limit_in_range() {
        let c = rho_predict(
            &AlignmentModelParams { plasticity: 12.9, complexity: 6.4 },
            5000,
        )
        .unwrap();
        let last = c.rho[4999];
        let prev = c.rho[4998];
        assert!((last - prev).abs() < 1e-6);
        assert!((0.5..=1.0).contains(&last), "limit = {last}");
    }

    #[test]
    fn fit_recovers_generating_params() {
        let truth = AlignmentModelParams { plasticity: 12.9, complexity: 6.4 };
        let curve = rho_predict(&truth, 64).unwrap();
        let fit = rho_fit(&curve).unwrap();
        assert!(
            (fit.params.plasticity - truth.plasticity).abs() / truth.plasticity < 0.05,
            "A = {}",
            fit.params.plasticity
        );
        assert!(
            (fit.params.complexity - truth.complexity).abs() / truth.complexity < 0.05,
            "C~ = {}",
            fit.params.complexity
        );
        assert!(!fit.flat);
    }

    #[test]
    fn fit_flags_flat_curves() {
        let curve = AlignmentCurve {
            n_values: (1..=10).collect(),
            rho: vec![1.0; 10],
            provenance: Provenance::Measured,
        };
        let fit = rho_fit(&curve).unwrap();
        assert!(fit.flat);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn noisy_fit_residual_below_noise_floor() {
        let truth = AlignmentModelParams { plasticity: 1.0, complexity: 1.0 };
        let mut curve = rho_predict(&truth, 32).unwrap();
        let mut rng = keyed_rng(5, &[9]);
        for r in curve.rho.iter_mut() {
            *r += rng.gen_range(-0.01..0.01);
        }
        let fit = rho_fit(&curve).unwrap();
        // noise floor: 32 points with variance (0.01)^2/3
        assert!(fit.residual < 32.0 * 1e-4, "residual = {}", fit.residual);
    }

    #[test]
    fn single_example_update_is_aligned() {
        for seed in 0..5 {
            let s = measure_alignment_once(AlignTask::Linear, 1, seed).unwrap();
            assert_eq!(s.aligned, s.counted, "seed {seed}");
            assert_eq!(s.counted, 1);
        }
    }

    #[test]
    fn measurement_is_reproducible() {
        let a = measure_alignment_curve(AlignTask::Sine, &[1, 4, 8], 5, 3).unwrap();
        let b = measure_alignment_curve(AlignTask::Sine, &[1, 4, 8], 5, 3).unwrap();
        assert_eq!(a.rho, b.rho);
    }
}
