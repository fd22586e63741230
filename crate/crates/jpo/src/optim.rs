//! Classical per-problem optimizers (BFGS with strong-Wolfe line search,
//! fixed-step gradient descent, Adam) and the per-example gradient
//! reduction strategies (percentile clipping, majority voting).

use rayon::prelude::*;

use crate::error::{JpoError, Result};

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_bracketing_steps: usize,
    /// Percentile for per-example gradient clipping, in (0, 100].
    pub clip_percentile: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-2,
            max_iterations: 200,
            gradient_tolerance: 1e-12,
            c1: 1e-4,
            c2: 0.9,
            max_bracketing_steps: 25,
            clip_percentile: 90.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    Stationary,
    LineSearchFailure,
    MaxIterations,
    NonFinite,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct RunTrajectory {
    pub x: Vec<f64>,
    pub loss: f64,
    /// Loss at every accepted iterate, starting with the initial point.
    pub losses: Vec<f64>,
    pub iterates: Vec<Vec<f64>>,
    pub reason: Termination,
    pub iterations: usize,
}

/// Loss and gradient at a point.
pub type Objective<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with a strong-Wolfe line search.
pub fn bfgs_minimize(f: &mut Objective, x0: &[f64], cfg: &OptimizerConfig) -> Result<RunTrajectory> {
    let dim = x0.len();
    let (mut fx, mut gx) = f(x0)?;
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(JpoError::NonFinite("objective at x0".into()));
    }
    let mut x = x0.to_vec();
    let mut losses = vec![fx];
    let mut iterates = vec![x.clone()];

    let mut h = identity(dim);
    let mut reason = Termination::MaxIterations;
    let mut iterations = 0;

    if norm(&gx) == 0.0 {
        reason = Termination::Stationary;
    } else if norm(&gx) < cfg.gradient_tolerance {
        reason = Termination::GradientTolerance;
    } else {
        for _ in 0..cfg.max_iterations {
            let mut p = mat_vec_neg(&h, &gx);
            if dot(&p, &gx) >= 0.0 {
                h = identity(dim);
                p = gx.iter().map(|g| -g).collect();
            }
            let ls = match strong_wolfe(f, &x, fx, &gx, &p, cfg)? {
                Some(ls) => ls,
                None => {
                    reason = Termination::LineSearchFailure;
                    break;
                }
            };
            iterations += 1;
            let s: Vec<f64> = p.iter().map(|pi| pi * ls.alpha).collect();
            let y: Vec<f64> = ls.grad.iter().zip(&gx).map(|(gn, go)| gn - go).collect();
            for (xi, si) in x.iter_mut().zip(&s) {
                *xi += si;
            }
            fx = ls.loss;
            gx = ls.grad;
            losses.push(fx);
            iterates.push(x.clone());
            if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
                reason = Termination::NonFinite;
                break;
            }
            let sy = dot(&s, &y);
            if sy > 1e-10 * norm(&s) * norm(&y) {
                bfgs_update(&mut h, &s, &y, sy);
            } else {
                // curvature condition violated: reset to identity
                h = identity(dim);
            }
            let gn = norm(&gx);
            if gn == 0.0 {
                reason = Termination::Stationary;
                break;
            }
            if gn < cfg.gradient_tolerance {
                reason = Termination::GradientTolerance;
                break;
            }
        }
    }
    Ok(RunTrajectory {
        x,
        loss: fx,
        losses,
        iterates,
        reason,
        iterations,
    })
}

/// Run independent BFGS solves for a batch, in parallel, results in index order.
pub fn bfgs_minimize_batch<F>(objectives: Vec<F>, x0s: &[Vec<f64>], cfg: &OptimizerConfig) -> Vec<Result<RunTrajectory>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + Send,
{
    objectives
        .into_par_iter()
        .zip(x0s.par_iter())
        .map(|(mut obj, x0)| bfgs_minimize(&mut obj, x0, cfg))
        .collect()
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec_neg(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| -(0..n).map(|j| m[i * n + j] * v[j]).sum::<f64>())
        .collect()
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
    let mut hy = vec![0.0; n];
    for i in 0..n {
        hy[i] = (0..n).map(|j| h[i * n + j] * y[j]).sum();
    }
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                + rho * rho * yhy * s[i] * s[j]
                + rho * s[i] * s[j];
        }
    }
}

struct LineSearchResult {
    alpha: f64,
    loss: f64,
    grad: Vec<f64>,
}

/// Strong-Wolfe line search (bracket + zoom with bisection/interpolation).
fn strong_wolfe(
    f: &mut Objective,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    p: &[f64],
    cfg: &OptimizerConfig,
) -> Result<Option<LineSearchResult>> {
    let d0 = dot(g0, p);
    if d0 >= 0.0 {
        return Ok(None);
    }
    let eval = |f: &mut Objective, alpha: f64| -> Result<(f64, Vec<f64>, f64)> {
        let xa: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + alpha * pi).collect();
        let (fa, ga) = f(&xa)?;
        let da = dot(&ga, p);
        Ok((fa, ga, da))
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = 1.0;
    let mut lo = None;
    let mut hi = None;
    for i in 0..cfg.max_bracketing_steps {
        let (fa, ga, da) = eval(f, alpha)?;
        if !fa.is_finite() {
            // step into a non-finite region: shrink
            alpha *= 0.25;
            continue;
        }
        if fa > f0 + cfg.c1 * alpha * d0 || (i > 0 && fa >= f_prev) {
            lo = Some((alpha_prev, f_prev));
            hi = Some(alpha);
            break;
        }
        if da.abs() <= -cfg.c2 * d0 {
            return Ok(Some(LineSearchResult { alpha, loss: fa, grad: ga }));
        }
        if da >= 0.0 {
            lo = Some((alpha, fa));
            hi = Some(alpha_prev);
            break;
        }
        alpha_prev = alpha;
        f_prev = fa;
        alpha *= 2.0;
    }
    let (mut alo, mut flo) = match lo {
        Some(v) => v,
        None => return Ok(None),
    };
    let mut ahi = hi.unwrap();

    for _ in 0..cfg.max_bracketing_steps {
        let amid = 0.5 * (alo + ahi);
        let (fa, ga, da) = eval(f, amid)?;
        if !fa.is_finite() || fa > f0 + cfg.c1 * amid * d0 || fa >= flo {
            ahi = amid;
        } else {
            if da.abs() <= -cfg.c2 * d0 {
                return Ok(Some(LineSearchResult { alpha: amid, loss: fa, grad: ga }));
            }
            if da * (ahi - alo) >= 0.0 {
                ahi = alo;
            }
            alo = amid;
            flo = fa;
        }
        if (ahi - alo).abs() < 1e-14 {
            break;
        }
    }
    // Accept the best sufficient-decrease point even if curvature failed.
    if alo > 0.0 && flo < f0 {
        let (fa, ga, _) = eval(f, alo)?;
        return Ok(Some(LineSearchResult { alpha: alo, loss: fa, grad: ga }));
    }
    Ok(None)
}

/// Fixed-step steepest descent with the same trajectory contract as BFGS.
pub fn gd_minimize(f: &mut Objective, x0: &[f64], cfg: &OptimizerConfig) -> Result<RunTrajectory> {
    let (mut fx, mut gx) = f(x0)?;
    if !fx.is_finite() {
        return Err(JpoError::NonFinite("objective at x0".into()));
    }
    let f0 = fx;
    let mut x = x0.to_vec();
    let mut losses = vec![fx];
    let mut iterates = vec![x.clone()];
    let mut reason = Termination::MaxIterations;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        let gn = norm(&gx);
        if gn == 0.0 {
            reason = Termination::Stationary;
            break;
        }
        if gn < cfg.gradient_tolerance {
            reason = Termination::GradientTolerance;
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&gx) {
            *xi -= cfg.step_size * gi;
        }
        iterations += 1;
        let (fnew, gnew) = f(&x)?;
        fx = fnew;
        gx = gnew;
        losses.push(fx);
        iterates.push(x.clone());
        if !fx.is_finite() || fx > 1e6 * (f0.abs() + 1.0) {
            reason = Termination::Diverged;
            break;
        }
    }
    Ok(RunTrajectory { x, loss: fx, losses, iterates, reason, iterations })
}

/// Adam accumulator state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub skipped: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, skipped: 0 }
    }
}

/// One Adam step applied to `x` in place. Non-finite gradients skip the step.
pub fn adam_step(state: &mut AdamState, x: &mut [f64], grad: &[f64], step_size: f64) -> Result<()> {
    if grad.len() != state.m.len() || grad.len() != x.len() {
        return Err(JpoError::ShapeMismatch {
            op: "adam_step",
            detail: format!("grad {} vs state {}", grad.len(), state.m.len()),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        // moments still decay so a stuck stream does not freeze the scale
        for mi in state.m.iter_mut() {
            *mi *= ADAM_BETA1;
        }
        for vi in state.v.iter_mut() {
            *vi *= ADAM_BETA2;
        }
        return Ok(());
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..x.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        x[i] -= step_size * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Per-example gradient clipping at the nearest-rank `p`-th percentile of the
/// per-example L2 norms. Never increases a norm; preserves directions.
pub fn clip_percentile(grads: &[Vec<f64>], p: f64) -> Result<Vec<Vec<f64>>> {
    if grads.is_empty() {
        return Err(JpoError::InvalidArg("empty gradient list".into()));
    }
    if !(0.0 < p && p <= 100.0) {
        return Err(JpoError::InvalidArg(format!("percentile {p} not in (0, 100]")));
    }
    let norms: Vec<f64> = grads.iter().map(|g| norm(g)).collect();
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0 * grads.len() as f64).ceil() as usize).max(1) - 1;
    let threshold = sorted[rank.min(sorted.len() - 1)];
    Ok(grads
        .iter()
        .zip(&norms)
        .map(|(g, &n)| {
            if n > threshold && n > 0.0 {
                let s = threshold / n;
                g.iter().map(|v| v * s).collect()
            } else {
                g.clone()
            }
        })
        .collect())
}

/// Per-coordinate sign of the majority of per-example gradient signs.
pub fn majority_vote_reduce(grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    if grads.is_empty() {
        return Err(JpoError::InvalidArg("empty gradient list".into()));
    }
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(JpoError::ShapeMismatch {
            op: "majority_vote_reduce",
            detail: "gradient dimensions differ".into(),
        });
    }
    // f64::signum maps +-0.0 to +-1.0, so spell out the three-way sign
    fn sign(v: f64) -> f64 {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
    let mut out = vec![0.0; dim];
    for (j, slot) in out.iter_mut().enumerate() {
        let votes: f64 = grads.iter().map(|g| sign(g[j])).sum();
        *slot = sign(votes);
    }
    Ok(out)
}
