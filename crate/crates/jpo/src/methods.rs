//! The four solution methods: end-to-end JPO training, supervised training
//! on synthetic data, the neural adjoint method, and BFGS refinement, plus
//! the classical per-example baselines.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{DiffValue, Tape};
use crate::error::{JpoError, Result};
use crate::net::{
    freeze_normalization, net_forward, net_init, param_count, NetSpec,
};
use crate::optim::{
    adam_step, bfgs_minimize, clip_percentile, gd_minimize, AdamState, OptimizerConfig,
    RunTrajectory,
};
use crate::problems::{
    batch_loss, example_objective, ks, neutral_start, sample_prior, Family, ProblemSet,
    SolutionBatch,
};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Jpo,
    Supervised,
    NeuralAdjoint,
    Bfgs,
    Gd,
}

impl MethodKind {
    pub fn tag(&self) -> &'static str {
        match self {
            MethodKind::Jpo => "jpo",
            MethodKind::Supervised => "supervised",
            MethodKind::NeuralAdjoint => "neural-adjoint",
            MethodKind::Bfgs => "bfgs",
            MethodKind::Gd => "gd",
        }
    }

    pub fn parse(s: &str) -> Result<MethodKind> {
        match s {
            "jpo" => Ok(MethodKind::Jpo),
            "supervised" => Ok(MethodKind::Supervised),
            "neural-adjoint" => Ok(MethodKind::NeuralAdjoint),
            "bfgs" => Ok(MethodKind::Bfgs),
            "gd" => Ok(MethodKind::Gd),
            other => Err(JpoError::InvalidArg(format!("unknown method '{other}'"))),
        }
    }
}

/// BFGS refinement appended to a network method's result.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub start: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: MethodKind,
    pub family: Family,
    /// Mean finite per-example loss at every iteration.
    pub curve: Vec<f64>,
    /// Per-example loss at every logged iteration (NaN where diverged).
    pub loss_history: Vec<Vec<f64>>,
    pub history: Vec<SolutionBatch>,
    pub best_estimate: Vec<Vec<f64>>,
    pub best_loss: Vec<f64>,
    pub final_estimate: Vec<Vec<f64>>,
    pub final_loss: Vec<f64>,
    pub refinement: Option<Refinement>,
    pub events: Vec<String>,
}

impl MethodResult {
    /// Losses after refinement if present, else the best recorded losses.
    pub fn refined_loss(&self) -> &[f64] {
        match &self.refinement {
            Some(r) => &r.losses,
            None => &self.best_loss,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub clip_percentile: f64,
    pub synthetic_size: usize,
    pub minibatch: usize,
    /// Iterations for the per-example input optimization (neural adjoint).
    pub adjoint_iterations: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_family(family: Family, seed: u64) -> Self {
        let iterations = match family {
            Family::Wavepacket => 2000,
            Family::Billiards => 3000,
            Family::Ks => 1000,
            Family::Arm => 2000,
        };
        // billiards needs a gentler step: large updates fling stuck examples
        // into the no-collision region where gradients vanish
        let learning_rate = match family {
            Family::Billiards => 1e-4,
            _ => 1e-2,
        };
        TrainConfig {
            iterations,
            learning_rate,
            clip_percentile: 90.0,
            synthetic_size: 4096,
            minibatch: 256,
            adjoint_iterations: 400,
            seed,
        }
    }
}

/// Default solution network per family.
pub fn default_net_spec(family: Family) -> NetSpec {
    match family {
        Family::Wavepacket => crate::net::wavepacket_net_spec(),
        Family::Billiards => crate::net::billiards_net_spec(),
        Family::Ks => crate::net::ks_net_spec(),
        Family::Arm => crate::net::arm_net_spec(),
    }
}

/// Network input tensor (data, shape) for a problem set.
pub fn net_input_data(set: &ProblemSet) -> (Vec<f64>, Vec<usize>) {
    match set.family {
        Family::Wavepacket => {
            let flat: Vec<f64> = set.targets.iter().flatten().copied().collect();
            (flat, vec![set.n, 1, 256])
        }
        Family::Billiards => {
            let mut flat = Vec::with_capacity(set.n * 4);
            for i in 0..set.n {
                let p2 = &set.gammas[i];
                let t = &set.targets[i];
                flat.extend([p2[0], p2[1], t[0] - p2[0], t[1] - p2[1]]);
            }
            (flat, vec![set.n, 4])
        }
        Family::Ks => {
            let mut flat = Vec::with_capacity(set.n * 2 * 128);
            for i in 0..set.n {
                flat.extend(&set.gammas[i]);
                flat.extend(&set.targets[i]);
            }
            (flat, vec![set.n, 2, 128])
        }
        Family::Arm => {
            let flat: Vec<f64> = set.targets.iter().flatten().copied().collect();
            (flat, vec![set.n, 2])
        }
    }
}

/// Affine map from raw network outputs to solution candidates, chosen so a
/// near-zero output lands on the family's neutral start.
fn output_transform(family: Family) -> (f64, Vec<f64>) {
    match family {
        Family::Wavepacket => (127.5, vec![128.5]),
        Family::Billiards => (1.0, vec![1.0, 0.0]),
        Family::Ks => (1.0, ks::PRIOR_MEAN.to_vec()),
        Family::Arm => (1.0, vec![0.0; 4]),
    }
}

fn apply_output_transform(
    tape: &mut Tape,
    family: Family,
    raw: DiffValue,
) -> Result<DiffValue> {
    let (scale, offset) = output_transform(family);
    let scaled = tape.scale(raw, scale);
    let off = tape.constant(offset.clone(), vec![offset.len()])?;
    tape.bias_row(scaled, off)
}

/// Evaluate true per-example losses at fixed candidate solutions.
pub fn evaluate_losses(set: &ProblemSet, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = set.family.solution_dim();
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let x = tape.constant(flat, vec![set.n, dim])?;
    let (losses, div) = batch_loss(&mut tape, set, x)?;
    let mut out = tape.data(losses).to_vec();
    for (l, d) in out.iter_mut().zip(&div.diverged_at) {
        if d.is_some() {
            *l = f64::NAN;
        }
    }
    Ok(out)
}

struct JpoRun {
    result: MethodResult,
    accepted: bool,
}

/// End-to-end JPO training: Adam on theta with per-example percentile
/// clipping of the solution-space gradients.
pub fn jpo_train(set: &ProblemSet, spec: &NetSpec, cfg: &TrainConfig) -> Result<MethodResult> {
    let (input_data, input_shape) = net_input_data(set);
    let mut last = None;
    // learning-rate protocol: start high, divide by 10 until the loss
    // decreases over the first 50 iterations
    for k in 0..4 {
        let lr = cfg.learning_rate / 10f64.powi(k);
        let run = jpo_run(set, spec, cfg, lr, &input_data, &input_shape)?;
        let accepted = run.accepted;
        last = Some(run.result);
        if accepted {
            break;
        }
    }
    let mut result = last.unwrap();
    result.events.push(format!("iterations={}", result.curve.len()));
    Ok(result)
}

fn jpo_run(
    set: &ProblemSet,
    spec: &NetSpec,
    cfg: &TrainConfig,
    lr: f64,
    input_data: &[f64],
    input_shape: &[usize],
) -> Result<JpoRun> {
    let dim = set.family.solution_dim();
    let total = param_count(spec)?;
    let mut params = net_init(spec, &mut keyed_rng(cfg.seed, &[0xA001]))?;
    freeze_normalization(&mut params, input_data);
    let mut adam = AdamState::new(total);
    let mut events = Vec::new();

    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best_loss = vec![f64::INFINITY; set.n];
    let mut best_estimate = vec![vec![0.0; dim]; set.n];
    let mut final_estimate = vec![vec![0.0; dim]; set.n];
    let mut accepted = true;

    for iter in 0..cfg.iterations {
        let mut tape = Tape::new();
        let theta = tape.input(params.theta.clone(), vec![total])?;
        let inp = tape.constant(input_data.to_vec(), input_shape.to_vec())?;
        let raw = net_forward(&mut tape, spec, &params, theta, inp)?;
        let x = apply_output_transform(&mut tape, set.family, raw)?;
        let (losses, div) = batch_loss(&mut tape, set, x)?;
        let loss_data = tape.data(losses).to_vec();
        let x_data = tape.data(x).to_vec();

        let mut recorded = vec![f64::NAN; set.n];
        for i in 0..set.n {
            if div.diverged_at[i].is_some() {
                continue;
            }
            let l = loss_data[i];
            recorded[i] = l;
            let xi = &x_data[i * dim..(i + 1) * dim];
            final_estimate[i].copy_from_slice(xi);
            if l.is_finite() && l < best_loss[i] {
                best_loss[i] = l;
                best_estimate[i].copy_from_slice(xi);
            }
        }
        if div.any() {
            let rows: Vec<usize> = div
                .diverged_at
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.map(|_| i))
                .collect();
            events.push(format!("iter {iter}: diverged rows {rows:?}"));
        }
        let finite: Vec<f64> = recorded.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        curve.push(mean);
        loss_history.push(recorded);
        history.push(SolutionBatch::from_flat(set.family, &x_data, iter)?);

        // two-stage backprop: per-example solution gradients first, clipped,
        // then pushed through the network into theta
        let scalar = tape.sum(losses);
        let g_x = tape.backward_barrier(scalar, &[x])?;
        let gx = g_x.wrt_or_zero(x, set.n * dim);
        let per_example: Vec<Vec<f64>> =
            (0..set.n).map(|i| gx[i * dim..(i + 1) * dim].to_vec()).collect();
        let clipped = clip_percentile(&per_example, cfg.clip_percentile)?;
        let seeds: Vec<f64> = clipped.into_iter().flatten().collect();
        let g_theta = tape.backward_from_seeds(&[(x, seeds)])?;
        let grad = g_theta.wrt_or_zero(theta, total);
        adam_step(&mut adam, &mut params.theta, &grad, lr)?;

        if iter == 49 && cfg.iterations > 50 {
            let first = curve[0];
            if !mean.is_finite() || !first.is_finite() || mean >= first {
                accepted = false;
                events.push(format!("lr {lr:.0e} rejected after 50 iterations"));
                break;
            }
        }
    }

    // examples that never produced a finite loss fall back to the neutral start
    let neutral = neutral_start(set.family);
    for i in 0..set.n {
        if !best_loss[i].is_finite() {
            best_estimate[i] = neutral.clone();
            final_estimate[i] = neutral.clone();
            let (l, _) = example_objective(set, i, &neutral)?;
            best_loss[i] = l;
        }
    }
    let final_loss = evaluate_losses(set, &final_estimate)?;
    Ok(JpoRun {
        result: MethodResult {
            method: MethodKind::Jpo,
            family: set.family,
            curve,
            loss_history,
            history,
            best_estimate,
            best_loss,
            final_estimate,
            final_loss,
            refinement: None,
            events,
        },
        accepted,
    })
}

/// Forward process output for a synthetic solution, used to build supervised
/// and surrogate training sets.
fn synthetic_observation(
    family: Family,
    x: &[f64],
    gamma: &[f64],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Option<Vec<f64>>> {
    use crate::problems::{arm, billiards, wavepacket};
    match family {
        Family::Wavepacket => {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, 1.0).unwrap();
            let y: Vec<f64> = (1..=wavepacket::SAMPLES)
                .map(|t| {
                    wavepacket::waveform(t as f64 - wavepacket::clamp_t0(x[0]))
                        + wavepacket::NOISE_STD * normal.sample(rng)
                })
                .collect();
            Ok(Some(y))
        }
        Family::Billiards => Ok(Some(billiards::final_ball2(x, gamma).to_vec())),
        Family::Ks => match ks::forward(x[0], x[1], gamma, ks::STEPS) {
            Ok(y) => Ok(Some(y)),
            Err(JpoError::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        },
        Family::Arm => Ok(Some(arm::end_effector(x).to_vec())),
    }
}

fn synthetic_gamma(family: Family, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    match family {
        Family::Billiards => vec![1.0, rng.gen_range(0.0..1.0)],
        Family::Ks => ks::random_initial_state(rng),
        _ => Vec::new(),
    }
}

/// Supervised training: fit the net on synthetic (observation -> solution)
/// pairs drawn from the prior, then infer solutions for the target problems.
pub fn supervised_train(
    set: &ProblemSet,
    spec: &NetSpec,
    cfg: &TrainConfig,
) -> Result<MethodResult> {
    let family = set.family;
    let dim = family.solution_dim();
    let mut rng = keyed_rng(cfg.seed, &[0xB001]);
    let mut xs = Vec::with_capacity(cfg.synthetic_size);
    let mut gammas = Vec::with_capacity(cfg.synthetic_size);
    let mut ys = Vec::with_capacity(cfg.synthetic_size);
    while xs.len() < cfg.synthetic_size {
        let gamma = synthetic_gamma(family, &mut rng);
        let x = sample_prior(family, &mut rng);
        if let Some(y) = synthetic_observation(family, &x, &gamma, &mut rng)? {
            xs.push(x);
            gammas.push(gamma);
            ys.push(y);
        }
    }
    let synth = ProblemSet::new(family, cfg.seed, gammas, ys, None)?;
    let (synth_inputs, synth_shape) = net_input_data(&synth);

    let total = param_count(spec)?;
    let mut params = net_init(spec, &mut keyed_rng(cfg.seed, &[0xB002]))?;
    freeze_normalization(&mut params, &synth_inputs);
    let mut adam = AdamState::new(total);
    let (scale, offset) = output_transform(family);
    // regression targets in raw-output units, inverting the transform
    let raw_targets: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.iter().zip(&offset).map(|(v, o)| (v - o) / scale).collect())
        .collect();

    let example_len: usize = synth_shape[1..].iter().product();
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mb = cfg.minibatch.min(cfg.synthetic_size);
    let mut mb_shape = synth_shape.clone();
    mb_shape[0] = mb;
    for _ in 0..cfg.iterations {
        let idx: Vec<usize> =
            (0..mb).map(|_| rng.gen_range(0..cfg.synthetic_size)).collect();
        let mut batch = Vec::with_capacity(mb * example_len);
        let mut target = Vec::with_capacity(mb * dim);
        for &j in &idx {
            batch.extend(&synth_inputs[j * example_len..(j + 1) * example_len]);
            target.extend(&raw_targets[j]);
        }
        let mut tape = Tape::new();
        let theta = tape.input(params.theta.clone(), vec![total])?;
        let inp = tape.constant(batch, mb_shape.clone())?;
        let raw = net_forward(&mut tape, spec, &params, theta, inp)?;
        let tv = tape.constant(target, vec![mb, dim])?;
        let r = tape.sub(raw, tv)?;
        let r2 = tape.mul(r, r)?;
        let loss = tape.mean(r2);
        curve.push(tape.data(loss)[0]);
        let grads = tape.backward(loss)?;
        let grad = grads.wrt_or_zero(theta, total);
        adam_step(&mut adam, &mut params.theta, &grad, 1e-3)?;
    }

    // inference on the target problems
    let (input_data, input_shape) = net_input_data(set);
    let mut tape = Tape::new();
    let theta = tape.input(params.theta.clone(), vec![total])?;
    let inp = tape.constant(input_data, input_shape)?;
    let raw = net_forward(&mut tape, spec, &params, theta, inp)?;
    let x = apply_output_transform(&mut tape, family, raw)?;
    let x_data = tape.data(x).to_vec();
    let estimates: Vec<Vec<f64>> =
        (0..set.n).map(|i| x_data[i * dim..(i + 1) * dim].to_vec()).collect();
    let losses = evaluate_losses(set, &estimates)?;

    Ok(MethodResult {
        method: MethodKind::Supervised,
        family,
        curve,
        loss_history: vec![losses.clone()],
        history: vec![SolutionBatch::from_flat(family, &x_data, 0)?],
        best_estimate: estimates.clone(),
        best_loss: losses.clone(),
        final_estimate: estimates,
        final_loss: losses,
        refinement: None,
        events: Vec::new(),
    })
}

/// Surrogate spec: solution plus conditioning in, observation out.
fn surrogate_spec(family: Family) -> Result<NetSpec> {
    // raw inputs: the encoding's base frequency folds these input ranges,
    // which makes regression much harder without helping the fit
    match family {
        Family::Billiards => Ok(NetSpec::s2s(4, 0, vec![128, 128, 128], 2)),
        Family::Arm => Ok(NetSpec::s2s(4, 0, vec![64, 64], 2)),
        other => Err(JpoError::InvalidArg(format!(
            "neural adjoint needs a scalar solution family, got {}",
            other.tag()
        ))),
    }
}

fn surrogate_input(family: Family, x: &[f64], gamma: &[f64]) -> Vec<f64> {
    match family {
        Family::Billiards => vec![x[0], x[1], gamma[0], gamma[1]],
        _ => x.to_vec(),
    }
}

/// Per-dimension training box of the solution prior.
fn prior_box(family: Family) -> Vec<(f64, f64)> {
    match family {
        Family::Wavepacket => vec![(26.0, 230.0)],
        Family::Billiards => vec![(0.25, 2.0), (-1.0, 1.0)],
        Family::Ks => ks::PRIOR_BOX.to_vec(),
        Family::Arm => {
            let a = std::f64::consts::FRAC_PI_2;
            vec![(-1.0, 1.0), (-a, a), (-a, a), (-a, a)]
        }
    }
}

pub const BOUNDARY_SHARPNESS: f64 = 64.0;

/// Neural adjoint: fit a surrogate of F on synthetic data, then optimize
/// each problem's solution against the frozen surrogate plus a boundary
/// loss keeping iterates inside the training box.
pub fn neural_adjoint_solve(set: &ProblemSet, cfg: &TrainConfig) -> Result<MethodResult> {
    let family = set.family;
    let dim = family.solution_dim();
    let spec = surrogate_spec(family)?;
    let mut rng = keyed_rng(cfg.seed, &[0xC001]);

    let mut inputs = Vec::with_capacity(cfg.synthetic_size);
    let mut outputs = Vec::with_capacity(cfg.synthetic_size);
    while inputs.len() < cfg.synthetic_size {
        let gamma = synthetic_gamma(family, &mut rng);
        let x = sample_prior(family, &mut rng);
        if let Some(y) = synthetic_observation(family, &x, &gamma, &mut rng)? {
            inputs.push(surrogate_input(family, &x, &gamma));
            outputs.push(y);
        }
    }

    let total = param_count(&spec)?;
    let mut params = net_init(&spec, &mut keyed_rng(cfg.seed, &[0xC002]))?;
    let flat_inputs: Vec<f64> = inputs.iter().flatten().copied().collect();
    freeze_normalization(&mut params, &flat_inputs);
    let raw_dim = spec.input_dim;
    let out_dim = outputs[0].len();
    let mut adam = AdamState::new(total);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mb = cfg.minibatch.min(inputs.len());
    for _ in 0..cfg.iterations {
        let idx: Vec<usize> = (0..mb).map(|_| rng.gen_range(0..inputs.len())).collect();
        let mut batch = Vec::with_capacity(mb * raw_dim);
        let mut target = Vec::with_capacity(mb * out_dim);
        for &j in &idx {
            batch.extend(&inputs[j]);
            target.extend(&outputs[j]);
        }
        let mut tape = Tape::new();
        let theta = tape.input(params.theta.clone(), vec![total])?;
        let inp = tape.constant(batch, vec![mb, raw_dim])?;
        let pred = net_forward(&mut tape, &spec, &params, theta, inp)?;
        let tv = tape.constant(target, vec![mb, out_dim])?;
        let r = tape.sub(pred, tv)?;
        let r2 = tape.mul(r, r)?;
        let loss = tape.mean(r2);
        curve.push(tape.data(loss)[0]);
        let grads = tape.backward(loss)?;
        adam_step(&mut adam, &mut params.theta, &grads.wrt_or_zero(theta, total), 1e-3)?;
    }
    let fit_residual = *curve.last().unwrap_or(&f64::NAN);
    let mut events = Vec::new();
    if !(fit_residual < 0.05) {
        events.push(format!("surrogate fit residual {fit_residual:.4} above threshold"));
    }

    // stage 2: per-example gradient descent on the frozen surrogate
    let box_ = prior_box(family);
    let start: Vec<f64> = box_.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let params = &params;
    let spec = &spec;
    let box_ref = &box_;
    let per_example: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..set.n)
        .into_par_iter()
        .map(|i| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            let gamma = set.gammas[i].clone();
            let y = set.targets[i].clone();
            let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut tape = Tape::new();
                let xv = tape.input(x.to_vec(), vec![1, dim])?;
                let full = match family {
                    Family::Billiards => {
                        let g = tape.constant(gamma.clone(), vec![1, 2])?;
                        tape.concat(&[xv, g], 1)?
                    }
                    _ => xv,
                };
                let theta = tape.constant(params.theta.clone(), vec![total])?;
                let pred = net_forward(&mut tape, spec, params, theta, full)?;
                let tv = tape.constant(y.clone(), vec![1, out_dim])?;
                let r = tape.sub(pred, tv)?;
                let mut loss = tape.norm_sq(r);
                // boundary loss per dimension
                for (j, (lo, hi)) in box_ref.iter().enumerate() {
                    let xj = tape.column(xv, j)?;
                    let width = hi - lo;
                    let over = tape.add_const(xj, -*hi);
                    let neg = tape.neg(xj);
                    let under = tape.add_const(neg, *lo);
                    let worst = tape.max(over, under)?;
                    let scaled = tape.scale(worst, 1.0 / width);
                    let b = tape.softplus(scaled, BOUNDARY_SHARPNESS);
                    let b = tape.sum(b);
                    loss = tape.add(loss, b)?;
                }
                let g = tape.backward(loss)?;
                Ok((tape.data(loss)[0], g.wrt_or_zero(xv, dim)))
            };
            let gd_cfg = OptimizerConfig {
                step_size: 0.02,
                max_iterations: cfg.adjoint_iterations,
                gradient_tolerance: 1e-12,
                ..Default::default()
            };
            let traj = gd_minimize(&mut obj, &start, &gd_cfg)?;
            Ok((traj.iterates, traj.losses))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    // pick each example's best iterate by true objective
    let iters = per_example.iter().map(|(it, _)| it.len()).max().unwrap_or(0);
    let mut best_estimate = vec![start.clone(); set.n];
    let mut best_loss = vec![f64::INFINITY; set.n];
    let mut final_estimate = Vec::with_capacity(set.n);
    let mut history = Vec::new();
    let mut loss_history = Vec::new();
    for t in 0..iters {
        let snapshot: Vec<Vec<f64>> = per_example
            .iter()
            .map(|(it, _)| it[t.min(it.len() - 1)].clone())
            .collect();
        let losses = evaluate_losses(set, &snapshot)?;
        for i in 0..set.n {
            if losses[i].is_finite() && losses[i] < best_loss[i] {
                best_loss[i] = losses[i];
                best_estimate[i] = snapshot[i].clone();
            }
        }
        let flat: Vec<f64> = snapshot.iter().flatten().copied().collect();
        history.push(SolutionBatch::from_flat(family, &flat, t)?);
        loss_history.push(losses);
    }
    for (it, _) in &per_example {
        final_estimate.push(it.last().unwrap().clone());
    }
    let final_loss = evaluate_losses(set, &final_estimate)?;
    let curve_true: Vec<f64> = loss_history
        .iter()
        .map(|ls| {
            let f: Vec<f64> = ls.iter().copied().filter(|v| v.is_finite()).collect();
            f.iter().sum::<f64>() / f.len().max(1) as f64
        })
        .collect();

    Ok(MethodResult {
        method: MethodKind::NeuralAdjoint,
        family,
        curve: curve_true,
        loss_history,
        history,
        best_estimate,
        best_loss,
        final_estimate,
        final_loss,
        refinement: None,
        events,
    })
}

/// Classical per-example baseline from the family's neutral start.
pub fn classical_solve(
    set: &ProblemSet,
    kind: MethodKind,
    cfg: &OptimizerConfig,
) -> Result<MethodResult> {
    if kind != MethodKind::Bfgs && kind != MethodKind::Gd {
        return Err(JpoError::InvalidArg("classical_solve takes bfgs or gd".into()));
    }
    let dim = set.family.solution_dim();
    let start = neutral_start(set.family);
    let trajectories: Vec<Result<RunTrajectory>> = (0..set.n)
        .into_par_iter()
        .map(|i| {
            let mut obj = |x: &[f64]| example_objective(set, i, x);
            match kind {
                MethodKind::Bfgs => bfgs_minimize(&mut obj, &start, cfg),
                _ => gd_minimize(&mut obj, &start, cfg),
            }
        })
        .collect();
    let trajectories: Vec<RunTrajectory> =
        trajectories.into_iter().collect::<Result<Vec<_>>>()?;

    let iters = trajectories.iter().map(|t| t.losses.len()).max().unwrap_or(0);
    let mut curve = Vec::with_capacity(iters);
    let mut loss_history = Vec::with_capacity(iters);
    let mut history = Vec::with_capacity(iters);
    for t in 0..iters {
        let row: Vec<f64> = trajectories
            .iter()
            .map(|tr| tr.losses[t.min(tr.losses.len() - 1)])
            .collect();
        curve.push(row.iter().sum::<f64>() / row.len() as f64);
        let flat: Vec<f64> = trajectories
            .iter()
            .flat_map(|tr| tr.iterates[t.min(tr.iterates.len() - 1)].clone())
            .collect();
        history.push(SolutionBatch::from_flat(set.family, &flat, t)?);
        loss_history.push(row);
    }
    let mut best_estimate = Vec::with_capacity(set.n);
    let mut best_loss = Vec::with_capacity(set.n);
    for tr in &trajectories {
        // line-searched trajectories are monotone; the last iterate is best
        let (bi, bl) = tr
            .losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        best_estimate.push(tr.iterates[bi].clone());
        best_loss.push(*bl);
    }
    let final_estimate: Vec<Vec<f64>> = trajectories.iter().map(|t| t.x.clone()).collect();
    let final_loss: Vec<f64> = trajectories.iter().map(|t| t.loss).collect();
    debug_assert!(final_estimate.iter().all(|x| x.len() == dim));

    Ok(MethodResult {
        method: kind,
        family: set.family,
        curve,
        loss_history,
        history,
        best_estimate,
        best_loss,
        final_estimate,
        final_loss,
        refinement: None,
        events: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStart {
    /// Best recorded estimate (JPO, neural adjoint).
    Best,
    /// Final estimate (supervised).
    Final,
}

impl RefineStart {
    pub fn for_method(kind: MethodKind) -> Self {
        match kind {
            MethodKind::Supervised => RefineStart::Final,
            _ => RefineStart::Best,
        }
    }
}

/// Per-example BFGS on the true objective from a method's estimates.
pub fn refine(
    result: &MethodResult,
    set: &ProblemSet,
    cfg: &OptimizerConfig,
) -> Result<MethodResult> {
    let start_kind = RefineStart::for_method(result.method);
    let starts = match start_kind {
        RefineStart::Best => &result.best_estimate,
        RefineStart::Final => &result.final_estimate,
    };
    let runs: Vec<Result<RunTrajectory>> = (0..set.n)
        .into_par_iter()
        .map(|i| {
            let mut obj = |x: &[f64]| example_objective(set, i, x);
            bfgs_minimize(&mut obj, &starts[i], cfg)
        })
        .collect();
    let runs: Vec<RunTrajectory> = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let refinement = Refinement {
        start: starts.clone(),
        estimates: runs.iter().map(|r| r.x.clone()).collect(),
        losses: runs.iter().map(|r| r.loss).collect(),
        iterations: runs.iter().map(|r| r.iterations).collect(),
    };
    let mut out = result.clone();
    out.refinement = Some(refinement);
    Ok(out)
}

/// Run a named method end to end (without refinement).
pub fn run_method(set: &ProblemSet, kind: MethodKind, cfg: &TrainConfig) -> Result<MethodResult> {
    match kind {
        MethodKind::Jpo => jpo_train(set, &default_net_spec(set.family), cfg),
        MethodKind::Supervised => supervised_train(set, &default_net_spec(set.family), cfg),
        MethodKind::NeuralAdjoint => neural_adjoint_solve(set, cfg),
        MethodKind::Bfgs => classical_solve(set, kind, &OptimizerConfig::default()),
        MethodKind::Gd => classical_solve(
            set,
            kind,
            // fixed-step descent needs far more iterations than the
            // line-searched methods to drain the flat directions
            &OptimizerConfig { step_size: 0.1, max_iterations: 20_000, ..Default::default() },
        ),
    }
}
