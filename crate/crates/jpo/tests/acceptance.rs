//! Acceptance gate: one test per criterion. Each prints a single
//! `criterion NN (...): PASS/FAIL — ...` line with the measured quantities
//! and the tolerance it was judged against.

use std::time::Instant;

use rand::Rng;

use jpo::alignment::{measure_alignment_curve, rho_fit, rho_predict, AlignTask};
use jpo::autodiff::{check_gradient, ScalarFn, Tape};
use jpo::harness::{
    fraction_better, improvement_split, run_experiment, write_outputs, ExperimentConfig,
    TrainOverrides, EQUALITY_REL_TOL,
};
use jpo::methods::{evaluate_losses, refine, run_method, MethodKind, TrainConfig};
use jpo::net::{
    arm_net_spec, billiards_net_spec, layout, net_forward, net_init, param_count,
    wavepacket_net_spec,
};
use jpo::noise::{
    make_landscape, mc_alignment, prob_aligned_single, prob_majority_exact,
    prob_majority_normal, LandscapeBatch, Law, Reducer,
};
use jpo::optim::OptimizerConfig;
use jpo::problems::{
    billiards, example_objective, generate, neutral_start, Family, ProblemSet,
};
use jpo::rng::keyed_rng;

fn verdict(id: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {id:02} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id:02} ({name}): {detail}");
}

fn within(start: Instant, minutes: u64) -> bool {
    start.elapsed().as_secs() < minutes * 60
}

/// 20 random (lambda, noise) settings: the N=1 Monte Carlo alignment
/// probability matches 1/2 + 1/2 erf(lambda / |Aw|_2) within 3 standard
/// errors at 1e5 samples.
#[test]
fn criterion_01_closed_form_vs_monte_carlo() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let mut rng = keyed_rng(0xC1, &[k]);
        let snr = rng.gen_range(0.02..0.4);
        // 200 components keep the closed form's CLT error far below the
        // Monte Carlo band
        let mut spec =
            make_landscape(200, Law::Uniform(0.0, 1.0), Law::Uniform(1.0, 20.0), 0.0, &mut rng)
                .unwrap();
        spec.lambda = snr * spec.aw_norm();
        let closed = prob_aligned_single(spec.lambda, spec.aw_norm()).unwrap();
        let batch = LandscapeBatch::shared(vec![spec]).unwrap();
        let est = mc_alignment(&batch, Reducer::SumOfLosses, 100_000, 0xC1 + k).unwrap();
        worst = worst.max((est.probability - closed).abs() / est.stderr);
    }
    verdict(
        1,
        "closed form vs monte carlo",
        worst <= 3.0 && within(t, 1),
        &format!(
            "max |mc - closed| = {worst:.2} standard errors over 20 settings (limit 3), {:.1?}",
            t.elapsed()
        ),
    );
}

/// Equal-noise shared-optimum batches at small SNR: the alignment-probability
/// excess over 1/2 follows a sqrt(N) law with R^2 > 0.95 over N in
/// {1, 4, 16, 64}.
#[test]
fn criterion_02_sqrt_n_scaling() {
    let t = Instant::now();
    let snr = 0.02;
    let mut rng = keyed_rng(0xC2, &[]);
    let mut base =
        make_landscape(20, Law::Uniform(0.2, 1.0), Law::Uniform(1.0, 20.0), 0.0, &mut rng)
            .unwrap();
    base.lambda = snr * base.aw_norm();
    let ns = [1usize, 4, 16, 64];
    let mut excess = Vec::new();
    for (i, &n) in ns.iter().enumerate() {
        let batch = LandscapeBatch::shared(vec![base.clone(); n]).unwrap();
        let est = mc_alignment(&batch, Reducer::SumOfLosses, 200_000, 0xC2 + i as u64).unwrap();
        excess.push(est.probability - 0.5);
    }
    // least squares through the origin of excess against sqrt(N)
    let num: f64 = ns.iter().zip(&excess).map(|(&n, &e)| (n as f64).sqrt() * e).sum();
    let den: f64 = ns.iter().map(|&n| n as f64).sum();
    let slope = num / den;
    let mean = excess.iter().sum::<f64>() / excess.len() as f64;
    let ss_tot: f64 = excess.iter().map(|e| (e - mean) * (e - mean)).sum();
    let ss_res: f64 = ns
        .iter()
        .zip(&excess)
        .map(|(&n, &e)| {
            let p = slope * (n as f64).sqrt();
            (e - p) * (e - p)
        })
        .sum();
    let r2 = 1.0 - ss_res / ss_tot;
    verdict(
        2,
        "sqrt(N) scaling of alignment excess",
        r2 > 0.95 && within(t, 2),
        &format!(
            "R^2 = {r2:.4} (limit 0.95), slope {slope:.4}, excesses {excess:?}, {:.1?}",
            t.elapsed()
        ),
    );
}

/// Majority-vote scaling: exact enumeration matches Monte Carlo voting
/// within 3 standard errors for odd N in 3..=15, and the normal
/// approximation stays within 0.02 of exact for N >= 51.
#[test]
fn criterion_03_majority_vote_scaling() {
    let t = Instant::now();
    let snr = 0.1;
    let mut rng = keyed_rng(0xC3, &[]);
    let mut base =
        make_landscape(20, Law::Uniform(0.2, 1.0), Law::Uniform(1.0, 20.0), 0.0, &mut rng)
            .unwrap();
    base.lambda = snr * base.aw_norm();
    let p1 = prob_aligned_single(base.lambda, base.aw_norm()).unwrap();
    let eps = p1 - 0.5;
    let mut worst_se = 0.0f64;
    for n in (3..=15usize).step_by(2) {
        let exact = prob_majority_exact(n, eps).unwrap();
        let batch = LandscapeBatch::shared(vec![base.clone(); n]).unwrap();
        let est = mc_alignment(&batch, Reducer::MajorityVote, 100_000, 0xC3 + n as u64).unwrap();
        worst_se = worst_se.max((est.probability - exact).abs() / est.stderr);
    }
    let mut worst_norm = 0.0f64;
    for &n in &[51usize, 57, 63] {
        let exact = prob_majority_exact(n, eps).unwrap();
        let approx = prob_majority_normal(n, eps).unwrap();
        worst_norm = worst_norm.max((exact - approx).abs());
    }
    verdict(
        3,
        "majority-vote scaling",
        worst_se <= 3.0 && worst_norm < 0.02 && within(t, 1),
        &format!(
            "mc vs exact max {worst_se:.2} SE (limit 3, odd N 3..15); \
             normal vs exact max {worst_norm:.4} (limit 0.02, N >= 51), {:.1?}",
            t.elapsed()
        ),
    );
}

/// Recursion fidelity: rho_predict with fitted (A, C~) matches the measured
/// alignment curve on the linear task x* = 10 gamma with max absolute
/// deviation < 0.1 over N in 1..=64. The fitted values are logged; they
/// depend on measurement hyperparameters and carry no target of their own.
#[test]
fn criterion_04_recursion_fidelity() {
    let t = Instant::now();
    let ns: Vec<usize> = (1..=64).collect();
    let measured = measure_alignment_curve(AlignTask::Linear, &ns, 50, 0xC4).unwrap();
    let fit = rho_fit(&measured).unwrap();
    let predicted = rho_predict(&fit.params, 64).unwrap();
    let max_dev = measured
        .n_values
        .iter()
        .zip(&measured.rho)
        .map(|(&n, &r)| (predicted.rho[n - 1] - r).abs())
        .fold(0.0f64, f64::max);
    verdict(
        4,
        "alignment recursion fidelity",
        max_dev < 0.1 && within(t, 10),
        &format!(
            "max |predicted - measured| = {max_dev:.4} over N in 1..=64 (limit 0.1); \
             fitted plasticity A = {:.3}, complexity C~ = {:.3}, residual {:.2e}, {:.1?}",
            fit.params.plasticity,
            fit.params.complexity,
            fit.residual,
            t.elapsed()
        ),
    );
}

/// Wave packet at N = 128: JPO without refinement beats per-example BFGS on
/// at least 65% of examples, averaged over 3 seeds.
#[test]
fn criterion_05_wavepacket_jpo_vs_bfgs() {
    let t = Instant::now();
    let mut fs = Vec::new();
    for seed in 0..3u64 {
        let set = generate(Family::Wavepacket, 128, seed).unwrap();
        let cfg = TrainConfig::for_family(Family::Wavepacket, seed);
        let jpo = run_method(&set, MethodKind::Jpo, &cfg).unwrap();
        let bfgs = run_method(&set, MethodKind::Bfgs, &cfg).unwrap();
        fs.push(fraction_better(&jpo.best_loss, &bfgs.final_loss, EQUALITY_REL_TOL).unwrap());
    }
    let mean = fs.iter().sum::<f64>() / fs.len() as f64;
    verdict(
        5,
        "wave packet JPO vs BFGS",
        mean >= 0.65 && within(t, 30),
        &format!(
            "mean fraction better = {mean:.3} over seeds 0..3 (limit 0.65), per-seed {fs:?}, {:.1?}",
            t.elapsed()
        ),
    );
}

/// Billiards N-trend: at N = 64 at least 85% of JPO examples reach final
/// loss < 1e-2, and the pooled fraction at N <= 8 is materially lower.
#[test]
fn criterion_06_billiards_n_trend() {
    let t = Instant::now();
    let frac_below = |n: usize, seeds: &[u64]| -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for &seed in seeds {
            let set = generate(Family::Billiards, n, seed).unwrap();
            let cfg = TrainConfig::for_family(Family::Billiards, seed);
            let res = run_method(&set, MethodKind::Jpo, &cfg).unwrap();
            hits += res.final_loss.iter().filter(|&&l| l < 1e-2).count();
            total += n;
        }
        hits as f64 / total as f64
    };
    let seeds = [1u64, 2, 3];
    let big = frac_below(64, &seeds);
    let small = {
        let f4 = frac_below(4, &seeds);
        let f8 = frac_below(8, &seeds);
        (f4 * 12.0 + f8 * 24.0) / 36.0
    };
    verdict(
        6,
        "billiards N-trend",
        big >= 0.85 && small <= big - 0.05 && within(t, 20),
        &format!(
            "N=64 fraction below 1e-2 = {big:.3} (limit 0.85), pooled N<=8 fraction = \
             {small:.3} (must trail by >= 0.05), {:.1?}",
            t.elapsed()
        ),
    );
}

/// KS at N = 64: refined JPO beats BFGS on at least half the examples, the
/// pre-refinement network does >= 85% of the total improvement, and
/// refinement iteration counts for near-basin estimates fall in [3, 25].
#[test]
fn criterion_07_ks_refined_jpo() {
    let t = Instant::now();
    let n = 64;
    let seed = 0u64;
    let set = generate(Family::Ks, n, seed).unwrap();
    let cfg = TrainConfig::for_family(Family::Ks, seed);
    let jpo = run_method(&set, MethodKind::Jpo, &cfg).unwrap();
    let jpo = refine(&jpo, &set, &OptimizerConfig::default()).unwrap();
    let bfgs = run_method(&set, MethodKind::Bfgs, &cfg).unwrap();
    let r = jpo.refinement.as_ref().unwrap();
    let f = fraction_better(&r.losses, &bfgs.final_loss, EQUALITY_REL_TOL).unwrap();
    let initial = evaluate_losses(&set, &vec![neutral_start(Family::Ks); n]).unwrap();
    let split = improvement_split(&initial, &jpo.best_loss, &r.losses).unwrap();
    // near-basin: refinement converged to the true optimum from a network
    // estimate already inside the basin
    let near: Vec<usize> = (0..n)
        .filter(|&i| r.losses[i] < 1e-8 && jpo.best_loss[i] < 1e-2)
        .map(|i| r.iterations[i])
        .collect();
    let iters_ok = !near.is_empty() && near.iter().all(|&it| (3..=25).contains(&it));
    verdict(
        7,
        "KS refined JPO",
        f >= 0.5 && split.fraction >= 0.85 && iters_ok && within(t, 60),
        &format!(
            "fraction better than BFGS = {f:.3} (limit 0.5); improvement before refinement = \
             {:.3} (limit 0.85, {} excluded); near-basin refinement iterations \
             min {} max {} over {} examples (limits [3, 25]), {:.1?}",
            split.fraction,
            split.excluded,
            near.iter().min().copied().unwrap_or(0),
            near.iter().max().copied().unwrap_or(0),
            near.len(),
            t.elapsed()
        ),
    );
}

/// Robotic arm: BFGS, GD and refined JPO all reach loss < 1e-10 on every
/// example.
#[test]
fn criterion_08_arm_machine_precision() {
    let t = Instant::now();
    let set = generate(Family::Arm, 16, 0).unwrap();
    let cfg = TrainConfig::for_family(Family::Arm, 0);
    let bfgs = run_method(&set, MethodKind::Bfgs, &cfg).unwrap();
    let gd = run_method(&set, MethodKind::Gd, &cfg).unwrap();
    let jpo = run_method(&set, MethodKind::Jpo, &cfg).unwrap();
    let jpo = refine(&jpo, &set, &OptimizerConfig::default()).unwrap();
    let worst = |losses: &[f64]| losses.iter().copied().fold(0.0f64, f64::max);
    let wb = worst(&bfgs.final_loss);
    let wg = worst(&gd.final_loss);
    let wj = worst(&jpo.refinement.as_ref().unwrap().losses);
    verdict(
        8,
        "arm machine precision",
        wb < 1e-10 && wg < 1e-10 && wj < 1e-10 && within(t, 5),
        &format!(
            "worst final loss: BFGS {wb:.2e}, GD {wg:.2e}, refined JPO {wj:.2e} \
             (limit 1e-10 each, 16 examples), {:.1?}",
            t.elapsed()
        ),
    );
}

fn single_example_loss_fn(set: &ProblemSet) -> Box<dyn Fn(&mut Tape, jpo::autodiff::DiffValue) -> jpo::Result<jpo::autodiff::DiffValue> + '_> {
    let dim = set.family.solution_dim();
    Box::new(move |tape: &mut Tape, x: jpo::autodiff::DiffValue| {
        let x = tape.reshape(x, vec![1, dim])?;
        let (losses, _) = jpo::problems::batch_loss(tape, set, x)?;
        Ok(tape.sum(losses))
    })
}

/// Gradient correctness: relative error < 1e-4 against central finite
/// differences on all four simulators and both network kinds, 20 random
/// points each. Billiards points are kept away from contact boundaries and
/// the smooth wave-packet objective needs no exclusions.
#[test]
fn criterion_09_gradient_checks() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut report = String::new();

    // wave packet
    {
        let set = generate(Family::Wavepacket, 1, 3).unwrap();
        let f = single_example_loss_fn(&set);
        let mut rng = keyed_rng(0xC9, &[1]);
        let mut w = 0.0f64;
        for _ in 0..20 {
            let z = rng.gen_range(40.0..215.0);
            w = w.max(check_gradient(&*f, &[z], 1e-5).unwrap());
        }
        report.push_str(&format!("wavepacket {w:.1e}, "));
        worst = worst.max(w);
    }

    // billiards, colliding configurations with a margin to the contact
    // boundary (the finite-difference probes must stay in the same branch)
    {
        let set = generate(Family::Billiards, 1, 4).unwrap();
        let f = single_example_loss_fn(&set);
        let mut rng = keyed_rng(0xC9, &[2]);
        let mut w = 0.0f64;
        let mut found = 0;
        while found < 20 {
            let v0 = [1.0 + rng.gen_range(-0.2..0.2), rng.gen_range(-0.3..0.3)];
            let margin_ok = [-1e-4, 0.0, 1e-4].iter().all(|&dx| {
                [-1e-4, 0.0, 1e-4].iter().all(|&dy| {
                    !billiards::is_no_collision(&[v0[0] + dx, v0[1] + dy], &set.gammas[0])
                })
            });
            if !margin_ok {
                continue;
            }
            found += 1;
            w = w.max(check_gradient(&*f, &v0, 1e-5).unwrap());
        }
        report.push_str(&format!("billiards {w:.1e}, "));
        worst = worst.max(w);
    }

    // KS over the full 100-step horizon
    {
        let set = generate(Family::Ks, 1, 5).unwrap();
        let f = single_example_loss_fn(&set);
        let mut rng = keyed_rng(0xC9, &[3]);
        let mut w = 0.0f64;
        for _ in 0..20 {
            let p = [rng.gen_range(0.7..1.3), rng.gen_range(0.7..1.3)];
            w = w.max(check_gradient(&*f, &p, 1e-5).unwrap());
        }
        report.push_str(&format!("ks {w:.1e}, "));
        worst = worst.max(w);
    }

    // arm
    {
        let set = generate(Family::Arm, 1, 6).unwrap();
        let f = single_example_loss_fn(&set);
        let mut rng = keyed_rng(0xC9, &[4]);
        let mut w = 0.0f64;
        for _ in 0..20 {
            let p: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            w = w.max(check_gradient(&*f, &p, 1e-5).unwrap());
        }
        report.push_str(&format!("arm {w:.1e}, "));
        worst = worst.max(w);
    }

    // both network kinds: directional derivative of a squared-error loss
    // with respect to theta along 4 random directions
    for (tag, spec, input_shape) in [
        ("s2s net", arm_net_spec(), vec![3usize, 2]),
        ("g2s net", wavepacket_net_spec(), vec![2usize, 1, 256]),
    ] {
        let total = param_count(&spec).unwrap();
        let mut w = 0.0f64;
        for k in 0..20u64 {
            let mut rng = keyed_rng(0xC9, &[5, k]);
            let params = net_init(&spec, &mut keyed_rng(0xC9, &[6, k])).unwrap();
            let input: Vec<f64> =
                (0..input_shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target: Vec<f64> =
                (0..input_shape[0] * spec.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dirs: Vec<f64> = (0..4 * total).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let point: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let spec2 = spec.clone();
            let params2 = params.clone();
            let shape2 = input_shape.clone();
            let f: &ScalarFn = &move |tape: &mut Tape, c: jpo::autodiff::DiffValue| {
                let c = tape.reshape(c, vec![1, 4])?;
                let d = tape.constant(dirs.clone(), vec![4, total])?;
                let delta = tape.matmul(c, d)?;
                let delta = tape.reshape(delta, vec![total])?;
                let theta0 = tape.constant(params2.theta.clone(), vec![total])?;
                let theta = tape.add(theta0, delta)?;
                let inp = tape.constant(input.clone(), shape2.clone())?;
                let out = net_forward(tape, &spec2, &params2, theta, inp)?;
                let tgt = tape.constant(target.clone(), vec![shape2[0], spec2.output_dim])?;
                let r = tape.sub(out, tgt)?;
                let r2 = tape.mul(r, r)?;
                Ok(tape.sum(r2))
            };
            w = w.max(check_gradient(f, &point, 1e-5).unwrap());
        }
        report.push_str(&format!("{tag} {w:.1e}, "));
        worst = worst.max(w);
    }

    verdict(
        9,
        "gradient correctness",
        worst < 1e-4 && within(t, 5),
        &format!(
            "max relative error {worst:.2e} (limit 1e-4): {report}{:.1?}",
            t.elapsed()
        ),
    );
}

/// 100 sampled no-collision billiards configurations all return exactly
/// (0, 0) gradient.
#[test]
fn criterion_10_billiards_zero_gradient() {
    let set = generate(Family::Billiards, 100, 7).unwrap();
    let mut rng = keyed_rng(0xCA, &[]);
    let mut checked = 0;
    let mut all_zero = true;
    for i in 0..100 {
        // cue velocities pointing away from or past ball 2
        let v0 = loop {
            let cand = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            if billiards::is_no_collision(&cand, &set.gammas[i]) {
                break cand;
            }
        };
        let (_, g) = example_objective(&set, i, &v0).unwrap();
        checked += 1;
        if g != [0.0, 0.0] {
            all_zero = false;
        }
    }
    verdict(
        10,
        "billiards zero gradient off-contact",
        all_zero && checked == 100,
        &format!("{checked} no-collision configurations, gradients exactly (0, 0): {all_zero}"),
    );
}

/// Parameter-count anchors: billiards S2S has exactly 37,506 parameters;
/// the wave-packet G2S count is within 5% of 13,925, itemized per layer.
#[test]
fn criterion_11_parameter_counts() {
    let b = param_count(&billiards_net_spec()).unwrap();
    let spec = wavepacket_net_spec();
    let (slots, w) = layout(&spec).unwrap();
    let target = 13_925usize;
    let dev = (w as f64 - target as f64).abs() / target as f64;
    let itemized: Vec<String> =
        slots.iter().map(|s| format!("{} {:?} = {}", s.name, s.shape, s.len())).collect();
    verdict(
        11,
        "parameter-count anchors",
        b == 37_506 && dev < 0.05,
        &format!(
            "billiards S2S = {b} (exact 37506); wave-packet G2S = {w} vs {target} \
             (deviation {:.2}%, limit 5%): [{}]",
            100.0 * dev,
            itemized.join(", ")
        ),
    );
}

/// Determinism: a sweep rerun with identical config yields bit-identical
/// CSVs, under both 1 and 8 worker threads.
#[test]
fn criterion_12_sweep_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: usize, out: &std::path::Path| -> (String, String, String) {
        let cfg = ExperimentConfig {
            schema_version: 1,
            family: "arm".into(),
            n_values: vec![4],
            seeds: vec![0, 1],
            methods: vec!["jpo".into(), "bfgs".into()],
            output_dir: out.to_string_lossy().into_owned(),
            refine: true,
            train: TrainOverrides { iterations: Some(150), ..Default::default() },
        };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let record = run_experiment(&cfg).unwrap();
            write_outputs(&record).unwrap();
        });
        let read = |name: &str| std::fs::read_to_string(out.join(name)).unwrap();
        (read("metrics.csv"), read("fractions.csv"), read("curves.csv"))
    };
    let a = run(1, &dir.path().join("a"));
    let b = run(1, &dir.path().join("b"));
    let c = run(8, &dir.path().join("c"));
    let d = run(8, &dir.path().join("d"));
    let pass = a == b && b == c && c == d;
    verdict(
        12,
        "sweep determinism",
        pass,
        &format!(
            "metrics/fractions/curves byte-identical across rerun and 1 vs 8 threads: {pass}, {:.1?}",
            t.elapsed()
        ),
    );
}
