//! Differentiable forward simulators and seeded problem-set generators for
//! the four inverse-problem families.

pub mod arm;
pub mod billiards;
pub mod ks;
pub mod wavepacket;

use crate::autodiff::{DiffValue, Tape};
use crate::error::{JpoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Wavepacket,
    Billiards,
    Ks,
    Arm,
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::Wavepacket => "wavepacket",
            Family::Billiards => "billiards",
            Family::Ks => "ks",
            Family::Arm => "arm",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "wavepacket" => Ok(Family::Wavepacket),
            "billiards" => Ok(Family::Billiards),
            "ks" => Ok(Family::Ks),
            "arm" => Ok(Family::Arm),
            other => Err(JpoError::InvalidArg(format!("unknown family '{other}'"))),
        }
    }

    /// Dimension of a single example's solution vector.
    pub fn solution_dim(&self) -> usize {
        match self {
            Family::Wavepacket => 1,
            Family::Billiards => 2,
            Family::Ks => 2,
            Family::Arm => 4,
        }
    }
}

/// A batch of inverse problems: conditioning, observed targets, and (for
/// evaluation only) the hidden ground truth used to generate them.
#[derive(Debug, Clone)]
pub struct ProblemSet {
    pub family: Family,
    pub n: usize,
    pub seed: u64,
    /// Per-example conditioning gamma_i (family-specific layout).
    pub gammas: Vec<Vec<f64>>,
    /// Per-example observed outputs y_i.
    pub targets: Vec<Vec<f64>>,
    truth: Option<Vec<Vec<f64>>>,
}

impl ProblemSet {
    pub fn new(
        family: Family,
        seed: u64,
        gammas: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        truth: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = gammas.len();
        if targets.len() != n || truth.as_ref().is_some_and(|t| t.len() != n) {
            return Err(JpoError::ShapeMismatch {
                op: "ProblemSet::new",
                detail: "gamma/target/truth lengths differ".into(),
            });
        }
        Ok(ProblemSet { family, n, seed, gammas, targets, truth })
    }

    /// Evaluation-only access; never read on any optimizer path.
    pub fn ground_truth(&self) -> Option<&[Vec<f64>]> {
        self.truth.as_deref()
    }

    /// Remove the hidden truth entirely (firewall check hook).
    pub fn strip_truth(&mut self) {
        self.truth = None;
    }
}

#[derive(Debug, Clone)]
pub struct SolutionBatch {
    pub family: Family,
    /// Per-example solution estimates, each of length `family.solution_dim()`.
    pub x: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl SolutionBatch {
    pub fn flat(&self) -> Vec<f64> {
        self.x.iter().flatten().copied().collect()
    }

    pub fn from_flat(family: Family, flat: &[f64], iteration: usize) -> Result<Self> {
        let dim = family.solution_dim();
        if flat.len() % dim != 0 {
            return Err(JpoError::ShapeMismatch {
                op: "SolutionBatch::from_flat",
                detail: format!("length {} not divisible by {dim}", flat.len()),
            });
        }
        Ok(SolutionBatch {
            family,
            x: flat.chunks(dim).map(|c| c.to_vec()).collect(),
            iteration,
        })
    }
}

/// Per-row divergence report from a guarded forward run.
#[derive(Debug, Clone, Default)]
pub struct DivergenceLog {
    /// `Some(step)` if the example's state crossed the guard at that step.
    pub diverged_at: Vec<Option<usize>>,
}

impl DivergenceLog {
    pub fn clean(n: usize) -> Self {
        DivergenceLog { diverged_at: vec![None; n] }
    }

    pub fn any(&self) -> bool {
        self.diverged_at.iter().any(|d| d.is_some())
    }
}

pub fn generate(family: Family, n: usize, seed: u64) -> Result<ProblemSet> {
    match family {
        Family::Wavepacket => wavepacket::generate(n, seed),
        Family::Billiards => billiards::generate(n, seed),
        Family::Ks => ks::generate(n, seed),
        Family::Arm => arm::generate(n, seed),
    }
}

/// Per-example losses [B] for candidate solutions `x` [B, dim], on the tape.
/// Returns the loss vector plus a divergence log (trivially clean for all
/// families except KS).
pub fn batch_loss(
    tape: &mut Tape,
    set: &ProblemSet,
    x: DiffValue,
) -> Result<(DiffValue, DivergenceLog)> {
    let shape = tape.shape(x).to_vec();
    if shape != [set.n, set.family.solution_dim()] {
        return Err(JpoError::ShapeMismatch {
            op: "batch_loss",
            detail: format!(
                "x shape {shape:?}, expected [{}, {}]",
                set.n,
                set.family.solution_dim()
            ),
        });
    }
    match set.family {
        Family::Wavepacket => {
            let l = wavepacket::batch_loss(tape, set, x)?;
            Ok((l, DivergenceLog::clean(set.n)))
        }
        Family::Billiards => {
            let l = billiards::batch_loss(tape, set, x)?;
            Ok((l, DivergenceLog::clean(set.n)))
        }
        Family::Ks => ks::batch_loss(tape, set, x),
        Family::Arm => {
            let l = arm::batch_loss(tape, set, x)?;
            Ok((l, DivergenceLog::clean(set.n)))
        }
    }
}

/// Loss and gradient of a single example's objective, for classical solvers.
pub fn example_objective(set: &ProblemSet, index: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let dim = set.family.solution_dim();
    if x.len() != dim {
        return Err(JpoError::ShapeMismatch {
            op: "example_objective",
            detail: format!("x length {}, expected {dim}", x.len()),
        });
    }
    let sub = ProblemSet {
        family: set.family,
        n: 1,
        seed: set.seed,
        gammas: vec![set.gammas[index].clone()],
        targets: vec![set.targets[index].clone()],
        truth: None,
    };
    let mut tape = Tape::new();
    let xv = tape.input(x.to_vec(), vec![1, dim])?;
    let (losses, div) = batch_loss(&mut tape, &sub, xv)?;
    let loss = tape.data(losses)[0];
    if div.any() {
        // diverged forward: report a large finite loss with zero gradient so
        // classical solvers treat the point as hopeless rather than crashing
        return Ok((1e12, vec![0.0; dim]));
    }
    let scalar = tape.sum(losses);
    let grads = tape.backward(scalar)?;
    Ok((loss, grads.wrt_or_zero(xv, dim)))
}

/// Neutral per-family starting guess for classical solvers.
pub fn neutral_start(family: Family) -> Vec<f64> {
    match family {
        Family::Wavepacket => vec![128.0],
        Family::Billiards => vec![1.0, 0.0],
        Family::Ks => ks::PRIOR_MEAN.to_vec(),
        Family::Arm => vec![0.0; 4],
    }
}

/// Uniform prior sampler over the solution space, for synthetic training
/// data (supervised / surrogate methods).
pub fn sample_prior(family: Family, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    match family {
        Family::Wavepacket => vec![wavepacket::inv_clamp_t0(rng.gen_range(26.0..230.0))],
        Family::Billiards => {
            // broad box around the default cue velocity (1, 0)
            vec![rng.gen_range(0.25..2.0), rng.gen_range(-1.0..1.0)]
        }
        Family::Ks => vec![
            rng.gen_range(ks::PRIOR_BOX[0].0..ks::PRIOR_BOX[0].1),
            rng.gen_range(ks::PRIOR_BOX[1].0..ks::PRIOR_BOX[1].1),
        ],
        Family::Arm => {
            let mut v = vec![rng.gen_range(-1.0..1.0)];
            for _ in 0..3 {
                v.push(rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2));
            }
            v
        }
    }
}
