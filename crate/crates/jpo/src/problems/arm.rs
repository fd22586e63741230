//! Planar robotic arm: position the base height and three joint angles so
//! the end effector reaches a target point. Smooth, non-chaotic kinematics.

use rand::Rng;

use crate::autodiff::{DiffValue, Tape};
use crate::error::Result;
use crate::problems::{Family, ProblemSet};
use crate::rng::keyed_rng;

pub const SEGMENTS: [f64; 3] = [0.5, 0.5, 1.0];

/// End-effector position for x = (x1, theta1, theta2, theta3): base at
/// (0, x1), joint angles accumulate along the chain.
pub fn end_effector(x: &[f64]) -> [f64; 2] {
    let mut angle = 0.0;
    let mut px = 0.0;
    let mut py = x[0];
    for (i, &l) in SEGMENTS.iter().enumerate() {
        angle += x[i + 1];
        px += l * angle.cos();
        py += l * angle.sin();
    }
    [px, py]
}

pub fn loss_scalar(x: &[f64], target: &[f64]) -> f64 {
    let e = end_effector(x);
    (e[0] - target[0]).powi(2) + (e[1] - target[1]).powi(2)
}

pub fn generate(n: usize, seed: u64) -> Result<ProblemSet> {
    let mut gammas = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = keyed_rng(seed, &[Family::Arm as u64, i as u64]);
        let x = vec![
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
            rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
            rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
        ];
        let target = end_effector(&x).to_vec();
        gammas.push(target.clone()); // target doubles as conditioning
        targets.push(target);
        truth.push(x);
    }
    ProblemSet::new(Family::Arm, seed, gammas, targets, Some(truth))
}

/// Per-example squared distances [B] for candidates x [B, 4].
pub fn batch_loss(tape: &mut Tape, set: &ProblemSet, x: DiffValue) -> Result<DiffValue> {
    let b = set.n;
    let x1 = tape.column(x, 0)?;
    let t1 = tape.column(x, 1)?;
    let t2 = tape.column(x, 2)?;
    let t3 = tape.column(x, 3)?;
    let a1 = t1;
    let a2 = tape.add(a1, t2)?;
    let a3 = tape.add(a2, t3)?;

    let mut ex: Option<DiffValue> = None;
    let mut ey = x1;
    for (angle, l) in [a1, a2, a3].into_iter().zip(SEGMENTS) {
        let c = tape.cos(angle);
        let s = tape.sin(angle);
        let cx = tape.scale(c, l);
        let sy = tape.scale(s, l);
        ex = Some(match ex {
            None => cx,
            Some(acc) => tape.add(acc, cx)?,
        });
        ey = tape.add(ey, sy)?;
    }
    let ex = ex.unwrap();

    let tx: Vec<f64> = set.targets.iter().map(|t| t[0]).collect();
    let ty: Vec<f64> = set.targets.iter().map(|t| t[1]).collect();
    let txv = tape.constant(tx, vec![b])?;
    let tyv = tape.constant(ty, vec![b])?;
    let rx = tape.sub(ex, txv)?;
    let ry = tape.sub(ey, tyv)?;
    let rx2 = tape.mul(rx, rx)?;
    let ry2 = tape.mul(ry, ry)?;
    tape.add(rx2, ry2)
}
