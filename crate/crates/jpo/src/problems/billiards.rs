//! Two-ball billiards: choose the cue's initial velocity so the struck ball
//! rolls to the target. Analytic event-driven dynamics with speed-
//! proportional friction, so each example is a closed-form expression.

use rand::Rng;

use crate::autodiff::{DiffValue, Tape};
use crate::error::Result;
use crate::problems::{Family, ProblemSet};
use crate::rng::keyed_rng;

pub const RADIUS: f64 = 0.2;
pub const ELASTICITY: f64 = 0.8;
/// Friction: speed decays as e^{-mu t}, so total travel is |v|/mu.
pub const FRICTION: f64 = 0.5;
pub const CUE_START: [f64; 2] = [0.0, 0.5];
pub const TARGET: [f64; 2] = [2.0, 0.5];

pub fn generate(n: usize, seed: u64) -> Result<ProblemSet> {
    let mut gammas = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = keyed_rng(seed, &[Family::Billiards as u64, i as u64]);
        let y2 = rng.gen_range(0.0..1.0);
        gammas.push(vec![1.0, y2]); // ball-2 rest position on the segment
        targets.push(TARGET.to_vec());
    }
    // no unique ground truth: hitting the target needs a specific unknown v0
    ProblemSet::new(Family::Billiards, seed, gammas, targets, None)
}

/// Geometry of a single shot, branch decisions only (plain arithmetic).
struct Contact {
    /// First-contact arclength along the cue's path.
    s_star: f64,
}

fn first_contact(v0: &[f64], p2: &[f64]) -> Option<Contact> {
    let speed0 = (v0[0] * v0[0] + v0[1] * v0[1]).sqrt();
    if speed0 <= 0.0 {
        return None;
    }
    let dir = [v0[0] / speed0, v0[1] / speed0];
    let d = [p2[0] - CUE_START[0], p2[1] - CUE_START[1]];
    let b = d[0] * dir[0] + d[1] * dir[1];
    let c = d[0] * d[0] + d[1] * d[1] - 4.0 * RADIUS * RADIUS;
    let disc = b * b - c;
    // grazing contact (disc == 0) counts as no collision
    if b <= 0.0 || disc <= 0.0 {
        return None;
    }
    let s_star = b - disc.sqrt();
    let total_travel = speed0 / FRICTION;
    if s_star <= 0.0 || s_star >= total_travel {
        return None;
    }
    Some(Contact { s_star })
}

/// Final position of ball 2 after the shot (plain arithmetic).
pub fn final_ball2(v0: &[f64], p2: &[f64]) -> [f64; 2] {
    match first_contact(v0, p2) {
        None => [p2[0], p2[1]],
        Some(ct) => {
            let speed0 = (v0[0] * v0[0] + v0[1] * v0[1]).sqrt();
            let dir = [v0[0] / speed0, v0[1] / speed0];
            let speed_c = speed0 - FRICTION * ct.s_star;
            let d = [p2[0] - CUE_START[0], p2[1] - CUE_START[1]];
            let n = [
                (d[0] - ct.s_star * dir[0]) / (2.0 * RADIUS),
                (d[1] - ct.s_star * dir[1]) / (2.0 * RADIUS),
            ];
            let u_n = speed_c * (dir[0] * n[0] + dir[1] * n[1]);
            let v2 = 0.5 * (1.0 + ELASTICITY) * u_n;
            let travel = v2 / FRICTION;
            [p2[0] + travel * n[0], p2[1] + travel * n[1]]
        }
    }
}

pub fn loss_scalar(v0: &[f64], p2: &[f64], target: &[f64]) -> f64 {
    let f = final_ball2(v0, p2);
    (f[0] - target[0]).powi(2) + (f[1] - target[1]).powi(2)
}

/// Per-example losses [B] for candidate velocities x [B, 2]. Examples whose
/// shot misses ball 2 get a constant loss node: the gradient with respect to
/// v0 is exactly zero, not merely small.
pub fn batch_loss(tape: &mut Tape, set: &ProblemSet, x: DiffValue) -> Result<DiffValue> {
    let mut losses = Vec::with_capacity(set.n);
    for i in 0..set.n {
        let p2 = &set.gammas[i];
        let target = &set.targets[i];
        let row = tape.slice(x, i, 1)?; // [1, 2]
        let v0 = [tape.data(row)[0], tape.data(row)[1]];
        match first_contact(&v0, p2) {
            None => {
                let l = loss_scalar(&v0, p2, target);
                losses.push(tape.constant(vec![l], vec![1])?);
            }
            Some(_) => {
                losses.push(example_loss(tape, row, p2, target)?);
            }
        }
    }
    tape.concat(&losses, 0)
}

/// Differentiable single-example loss; only called on colliding shots.
fn example_loss(tape: &mut Tape, row: DiffValue, p2: &[f64], target: &[f64]) -> Result<DiffValue> {
    let vx = tape.column(row, 0)?; // [1]
    let vy = tape.column(row, 1)?;
    let vx2 = tape.mul(vx, vx)?;
    let vy2 = tape.mul(vy, vy)?;
    let sq = tape.add(vx2, vy2)?;
    let speed0 = tape.pow(sq, 0.5);
    let inv_speed = tape.pow(sq, -0.5);
    let dirx = tape.mul(vx, inv_speed)?;
    let diry = tape.mul(vy, inv_speed)?;

    let d = [p2[0] - CUE_START[0], p2[1] - CUE_START[1]];
    let bx = tape.scale(dirx, d[0]);
    let by = tape.scale(diry, d[1]);
    let b = tape.add(bx, by)?;
    let c = d[0] * d[0] + d[1] * d[1] - 4.0 * RADIUS * RADIUS;
    let b2 = tape.mul(b, b)?;
    let disc = tape.add_const(b2, -c);
    let root = tape.pow(disc, 0.5);
    let s_star = tape.sub(b, root)?;

    // speed at contact and the collision normal
    let fric = tape.scale(s_star, -FRICTION);
    let speed_c = tape.add(speed0, fric)?;
    let sdx = tape.mul(s_star, dirx)?;
    let sdy = tape.mul(s_star, diry)?;
    let nx = {
        let t = tape.add_const(sdx, -d[0]);
        tape.scale(t, -1.0 / (2.0 * RADIUS))
    };
    let ny = {
        let t = tape.add_const(sdy, -d[1]);
        tape.scale(t, -1.0 / (2.0 * RADIUS))
    };
    let dnx = tape.mul(dirx, nx)?;
    let dny = tape.mul(diry, ny)?;
    let dn = tape.add(dnx, dny)?;
    let u_n = tape.mul(speed_c, dn)?;
    // ball 2 departs along n and travels v2 / mu before stopping
    let travel = tape.scale(u_n, 0.5 * (1.0 + ELASTICITY) / FRICTION);

    let fx = {
        let t = tape.mul(travel, nx)?;
        tape.add_const(t, p2[0] - target[0])
    };
    let fy = {
        let t = tape.mul(travel, ny)?;
        tape.add_const(t, p2[1] - target[1])
    };
    let fx2 = tape.mul(fx, fx)?;
    let fy2 = tape.mul(fy, fy)?;
    tape.add(fx2, fy2)
}

/// True iff the shot misses ball 2 entirely (loss constant in v0).
pub fn is_no_collision(v0: &[f64], p2: &[f64]) -> bool {
    first_contact(v0, p2).is_none()
}
