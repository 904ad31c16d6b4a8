//! Planar pushing: a disk pusher and a rigid block built from a union of
//! rectangles (T by default, plus Tetris-like variants and a "+" shape).
//!
//! Dynamics are quasi-static. Each control step is split into substeps; in
//! every substep the pusher advances a little and any penetration of the
//! block is resolved by the rigid motion (translation + rotation about the
//! block center) that moves the contact point out along the contact normal
//! while penalizing rotation, a stand-in for a friction cone. The block only
//! moves while in contact. Shrinking the substep length converges, which the
//! fine-step oracle test exploits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Obs;

use super::raster::{self, BodyRect};
use super::EnvConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeId {
    TBlock,
    LBlock,
    ZBlock,
    IBlock,
    Plus,
    UBlock,
}

impl ShapeId {
    pub fn rects(&self) -> Vec<BodyRect> {
        let r = |cx: f64, cy: f64, hw: f64, hh: f64| BodyRect { cx, cy, hw, hh };
        match self {
            // bar on top (smaller y), stem hanging down
            ShapeId::TBlock => vec![r(0.0, -0.045, 0.09, 0.03), r(0.0, 0.045, 0.03, 0.06)],
            ShapeId::LBlock => vec![r(-0.03, 0.0, 0.03, 0.09), r(0.045, 0.06, 0.045, 0.03)],
            ShapeId::ZBlock => vec![r(-0.045, -0.03, 0.045, 0.03), r(0.045, 0.03, 0.045, 0.03)],
            ShapeId::IBlock => vec![r(0.0, 0.0, 0.105, 0.03)],
            ShapeId::Plus => vec![r(0.0, 0.0, 0.09, 0.03), r(0.0, 0.0, 0.03, 0.09)],
            ShapeId::UBlock => vec![
                r(0.0, 0.06, 0.09, 0.03),
                r(-0.06, -0.015, 0.03, 0.045),
                r(0.06, -0.015, 0.03, 0.045),
            ],
        }
    }

    /// Rotational symmetry order; success compares angles modulo 2π/fold.
    pub fn symmetry_fold(&self) -> u32 {
        match self {
            ShapeId::TBlock | ShapeId::LBlock | ShapeId::UBlock => 1,
            ShapeId::ZBlock | ShapeId::IBlock => 2,
            ShapeId::Plus => 4,
        }
    }

    pub const TRAIN_SET: [ShapeId; 4] =
        [ShapeId::TBlock, ShapeId::LBlock, ShapeId::ZBlock, ShapeId::IBlock];
    pub const EVAL_SET: [ShapeId; 2] = [ShapeId::Plus, ShapeId::UBlock];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushState {
    pub pusher: [f64; 2],
    pub block_pos: [f64; 2],
    pub block_theta: f64,
    pub shape: ShapeId,
}

const PUSHER_MARGIN: f64 = 0.06;
const BLOCK_MARGIN: f64 = 0.16;

/// World-frame distance from a point to the block surface plus the closest
/// surface point (for contact normal computation).
fn closest_on_block(state: &PushState, px: f64, py: f64) -> (f64, [f64; 2]) {
    let rects = state.shape.rects();
    let (s, c) = state.block_theta.sin_cos();
    let dx = px - state.block_pos[0];
    let dy = py - state.block_pos[1];
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    let mut best = f64::INFINITY;
    let mut best_pt = [0.0, 0.0];
    for r in &rects {
        let cx = (lx - r.cx).clamp(-r.hw, r.hw) + r.cx;
        let cy = (ly - r.cy).clamp(-r.hh, r.hh) + r.cy;
        let mut d = ((lx - cx) * (lx - cx) + (ly - cy) * (ly - cy)).sqrt();
        let mut pt = [cx, cy];
        if d == 0.0 {
            // inside this rect: exit through the nearest face
            let ex = r.hw - (lx - r.cx).abs();
            let ey = r.hh - (ly - r.cy).abs();
            if ex < ey {
                pt = [r.cx + (lx - r.cx).signum() * r.hw, ly];
                d = -ex;
            } else {
                pt = [lx, r.cy + (ly - r.cy).signum() * r.hh];
                d = -ey;
            }
        }
        if d < best {
            best = d;
            best_pt = pt;
        }
    }
    // body -> world
    let wx = c * best_pt[0] - s * best_pt[1] + state.block_pos[0];
    let wy = s * best_pt[0] + c * best_pt[1] + state.block_pos[1];
    (best, [wx, wy])
}

/// Resolve pusher-block penetration for the current pusher position.
fn resolve_contact(state: &mut PushState, cfg: &EnvConfig) {
    let p = &cfg.push;
    for _ in 0..p.max_contact_iters {
        let (dist, contact) = closest_on_block(state, state.pusher[0], state.pusher[1]);
        let pen = p.pusher_radius - dist;
        if pen <= p.contact_tol {
            break;
        }
        let mut nx = state.pusher[0] - contact[0];
        let mut ny = state.pusher[1] - contact[1];
        let norm = (nx * nx + ny * ny).sqrt();
        if dist < 0.0 || norm < 1e-12 {
            // pusher center inside the block: push along center-to-center
            nx = state.block_pos[0] - state.pusher[0];
            ny = state.block_pos[1] - state.pusher[1];
            let n2 = (nx * nx + ny * ny).sqrt().max(1e-9);
            nx /= n2;
            ny /= n2;
        } else {
            nx /= norm;
            ny /= norm;
        }
        // required contact-point displacement: away from the pusher
        let d = [-nx * pen, -ny * pen];
        let lever = [contact[0] - state.block_pos[0], contact[1] - state.block_pos[1]];
        let cross = lever[0] * d[1] - lever[1] * d[0];
        let denom = lever[0] * lever[0] + lever[1] * lever[1] + p.rot_beta * p.rot_beta;
        let dtheta = cross / denom;
        // translation = d - dtheta * perp(lever)
        let tx = d[0] + dtheta * lever[1];
        let ty = d[1] - dtheta * lever[0];
        state.block_pos[0] = (state.block_pos[0] + tx).clamp(BLOCK_MARGIN, 1.0 - BLOCK_MARGIN);
        state.block_pos[1] = (state.block_pos[1] + ty).clamp(BLOCK_MARGIN, 1.0 - BLOCK_MARGIN);
        state.block_theta = wrap_angle(state.block_theta + dtheta);
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

pub fn step(state: &PushState, action: [f64; 2], cfg: &EnvConfig) -> PushState {
    step_with_substep(state, action, cfg, cfg.push.substep_len)
}

/// Step with an explicit substep length; the fine-step oracle test uses a
/// smaller value than the configured default.
pub fn step_with_substep(
    state: &PushState,
    action: [f64; 2],
    cfg: &EnvConfig,
    substep_len: f64,
) -> PushState {
    let mut s = *state;
    let mag = (action[0] * action[0] + action[1] * action[1]).sqrt();
    let n_sub = ((mag / substep_len).ceil() as usize).max(1);
    let dx = action[0] / n_sub as f64;
    let dy = action[1] / n_sub as f64;
    for _ in 0..n_sub {
        s.pusher[0] = (s.pusher[0] + dx).clamp(PUSHER_MARGIN, 1.0 - PUSHER_MARGIN);
        s.pusher[1] = (s.pusher[1] + dy).clamp(PUSHER_MARGIN, 1.0 - PUSHER_MARGIN);
        resolve_contact(&mut s, cfg);
    }
    s
}

pub fn reset(rng: &mut ChaCha8Rng, shapes: &[ShapeId], cfg: &EnvConfig) -> PushState {
    let shape = shapes[rng.random_range(0..shapes.len())];
    loop {
        let state = PushState {
            pusher: [
                rng.random_range(PUSHER_MARGIN..1.0 - PUSHER_MARGIN),
                rng.random_range(PUSHER_MARGIN..1.0 - PUSHER_MARGIN),
            ],
            block_pos: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
            block_theta: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            shape,
        };
        let (dist, _) = closest_on_block(&state, state.pusher[0], state.pusher[1]);
        if dist > cfg.push.pusher_radius + 0.02 {
            return state;
        }
    }
}

/// Fixed green anchor drawn under everything, per the environment's visuals.
const ANCHOR_POSE: ([f64; 2], f64) = ([0.5, 0.5], 0.0);

pub fn render(state: &PushState, cfg: &EnvConfig) -> Obs {
    let mut img = raster::blank([244, 242, 234]);
    raster::body(
        &mut img,
        &ShapeId::TBlock.rects(),
        ANCHOR_POSE.0[0],
        ANCHOR_POSE.0[1],
        ANCHOR_POSE.1,
        [70, 170, 80],
        2.0,
    );
    raster::body(
        &mut img,
        &state.shape.rects(),
        state.block_pos[0],
        state.block_pos[1],
        state.block_theta,
        [75, 75, 95],
        2.0,
    );
    raster::disk(
        &mut img,
        state.pusher[0],
        state.pusher[1],
        cfg.push.pusher_radius,
        [40, 100, 210],
        3.0,
    );
    img
}

pub fn success(state: &PushState, goal: &PushState, cfg: &EnvConfig) -> bool {
    let bd = dist2(state.block_pos, goal.block_pos);
    let pd = dist2(state.pusher, goal.pusher);
    let fold = state.shape.symmetry_fold();
    let period = 2.0 * std::f64::consts::PI / fold as f64;
    let mut da = (state.block_theta - goal.block_theta) % period;
    if da > period / 2.0 {
        da -= period;
    } else if da < -period / 2.0 {
        da += period;
    }
    bd <= cfg.success.push_xy_eps
        && pd <= cfg.success.push_xy_eps
        && da.abs() <= cfg.success.push_theta_eps_deg.to_radians()
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
}
