//! Force-actuated 2-DoF ball navigating around a central block. Actions are
//! accelerations; the state integrates velocity with damping, so reaching a
//! point requires managing inertia.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Obs;

use super::raster;
use super::EnvConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

/// Central blocked square (arena units).
pub const BLOCK: (f64, f64, f64, f64) = (1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0);
const POS_MARGIN: f64 = 0.07;

fn blocked(x: f64, y: f64) -> bool {
    let (x0, y0, x1, y1) = BLOCK;
    x > x0 - POS_MARGIN && x < x1 + POS_MARGIN && y > y0 - POS_MARGIN && y < y1 + POS_MARGIN
}

pub fn free_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    loop {
        let x = rng.random_range(POS_MARGIN..1.0 - POS_MARGIN);
        let y = rng.random_range(POS_MARGIN..1.0 - POS_MARGIN);
        if !blocked(x, y) {
            return [x, y];
        }
    }
}

pub fn reset(rng: &mut ChaCha8Rng) -> MazeState {
    MazeState { pos: free_point(rng), vel: [0.0, 0.0] }
}

pub fn step(state: &MazeState, action: [f64; 2], cfg: &EnvConfig) -> MazeState {
    let m = &cfg.maze;
    let mut vel = [
        ((state.vel[0] + action[0]) * (1.0 - m.damping)).clamp(-m.vmax, m.vmax),
        ((state.vel[1] + action[1]) * (1.0 - m.damping)).clamp(-m.vmax, m.vmax),
    ];
    let mut pos = state.pos;
    // axis-resolved movement: a blocked axis zeroes that velocity component
    let nx = (pos[0] + vel[0]).clamp(POS_MARGIN, 1.0 - POS_MARGIN);
    if blocked(nx, pos[1]) {
        vel[0] = 0.0;
    } else {
        pos[0] = nx;
    }
    let ny = (pos[1] + vel[1]).clamp(POS_MARGIN, 1.0 - POS_MARGIN);
    if blocked(pos[0], ny) {
        vel[1] = 0.0;
    } else {
        pos[1] = ny;
    }
    MazeState { pos, vel }
}

pub fn render(state: &MazeState, cfg: &EnvConfig) -> Obs {
    let mut img = raster::blank([235, 235, 228]);
    let (x0, y0, x1, y1) = BLOCK;
    raster::rect(&mut img, x0, y0, x1, y1, [52, 54, 70]);
    // border frame
    raster::rect(&mut img, 0.0, 0.0, 1.0, 0.015, [52, 54, 70]);
    raster::rect(&mut img, 0.0, 0.985, 1.0, 1.0, [52, 54, 70]);
    raster::rect(&mut img, 0.0, 0.0, 0.015, 1.0, [52, 54, 70]);
    raster::rect(&mut img, 0.985, 0.0, 1.0, 1.0, [52, 54, 70]);
    raster::disk(
        &mut img,
        state.pos[0],
        state.pos[1],
        cfg.maze.agent_radius,
        [190, 30, 50],
        3.0,
    );
    img
}

pub fn success(state: &MazeState, goal: &MazeState, cfg: &EnvConfig) -> bool {
    let dx = state.pos[0] - goal.pos[0];
    let dy = state.pos[1] - goal.pos[1];
    (dx * dx + dy * dy).sqrt() <= cfg.success.pos_eps()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn inertia_carries_motion() {
        let cfg = EnvConfig::default();
        let s0 = MazeState { pos: [0.1, 0.1], vel: [0.0, 0.0] };
        let s1 = step(&s0, [0.05, 0.0], &cfg);
        // coast with zero action: velocity persists (damped)
        let s2 = step(&s1, [0.0, 0.0], &cfg);
        assert!(s2.pos[0] > s1.pos[0]);
        assert!(s2.vel[0] > 0.0);
        assert!(s2.vel[0] < s1.vel[0]);
    }

    #[test]
    fn cannot_enter_center_block() {
        let cfg = EnvConfig::default();
        let mut s = MazeState { pos: [0.25, 0.5], vel: [0.0, 0.0] };
        for _ in 0..50 {
            s = step(&s, [0.1, 0.0], &cfg);
            assert!(!blocked(s.pos[0], s.pos[1]), "entered block at {:?}", s.pos);
        }
        // pinned against the block's left margin
        assert!(s.pos[0] < BLOCK.0);
    }

    #[test]
    fn free_points_are_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = free_point(&mut rng);
            assert!(!blocked(p[0], p[1]));
        }
    }
}
