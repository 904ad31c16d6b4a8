//! Two rooms separated by a vertical wall with a door gap. The agent is a
//! point mass moved directly by the (clamped) action; motion through the
//! wall is blocked unless the crossing point lies within the door span.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Obs;

use super::raster;
use super::EnvConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallState {
    pub pos: [f64; 2],
    pub wall_x: f64,
    pub door_y: f64,
}

pub const FIXED_WALL_X: f64 = 0.5;
pub const FIXED_DOOR_Y: f64 = 0.5;
const POS_MARGIN: f64 = 0.105;

pub fn reset(rng: &mut ChaCha8Rng, randomize_layout: bool, cfg: &EnvConfig) -> WallState {
    let (wall_x, door_y) = if randomize_layout {
        (
            rng.random_range(cfg.wall.wall_x_range.0..cfg.wall.wall_x_range.1),
            rng.random_range(cfg.wall.door_y_range.0..cfg.wall.door_y_range.1),
        )
    } else {
        (FIXED_WALL_X, FIXED_DOOR_Y)
    };
    let left = rng.random_bool(0.5);
    let pos = sample_in_room(rng, wall_x, left);
    WallState { pos, wall_x, door_y }
}

pub fn sample_in_room(rng: &mut ChaCha8Rng, wall_x: f64, left: bool) -> [f64; 2] {
    let (x0, x1) = if left {
        (POS_MARGIN, wall_x - POS_MARGIN)
    } else {
        (wall_x + POS_MARGIN, 1.0 - POS_MARGIN)
    };
    [
        rng.random_range(x0..x1),
        rng.random_range(POS_MARGIN..1.0 - POS_MARGIN),
    ]
}

pub fn step(state: &WallState, action: [f64; 2], cfg: &EnvConfig) -> WallState {
    let mut nx = (state.pos[0] + action[0]).clamp(POS_MARGIN, 1.0 - POS_MARGIN);
    let ny = (state.pos[1] + action[1]).clamp(POS_MARGIN, 1.0 - POS_MARGIN);
    let (x0, x1) = (state.pos[0], nx);
    let w = state.wall_x;
    if (x0 - w) * (x1 - w) < 0.0 {
        // path crosses the wall plane; interpolate y at the crossing
        let t = (w - x0) / (x1 - x0);
        let yc = state.pos[1] + t * (ny - state.pos[1]);
        if (yc - state.door_y).abs() > cfg.wall.door_half {
            // blocked: stop at the wall face on the starting side
            let eps = 1e-3;
            nx = if x0 < w { w - eps } else { w + eps };
        }
    }
    WallState { pos: [nx, ny], wall_x: state.wall_x, door_y: state.door_y }
}

pub fn render(state: &WallState, cfg: &EnvConfig) -> Obs {
    let mut img = raster::blank([24, 26, 56]);
    let half_w = cfg.wall.wall_half_width;
    // wall column with door gap
    raster::rect(
        &mut img,
        state.wall_x - half_w,
        0.0,
        state.wall_x + half_w,
        state.door_y - cfg.wall.door_half,
        [200, 200, 210],
    );
    raster::rect(
        &mut img,
        state.wall_x - half_w,
        state.door_y + cfg.wall.door_half,
        state.wall_x + half_w,
        1.0,
        [200, 200, 210],
    );
    raster::disk(
        &mut img,
        state.pos[0],
        state.pos[1],
        cfg.wall.agent_radius,
        [255, 170, 40],
        3.0,
    );
    img
}

pub fn success(state: &WallState, goal: &WallState, cfg: &EnvConfig) -> bool {
    let dx = state.pos[0] - goal.pos[0];
    let dy = state.pos[1] - goal.pos[1];
    (dx * dx + dy * dy).sqrt() <= cfg.success.pos_eps()
}
