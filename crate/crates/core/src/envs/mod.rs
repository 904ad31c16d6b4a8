//! Native desk-scale simulators: Wall (fixed and randomized layouts), a
//! point maze with inertia, and planar pushing with several block shapes.
//! All environments are pure functions of `(state, action)` plus a stateless
//! renderer, so instances can run in parallel freely.

pub mod maze;
pub mod push;
pub mod raster;
pub mod wall;

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Obs, Trajectory};
use crate::error::{Error, Result};

pub use push::{PushState, ShapeId};
pub use wall::WallState;
pub use maze::MazeState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvState {
    Wall(WallState),
    Maze(MazeState),
    Push(PushState),
}

/// A goal for evaluation: the image the planner sees and the underlying
/// state, which only the success predicate may consult.
#[derive(Clone, Debug)]
pub struct GoalSpec {
    pub goal_obs: Obs,
    pub goal_state: EnvState,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct WallParams {
    pub door_half: f64,
    pub wall_half_width: f64,
    pub agent_radius: f64,
    pub wall_x_range: (f64, f64),
    pub door_y_range: (f64, f64),
}

impl Default for WallParams {
    fn default() -> Self {
        WallParams {
            door_half: 0.10,
            wall_half_width: 0.018,
            agent_radius: 0.09,
            wall_x_range: (0.32, 0.68),
            door_y_range: (0.18, 0.82),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MazeParams {
    pub damping: f64,
    pub vmax: f64,
    pub agent_radius: f64,
}

impl Default for MazeParams {
    fn default() -> Self {
        MazeParams { damping: 0.1, vmax: 0.08, agent_radius: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PushParams {
    pub pusher_radius: f64,
    pub substep_len: f64,
    pub contact_tol: f64,
    pub rot_beta: f64,
    pub max_contact_iters: usize,
}

impl Default for PushParams {
    fn default() -> Self {
        PushParams {
            pusher_radius: 0.04,
            substep_len: 0.002,
            contact_tol: 1e-5,
            rot_beta: 0.06,
            max_contact_iters: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessParams {
    /// Position tolerance as a fraction of the arena diagonal (Wall, Maze).
    pub pos_frac: f64,
    /// Pushing: positional tolerance for block and pusher, arena units.
    pub push_xy_eps: f64,
    /// Pushing: block orientation tolerance, degrees.
    pub push_theta_eps_deg: f64,
}

impl Default for SuccessParams {
    fn default() -> Self {
        SuccessParams { pos_frac: 0.05, push_xy_eps: 0.07, push_theta_eps_deg: 15.0 }
    }
}

impl SuccessParams {
    pub fn pos_eps(&self) -> f64 {
        self.pos_frac * std::f64::consts::SQRT_2
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Per-component action bound; actions are clamped into [-b, b].
    pub action_bound: f64,
    /// First-order smoothing coefficient for generated random actions
    /// (0 = i.i.d. uniform).
    pub gen_action_smoothing: f64,
    pub wall: WallParams,
    pub maze: MazeParams,
    pub push: PushParams,
    pub success: SuccessParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            action_bound: 0.1,
            gen_action_smoothing: 0.0,
            wall: WallParams::default(),
            maze: MazeParams::default(),
            push: PushParams::default(),
            success: SuccessParams::default(),
        }
    }
}

pub const ENV_NAMES: [&str; 5] = ["wall", "wall_random", "point_maze", "push_t", "push_obj"];

pub fn action_dim(env: &str) -> Result<usize> {
    match env {
        "wall" | "wall_random" | "point_maze" | "push_t" | "push_obj" => Ok(2),
        other => Err(Error::UnknownEnv(other.into())),
    }
}

pub fn proprio_dim(env: &str) -> Result<usize> {
    match env {
        "wall" | "wall_random" | "point_maze" => Ok(0),
        "push_t" | "push_obj" => Ok(2),
        other => Err(Error::UnknownEnv(other.into())),
    }
}

/// Proprioceptive readout attached to each frame (pusher position for the
/// pushing environments; nothing elsewhere).
pub fn proprio_of(state: &EnvState) -> Vec<f32> {
    match state {
        EnvState::Push(p) => vec![p.pusher[0] as f32, p.pusher[1] as f32],
        _ => Vec::new(),
    }
}

fn shapes_for(env: &str) -> &'static [ShapeId] {
    match env {
        "push_obj" => &ShapeId::TRAIN_SET,
        _ => std::slice::from_ref(&ShapeId::TRAIN_SET[0]), // push_t: T only
    }
}

fn validate_cfg(cfg: &EnvConfig) -> Result<()> {
    if !(cfg.action_bound > 0.0 && cfg.action_bound.is_finite()) {
        return Err(Error::InvalidArgument("action_bound must be positive".into()));
    }
    if !(cfg.wall.door_half > 0.0 && cfg.wall.door_half < 0.5) {
        return Err(Error::InvalidArgument("wall.door_half out of range".into()));
    }
    if cfg.push.substep_len <= 0.0 {
        return Err(Error::InvalidArgument("push.substep_len must be positive".into()));
    }
    Ok(())
}

fn reset_with_rng(env: &str, rng: &mut ChaCha8Rng, cfg: &EnvConfig) -> Result<EnvState> {
    validate_cfg(cfg)?;
    Ok(match env {
        "wall" => EnvState::Wall(wall::reset(rng, false, cfg)),
        "wall_random" => EnvState::Wall(wall::reset(rng, true, cfg)),
        "point_maze" => EnvState::Maze(maze::reset(rng)),
        "push_t" | "push_obj" => EnvState::Push(push::reset(rng, shapes_for(env), cfg)),
        other => return Err(Error::UnknownEnv(other.into())),
    })
}

/// Deterministic reset: same `(env, seed, config)` gives the same state and
/// pixels.
pub fn reset(env: &str, seed: u64, cfg: &EnvConfig) -> Result<(EnvState, Obs)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = reset_with_rng(env, &mut rng, cfg)?;
    let obs = render(&state, cfg);
    Ok((state, obs))
}

/// Reset driven by an external rng stream; consumes exactly the draws that
/// trajectory generation consumed, so stored trajectories can be replayed.
pub fn reset_from_rng_for_replay(
    env: &str,
    rng: &mut ChaCha8Rng,
    cfg: &EnvConfig,
) -> Result<EnvState> {
    reset_with_rng(env, rng, cfg)
}

pub struct StepOutcome {
    pub state: EnvState,
    pub obs: Obs,
    pub clamped: bool,
}

/// Advance one control step and render.
pub fn step(state: &EnvState, action: &[f64], cfg: &EnvConfig) -> Result<StepOutcome> {
    let (next, clamped) = step_state(state, action, cfg)?;
    let obs = render(&next, cfg);
    Ok(StepOutcome { state: next, obs, clamped })
}

/// Advance one control step without rendering.
pub fn step_state(state: &EnvState, action: &[f64], cfg: &EnvConfig) -> Result<(EnvState, bool)> {
    if action.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "action has {} components, expected 2",
            action.len()
        )));
    }
    if !action.iter().all(|a| a.is_finite()) {
        return Err(Error::NonFinite("action".into()));
    }
    let b = cfg.action_bound;
    let a = [action[0].clamp(-b, b), action[1].clamp(-b, b)];
    let clamped = a != [action[0], action[1]];
    let next = match state {
        EnvState::Wall(s) => EnvState::Wall(wall::step(s, a, cfg)),
        EnvState::Maze(s) => EnvState::Maze(maze::step(s, a, cfg)),
        EnvState::Push(s) => EnvState::Push(push::step(s, a, cfg)),
    };
    Ok((next, clamped))
}

/// Deterministic rasterization of a state.
pub fn render(state: &EnvState, cfg: &EnvConfig) -> Obs {
    match state {
        EnvState::Wall(s) => wall::render(s, cfg),
        EnvState::Maze(s) => maze::render(s, cfg),
        EnvState::Push(s) => push::render(s, cfg),
    }
}

/// Environment-specific success predicate. Pure; errors on mismatched kinds.
pub fn success(state: &EnvState, goal: &GoalSpec, cfg: &EnvConfig) -> Result<bool> {
    match (state, &goal.goal_state) {
        (EnvState::Wall(s), EnvState::Wall(g)) => Ok(wall::success(s, g, cfg)),
        (EnvState::Maze(s), EnvState::Maze(g)) => Ok(maze::success(s, g, cfg)),
        (EnvState::Push(s), EnvState::Push(g)) => {
            if s.shape != g.shape {
                return Err(Error::Mismatch("block shapes differ".into()));
            }
            Ok(push::success(s, g, cfg))
        }
        _ => Err(Error::Mismatch("state and goal come from different environments".into())),
    }
}

/// Sample an (initial state, goal) evaluation task.
///
/// Wall: start and goal in opposite rooms. Maze: free-space points. Pushing:
/// the goal is produced by rolling up to 25 random steps forward from the
/// initial state, so it is feasible by construction.
pub fn sample_task(env: &str, seed: u64, cfg: &EnvConfig) -> Result<(EnvState, GoalSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7a5c);
    // push_obj evaluates generalization: tasks use the held-out shapes that
    // never appear in generated datasets
    let init = if env == "push_obj" {
        validate_cfg(cfg)?;
        EnvState::Push(push::reset(&mut rng, &ShapeId::EVAL_SET, cfg))
    } else {
        reset_with_rng(env, &mut rng, cfg)?
    };
    let goal_state = match (&init, env) {
        (EnvState::Wall(w), _) => {
            let goal_left = w.pos[0] > w.wall_x; // opposite room
            let pos = wall::sample_in_room(&mut rng, w.wall_x, goal_left);
            EnvState::Wall(WallState { pos, ..*w })
        }
        (EnvState::Maze(_), _) => {
            EnvState::Maze(MazeState { pos: maze::free_point(&mut rng), vel: [0.0, 0.0] })
        }
        (EnvState::Push(_), _) => {
            let mut s = init;
            let b = cfg.action_bound;
            for _ in 0..25 {
                let a = [rng.random_range(-b..b), rng.random_range(-b..b)];
                let (next, _) = step_state(&s, &a, cfg)?;
                s = next;
            }
            s
        }
    };
    let goal_obs = render(&goal_state, cfg);
    Ok((init, GoalSpec { goal_obs, goal_state }))
}

/// Per-trajectory generation seed, derived so trajectories are independent
/// of each other and of `n_traj`.
pub fn traj_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Roll one random-policy trajectory of `len` frames.
pub fn generate_trajectory(env: &str, len: usize, seed: u64, cfg: &EnvConfig) -> Result<Trajectory> {
    if len < 2 {
        return Err(Error::InvalidArgument("trajectory length must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state0 = reset_with_rng(env, &mut rng, cfg)?;
    let p = proprio_dim(env)?;
    let a_dim = action_dim(env)?;
    let b = cfg.action_bound;
    let alpha = cfg.gen_action_smoothing.clamp(0.0, 0.99);

    let mut observations = Vec::with_capacity(len);
    let mut proprio = Array2::<f32>::zeros((len, p));
    let mut actions = Array2::<f32>::zeros((len - 1, a_dim));
    let mut state = state0;
    observations.push(render(&state, cfg));
    proprio.row_mut(0).assign(&Array1::from(proprio_of(&state)));
    let mut prev = [0.0f64; 2];
    for t in 0..len - 1 {
        let fresh = [rng.random_range(-b..b), rng.random_range(-b..b)];
        // quantize to f32 before stepping so stored actions replay bit-exactly
        let act = [
            (alpha * prev[0] + (1.0 - alpha) * fresh[0]).clamp(-b, b) as f32 as f64,
            (alpha * prev[1] + (1.0 - alpha) * fresh[1]).clamp(-b, b) as f32 as f64,
        ];
        prev = act;
        actions[[t, 0]] = act[0] as f32;
        actions[[t, 1]] = act[1] as f32;
        let out = step(&state, &act, cfg)?;
        state = out.state;
        observations.push(out.obs);
        proprio
            .row_mut(t + 1)
            .assign(&Array1::from(proprio_of(&state)));
    }
    Ok(Trajectory { observations, proprio, actions, env_name: env.to_string(), seed })
}

/// Generate `n_traj` random-policy trajectories (parallel, deterministic).
pub fn generate_dataset(
    env: &str,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
    cfg: &EnvConfig,
) -> Result<Dataset> {
    if n_traj < 1 {
        return Err(Error::InvalidArgument("n_traj must be >= 1".into()));
    }
    action_dim(env)?;
    let trajectories: Vec<Result<Trajectory>> = (0..n_traj)
        .into_par_iter()
        .map(|i| generate_trajectory(env, traj_len, traj_seed(seed, i), cfg))
        .collect();
    let trajectories: Result<Vec<Trajectory>> = trajectories.into_iter().collect();
    Dataset::new(trajectories?)
}

/// Stream trajectories straight to a dataset directory without holding them
/// all in memory. Produces a directory byte-identical to
/// `write_dataset(generate_dataset(..))`.
pub fn generate_dataset_to_dir(
    env: &str,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
    cfg: &EnvConfig,
    dir: &std::path::Path,
) -> Result<()> {
    use crate::data::io::{record_name, write_record};
    use crate::data::DatasetMeta;
    if n_traj < 1 {
        return Err(Error::InvalidArgument("n_traj must be >= 1".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        env_name: env.to_string(),
        action_dim: action_dim(env)?,
        proprio_dim: proprio_dim(env)?,
        n_traj,
        traj_len_min: traj_len,
        traj_len_max: traj_len,
        frames_total: n_traj * traj_len,
    };
    let meta_path = dir.join("metadata.json");
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta).unwrap())
        .map_err(|e| Error::io(&meta_path, e))?;
    let results: Vec<Result<()>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let tr = generate_trajectory(env, traj_len, traj_seed(seed, i), cfg)?;
            write_record(&dir.join(record_name(i)), &tr)
        })
        .collect();
    results.into_iter().collect()
}
