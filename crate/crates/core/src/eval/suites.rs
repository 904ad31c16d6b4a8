//! Experiment suites: train-and-evaluate drivers producing machine-readable
//! reports. Each suite mirrors one of the crate's headline experiments:
//! overall goal-reaching, randomized-layout and unseen-shape generalization,
//! dataset scaling, the causal-mask ablation, and the patch-vs-pooled
//! encoder comparison.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{make_encoder, Encoder};
use crate::envs::{self, EnvConfig};
use crate::error::{Error, Result};
use crate::planner::{self, EpisodeResult, Method, PlanConfig};
use crate::trainer::{
    train_predictor_latent, EpochLog, LatentDataset, ReplayImages, TrainConfig, WorldModel,
};

use super::{success_rate, wilson_interval};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub env: String,
    pub env_cfg: EnvConfig,
    pub encoder: String,
    pub train: TrainConfig,
    pub plan: PlanConfig,
    pub data_n: usize,
    pub data_len: usize,
    pub data_seed: u64,
    pub episodes: usize,
    pub episode_seed: u64,
    /// Dataset sizes for the scaling suite.
    pub scales: Vec<usize>,
    pub decoder_epochs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            env: "wall".into(),
            env_cfg: EnvConfig::default(),
            encoder: "test:seed=0,n=16,e=32".into(),
            train: TrainConfig::default(),
            plan: PlanConfig::default(),
            data_n: 200,
            data_len: 50,
            data_seed: 0,
            episodes: 50,
            episode_seed: 1000,
            scales: vec![200, 500, 1000],
            decoder_epochs: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub rows: Vec<ReportRow>,
}

impl SuiteReport {
    pub fn render_table(&self) -> String {
        let mut out = format!("suite: {}\n", self.suite);
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(8)
            .max(8);
        for row in &self.rows {
            out.push_str(&format!("{:width$}", row.label, width = width));
            for (k, v) in &row.metrics {
                out.push_str(&format!("  {k}={v:.4}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let mut obj = serde_json::Map::new();
            obj.insert("suite".into(), self.suite.clone().into());
            obj.insert("label".into(), row.label.clone().into());
            for (k, v) in &row.metrics {
                obj.insert(k.clone(), serde_json::json!(v));
            }
            out.push_str(&serde_json::to_string(&obj).unwrap());
            out.push('\n');
        }
        out
    }
}

pub fn task_seed(episode_seed: u64, i: usize) -> u64 {
    let mut z = episode_seed ^ (i as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate data, train a model, and hand back model plus encoder.
pub fn train_world_model(
    cfg: &SuiteConfig,
) -> Result<(WorldModel, Box<dyn Encoder>, Vec<EpochLog>)> {
    let encoder = make_encoder(&cfg.encoder)?;
    let lds = LatentDataset::generate(
        &cfg.env,
        cfg.data_n,
        cfg.data_len,
        cfg.data_seed,
        &cfg.env_cfg,
        encoder.as_ref(),
    )?;
    let images;
    let provider: Option<&dyn crate::trainer::ImageProvider> =
        if cfg.train.ablations.decoder_loss_to_predictor {
            images = ReplayImages::from_latent(&lds, cfg.env_cfg);
            Some(&images)
        } else {
            None
        };
    let out = train_predictor_latent(&lds, &cfg.train, provider, None)?;
    // evaluate with the best-validation parameters
    let (model, logs) = out.into_best_model();
    Ok((model, encoder, logs))
}

/// Execute one open-loop plan: optimize once, run every raw action, succeed
/// if any visited state satisfies the predicate.
fn run_open_loop(
    env: &str,
    env_cfg: &EnvConfig,
    model: &WorldModel,
    encoder: &dyn Encoder,
    task_seed: u64,
    plan_cfg: &PlanConfig,
) -> Result<EpisodeResult> {
    let (init, goal) = envs::sample_task(env, task_seed, env_cfg)?;
    let obs = envs::render(&init, env_cfg);
    let proprio = model
        .proprio_embed
        .as_ref()
        .map(|_| envs::proprio_of(&init).iter().map(|v| *v as f64).collect::<Vec<f64>>());
    let mut cfg = plan_cfg.clone();
    cfg.seed = task_seed ^ 0x9e37;
    let plan = match plan_cfg.method {
        Method::Gd => planner::gd_plan(
            model,
            encoder,
            &obs,
            proprio,
            &goal.goal_obs,
            env_cfg.action_bound,
            &cfg,
        )?,
        _ => planner::cem_plan(
            model,
            encoder,
            &obs,
            proprio,
            &goal.goal_obs,
            env_cfg.action_bound,
            &cfg,
        )?,
    };
    let mut state = init;
    let mut steps = 0;
    let mut success = envs::success(&state, &goal, env_cfg)?;
    if !success {
        for raw in &plan.actions {
            let (next, _) = envs::step_state(&state, raw, env_cfg)?;
            state = next;
            steps += 1;
            if envs::success(&state, &goal, env_cfg)? {
                success = true;
                break;
            }
        }
    }
    Ok(EpisodeResult {
        success,
        steps,
        replans: 0,
        final_plan_cost: plan.best_cost,
        frames: Vec::new(),
    })
}

/// Evaluate `episodes` tasks with the configured method, in parallel.
pub fn eval_episodes(
    env: &str,
    env_cfg: &EnvConfig,
    model: &WorldModel,
    encoder: &dyn Encoder,
    plan_cfg: &PlanConfig,
    episodes: usize,
    episode_seed: u64,
) -> Result<Vec<EpisodeResult>> {
    let results: Vec<Result<EpisodeResult>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let seed = task_seed(episode_seed, i);
            match plan_cfg.method {
                Method::MpcCem => {
                    let (init, goal) = envs::sample_task(env, seed, env_cfg)?;
                    let mut cfg = plan_cfg.clone();
                    cfg.seed = seed ^ 0x517c;
                    planner::mpc_run(env, env_cfg, model, encoder, &init, &goal, &cfg)
                }
                _ => run_open_loop(env, env_cfg, model, encoder, seed, plan_cfg),
            }
        })
        .collect();
    results.into_iter().collect()
}

/// Uniform-random action baseline over the same tasks and step budget.
pub fn random_baseline(
    env: &str,
    env_cfg: &EnvConfig,
    episodes: usize,
    episode_seed: u64,
    step_budget: usize,
) -> Result<Vec<EpisodeResult>> {
    let results: Vec<Result<EpisodeResult>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let seed = task_seed(episode_seed, i);
            let (init, goal) = envs::sample_task(env, seed, env_cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
            let b = env_cfg.action_bound;
            let mut state = init;
            let mut success = envs::success(&state, &goal, env_cfg)?;
            let mut steps = 0;
            while !success && steps < step_budget {
                let a = [rng.random_range(-b..b), rng.random_range(-b..b)];
                let (next, _) = envs::step_state(&state, &a, env_cfg)?;
                state = next;
                steps += 1;
                success = envs::success(&state, &goal, env_cfg)?;
            }
            Ok(EpisodeResult {
                success,
                steps,
                replans: 0,
                final_plan_cost: f64::NAN,
                frames: Vec::new(),
            })
        })
        .collect();
    results.into_iter().collect()
}

pub fn mpc_step_budget(plan: &PlanConfig, frameskip: usize) -> usize {
    plan.max_plan_rounds * plan.execute_k.max(1) * frameskip
}

fn sr_row(label: &str, results: &[EpisodeResult], extra: Vec<(String, f64)>) -> Result<ReportRow> {
    let sr = success_rate(results)?;
    let wins = results.iter().filter(|r| r.success).count();
    let (lo, hi) = wilson_interval(wins, results.len());
    let mut metrics = vec![
        ("sr".to_string(), sr),
        ("wilson_lo".to_string(), lo),
        ("wilson_hi".to_string(), hi),
        ("episodes".to_string(), results.len() as f64),
    ];
    metrics.extend(extra);
    Ok(ReportRow { label: label.to_string(), metrics })
}

pub const SUITE_NAMES: [&str; 6] = [
    "main",
    "wallrandom",
    "pushobj",
    "scaling",
    "mask_ablation",
    "encoder_compare",
];

/// Run a named suite end to end.
pub fn run_suite(name: &str, cfg: &SuiteConfig) -> Result<SuiteReport> {
    match name {
        "main" => {
            let (model, enc, logs) = train_world_model(cfg)?;
            let eps = eval_episodes(
                &cfg.env,
                &cfg.env_cfg,
                &model,
                enc.as_ref(),
                &cfg.plan,
                cfg.episodes,
                cfg.episode_seed,
            )?;
            let val = logs.last().map(|l| l.val_loss).unwrap_or(f64::NAN);
            Ok(SuiteReport {
                suite: "main".into(),
                rows: vec![sr_row(&cfg.env, &eps, vec![("val_loss".into(), val)])?],
            })
        }
        "wallrandom" => {
            let mut c = cfg.clone();
            c.env = "wall_random".into();
            let (model, enc, _) = train_world_model(&c)?;
            let eps = eval_episodes(
                &c.env,
                &c.env_cfg,
                &model,
                enc.as_ref(),
                &c.plan,
                c.episodes,
                c.episode_seed,
            )?;
            Ok(SuiteReport {
                suite: "wallrandom".into(),
                rows: vec![sr_row("wall_random", &eps, vec![])?],
            })
        }
        "pushobj" => {
            let mut c = cfg.clone();
            c.env = "push_obj".into();
            let (model, enc, _) = train_world_model(&c)?;
            let eps = eval_episodes(
                &c.env,
                &c.env_cfg,
                &model,
                enc.as_ref(),
                &c.plan,
                c.episodes,
                c.episode_seed,
            )?;
            Ok(SuiteReport {
                suite: "pushobj".into(),
                rows: vec![sr_row("push_obj_unseen_shapes", &eps, vec![])?],
            })
        }
        "scaling" => {
            let mut rows = Vec::new();
            for &n in &cfg.scales {
                let mut c = cfg.clone();
                c.data_n = n;
                let (model, enc, logs) = train_world_model(&c)?;
                let eps = eval_episodes(
                    &c.env,
                    &c.env_cfg,
                    &model,
                    enc.as_ref(),
                    &c.plan,
                    c.episodes,
                    c.episode_seed,
                )?;
                let val = logs.last().map(|l| l.val_loss).unwrap_or(f64::NAN);
                rows.push(sr_row(
                    &format!("n={n}"),
                    &eps,
                    vec![("val_loss".into(), val), ("n_traj".into(), n as f64)],
                )?);
            }
            Ok(SuiteReport { suite: "scaling".into(), rows })
        }
        "mask_ablation" => {
            let mut rows = Vec::new();
            for masked in [true, false] {
                let mut c = cfg.clone();
                c.train.ablations.no_causal_mask = !masked;
                let (model, enc, logs) = train_world_model(&c)?;
                let eps = eval_episodes(
                    &c.env,
                    &c.env_cfg,
                    &model,
                    enc.as_ref(),
                    &c.plan,
                    c.episodes,
                    c.episode_seed,
                )?;
                let val = logs.last().map(|l| l.val_loss).unwrap_or(f64::NAN);
                let label = if masked { "with_mask" } else { "no_mask" };
                rows.push(sr_row(
                    &format!("{label}_h{}", c.train.h),
                    &eps,
                    vec![("val_loss".into(), val)],
                )?);
            }
            Ok(SuiteReport { suite: "mask_ablation".into(), rows })
        }
        "encoder_compare" => {
            let pooled_spec = pooled_variant(&cfg.encoder)?;
            let mut rows = Vec::new();
            for (label, spec) in [("patch", cfg.encoder.clone()), ("pooled", pooled_spec)] {
                let mut c = cfg.clone();
                c.encoder = spec;
                let (model, enc, _) = train_world_model(&c)?;
                let eps = eval_episodes(
                    &c.env,
                    &c.env_cfg,
                    &model,
                    enc.as_ref(),
                    &c.plan,
                    c.episodes,
                    c.episode_seed,
                )?;
                rows.push(sr_row(label, &eps, vec![])?);
            }
            Ok(SuiteReport { suite: "encoder_compare".into(), rows })
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown suite `{other}`; available: {}",
            SUITE_NAMES.join(", ")
        ))),
    }
}

/// Map an encoder spec to its single-vector (pooled) counterpart.
pub fn pooled_variant(spec: &str) -> Result<String> {
    if let Some(rest) = spec.strip_prefix("test:") {
        Ok(format!("test-pooled:{rest}"))
    } else if let Some(rest) = spec.strip_prefix("vit:") {
        Ok(format!("vit-cls:{rest}"))
    } else {
        Err(Error::InvalidArgument(format!("no pooled variant for `{spec}`")))
    }
}
