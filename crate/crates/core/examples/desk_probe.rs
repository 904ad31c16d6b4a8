//! Scratch diagnostics for desk-scale Wall training + planning (not part of
//! the test suite; run with `cargo run --release --example desk_probe`).

use std::time::Instant;

use latent_wm::encoders::{encode_obs, Encoder};
use latent_wm::envs::{self, EnvConfig, EnvState, WallState};
use latent_wm::eval::suites::{
    eval_episodes, mpc_step_budget, random_baseline, train_world_model, SuiteConfig,
};
use latent_wm::eval::{open_loop_eval, success_rate};
use latent_wm::planner::{self, latent_cost, Method, PlanConfig};
use latent_wm::trainer::TrainConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let episodes: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);

    let cfg = SuiteConfig {
        env: "wall".into(),
        env_cfg: EnvConfig::default(),
        encoder: "test:seed=0,n=16,e=48".into(),
        train: TrainConfig {
            epochs,
            batch: 32,
            h: 1,
            frameskip: 5,
            depth: 2,
            heads: 4,
            mlp_dim: 128,
            embed_dim: 64,
            lr_predictor: 3e-4,
            lr_action_enc: 1e-3,
            seed: 0,
            ..TrainConfig::default()
        },
        plan: PlanConfig {
            horizon: 3,
            n_samples: 96,
            iterations: 8,
            execute_k: 1,
            method: Method::MpcCem,
            max_plan_rounds: 14,
            ..PlanConfig::default()
        },
        data_n: n,
        data_len: 50,
        data_seed: 0,
        episodes,
        episode_seed: 777,
        scales: vec![],
        decoder_epochs: 0,
    };

    // ---- cost basin of the raw encoder (no model) ----
    let enc = latent_wm::encoders::make_encoder(&cfg.encoder).unwrap();
    let goal_state = WallState { pos: [0.75, 0.5], wall_x: 0.5, door_y: 0.5 };
    let zg = encode_obs(enc.as_ref(), &envs::render(&EnvState::Wall(goal_state), &cfg.env_cfg))
        .unwrap()
        .patches;
    eprintln!("encoder cost basin (goal at x=0.75, varying dx):");
    for dx in [0.0, 0.02, 0.05, 0.07, 0.1, 0.15, 0.25, 0.4] {
        let s = WallState { pos: [0.75 + dx, 0.5], ..goal_state };
        let z = encode_obs(enc.as_ref(), &envs::render(&EnvState::Wall(s), &cfg.env_cfg))
            .unwrap()
            .patches;
        eprintln!("  dx={dx:.2}  cost={:.4}", latent_cost(&z.view(), &zg.view()).unwrap());
    }

    let t0 = Instant::now();
    let (model, enc, logs) = train_world_model(&cfg).unwrap();
    eprintln!(
        "train: {:.1}s  val {:.5} -> {:.5}",
        t0.elapsed().as_secs_f64(),
        logs.first().unwrap().val_loss,
        logs.last().unwrap().val_loss
    );

    // ---- open-loop rollout error growth on a fresh trajectory ----
    let tr = envs::generate_trajectory("wall", 50, 999_999, &cfg.env_cfg).unwrap();
    let report = open_loop_eval(&model, enc.as_ref(), None, &tr, 8).unwrap();
    eprintln!("open-loop latent mse per step: {:?}", report.mse_latent);

    // ---- cost through the model: goal 2 eff-steps to the right ----
    let init = WallState { pos: [0.6, 0.5], wall_x: 0.5, door_y: 0.5 };
    let goal2 = WallState { pos: [0.8, 0.5], ..init };
    let obs0 = envs::render(&EnvState::Wall(init), &cfg.env_cfg);
    let obsg = envs::render(&EnvState::Wall(goal2), &cfg.env_cfg);
    let sys = planner::ModelSystem::new(&model, enc.as_ref(), &obs0, None, &obsg, 3, 0.1).unwrap();
    use latent_wm::planner::LatentSystem;
    let mk = |seq: &[[f64; 2]]| {
        let mut a = ndarray::Array3::<f64>::zeros((1, 3, 10));
        for (t, row) in seq.iter().enumerate() {
            for sub in 0..5 {
                a[[0, t, sub * 2]] = row[0];
                a[[0, t, sub * 2 + 1]] = row[1];
            }
        }
        a
    };
    let overshoot = mk(&[[0.1, 0.0]; 3]);
    let stay = mk(&[[0.0, 0.0]; 3]);
    let left = mk(&[[-0.1, 0.0]; 3]);
    // move exactly 0.2 right in the first effective step, then hold
    let perfect = mk(&[[0.04, 0.0], [0.0, 0.0], [0.0, 0.0]]);
    eprintln!(
        "model cost: perfect {:.4}  overshoot {:.4}  stay {:.4}  left {:.4} (goal 0.2 right)",
        sys.batch_final_costs(&perfect).unwrap()[0],
        sys.batch_final_costs(&overshoot).unwrap()[0],
        sys.batch_final_costs(&stay).unwrap()[0],
        sys.batch_final_costs(&left).unwrap()[0],
    );

    // ---- one MPC episode trace ----
    let (init, goal) = envs::sample_task("wall", 12345, &cfg.env_cfg).unwrap();
    let EnvState::Wall(gw) = goal.goal_state else { panic!() };
    let EnvState::Wall(iw) = init else { panic!() };
    eprintln!("episode: init {:?} goal {:?}", iw.pos, gw.pos);
    let mut state = init;
    let mut sys = planner::ModelSystem::new(
        &model,
        enc.as_ref(),
        &envs::render(&state, &cfg.env_cfg),
        None,
        &goal.goal_obs,
        3,
        0.1,
    )
    .unwrap();
    for round in 0..14 {
        let mut pc = cfg.plan.clone();
        pc.seed = round as u64;
        let plan = planner::cem_plan_system(&sys, 2, &pc).unwrap();
        let mut eff = Vec::new();
        for sub in 0..5 {
            let raw = &plan.actions[sub];
            let (next, _) = envs::step_state(&state, raw, &cfg.env_cfg).unwrap();
            state = next;
            eff.extend_from_slice(raw);
        }
        let EnvState::Wall(w) = state else { panic!() };
        let d = ((w.pos[0] - gw.pos[0]).powi(2) + (w.pos[1] - gw.pos[1]).powi(2)).sqrt();
        eprintln!(
            "  round {round}: plan_cost {:.4} pos {:?} dist {:.3}",
            plan.best_cost, w.pos, d
        );
        sys.push_observation(enc.as_ref(), &envs::render(&state, &cfg.env_cfg), None, eff)
            .unwrap();
    }

    // ---- full eval ----
    let t1 = Instant::now();
    let eps = eval_episodes(&cfg.env, &cfg.env_cfg, &model, enc.as_ref(), &cfg.plan, episodes, cfg.episode_seed).unwrap();
    eprintln!(
        "mpc: {:.1}s SR {:.2}",
        t1.elapsed().as_secs_f64(),
        success_rate(&eps).unwrap()
    );
    let budget = mpc_step_budget(&cfg.plan, cfg.train.frameskip);
    let base = random_baseline(&cfg.env, &cfg.env_cfg, episodes, cfg.episode_seed, budget).unwrap();
    eprintln!("random baseline SR {:.2}", success_rate(&base).unwrap());
}
