//! Scratch probe for the causal-mask ablation ordering at desk scale.

use std::time::Instant;

use latent_wm::envs::EnvConfig;
use latent_wm::eval::success_rate;
use latent_wm::eval::suites::{eval_episodes, train_world_model, SuiteConfig};
use latent_wm::planner::{Method, PlanConfig};
use latent_wm::trainer::TrainConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let episodes: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);

    let base = SuiteConfig {
        env: "wall".into(),
        env_cfg: EnvConfig::default(),
        encoder: "test:seed=0,n=16,e=48".into(),
        train: TrainConfig {
            epochs,
            batch: 32,
            h: 3,
            frameskip: 5,
            depth: 2,
            heads: 4,
            mlp_dim: 128,
            embed_dim: 64,
            lr_predictor: 4e-4,
            lr_action_enc: 1e-3,
            max_batches_per_epoch: Some(250),
            max_eval_segments: 128,
            seed: 0,
            ..TrainConfig::default()
        },
        plan: PlanConfig {
            horizon: 3,
            n_samples: 64,
            iterations: 6,
            execute_k: 1,
            method: Method::MpcCem,
            max_plan_rounds: 10,
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

    for masked in [true, false] {
        let mut cfg = base.clone();
        cfg.train.ablations.no_causal_mask = !masked;
        let t0 = Instant::now();
        let (model, enc, logs) = train_world_model(&cfg).unwrap();
        let train_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let eps = eval_episodes(
            &cfg.env,
            &cfg.env_cfg,
            &model,
            enc.as_ref(),
            &cfg.plan,
            episodes,
            cfg.episode_seed,
        )
        .unwrap();
        eprintln!(
            "mask={masked}: train {train_s:.0}s (val {:.4} -> {:.4}) eval {:.0}s SR {:.2}",
            logs.first().unwrap().val_loss,
            logs.last().unwrap().val_loss,
            t1.elapsed().as_secs_f64(),
            success_rate(&eps).unwrap()
        );
    }
}
