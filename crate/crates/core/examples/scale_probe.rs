//! Scratch probe for the dataset-scaling trend at desk scale.

use std::time::Instant;

use latent_wm::eval::success_rate;
use latent_wm::eval::suites::{eval_episodes, train_world_model, SuiteConfig};

fn main() {
    let text = std::fs::read_to_string("configs/scaling.toml").unwrap();
    let base: SuiteConfig = toml::from_str(&text).unwrap();
    for n in base.scales.clone() {
        let mut cfg = base.clone();
        cfg.data_n = n;
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
            cfg.episodes,
            cfg.episode_seed,
        )
        .unwrap();
        eprintln!(
            "n={n}: train {train_s:.0}s val {:.4} eval {:.0}s SR {:.2}",
            logs.last().unwrap().val_loss,
            t1.elapsed().as_secs_f64(),
            success_rate(&eps).unwrap()
        );
    }
}
