//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values (run with `--nocapture` to see them). Heavy desk-scale
//! trainings are shared between criteria through `OnceLock`.
//!
//! Full-scale runs that need exported pretrained ViT weights are `#[ignore]`d
//! by default; set `LWM_VIT_WEIGHTS` and run with `--ignored` to include them.

use std::path::PathBuf;
use std::sync::OnceLock;

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use latent_wm::data::train_val_split;
use latent_wm::decoder::chw_to_obs;
use latent_wm::encoders::{encode_obs, make_encoder, Encoder};
use latent_wm::envs::{self, EnvConfig};
use latent_wm::eval::suites::{
    eval_episodes, mpc_step_budget, pooled_variant, random_baseline, train_world_model,
    SuiteConfig,
};
use latent_wm::eval::{chamfer, obs_to_hwc, ssim, success_rate};
use latent_wm::math::{init, Arr, ParamCtx, ParamStore, Tape};
use latent_wm::planner::{
    cem_plan_system, gd_plan_system, latent_cost, toy::PointMass, LatentSystem, PlanConfig,
};
use latent_wm::predictor::{Predictor, PredictorConfig};
use latent_wm::trainer::{
    eval_loss, train_predictor_latent, ImageProvider, LatentDataset, ReplayImages, TrainConfig,
    WorldModel,
};

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load_suite_config(name: &str) -> SuiteConfig {
    let text = std::fs::read_to_string(config_path(name)).expect("config file");
    toml::from_str(&text).expect("parsable config")
}

// ---------------------------------------------------------------------------
// tiny predictor fixtures
// ---------------------------------------------------------------------------

fn tiny_cfg(causal: bool) -> PredictorConfig {
    PredictorConfig {
        depth: 2,
        heads: 2,
        mlp_dim: 32,
        embed_dim: 16,
        h: 3,
        n_patches: 4,
        e_dim: 8,
        k_dim: 4,
        p_dim: 0,
        causal_mask: causal,
    }
}

fn randn(seed: u64, shape: &[usize]) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init::normal(&mut rng, shape, 1.0)
}

struct TinyModel {
    pred: Predictor,
    store: ParamStore,
}

fn tiny_model(causal: bool) -> TinyModel {
    let pred = Predictor::new(tiny_cfg(causal)).unwrap();
    let mut store = ParamStore::new();
    pred.init_params(&mut store, 0);
    TinyModel { pred, store }
}

fn tiny_inputs(
    tape: &Tape,
    l: usize,
    b: usize,
    seed: u64,
    grad: bool,
) -> (Vec<latent_wm::math::TensorRef>, Vec<latent_wm::math::TensorRef>) {
    let frames = (0..l)
        .map(|i| tape.leaf(randn(seed + i as u64, &[b, 4, 8]), grad))
        .collect();
    let acts = (0..l)
        .map(|i| tape.leaf(randn(seed + 50 + i as u64, &[b, 4]), false))
        .collect();
    (frames, acts)
}

/// Criterion 1: with the causal mask, perturbing any future frame moves
/// past-frame predictions by <= 1e-5; without it, by >= 1e-3.
#[test]
fn criterion_01_causality_property() {
    for (masked, bound_is_upper) in [(true, true), (false, false)] {
        let m = tiny_model(masked);
        let tape = Tape::new();
        let ctx = ParamCtx::frozen(&tape, &m.store);
        let (frames, acts) = tiny_inputs(&tape, 3, 2, 0, false);
        let base = tape.value(m.pred.forward(&ctx, &frames, &acts));
        for pert in 1..3usize {
            let tape2 = Tape::new();
            let ctx2 = ParamCtx::frozen(&tape2, &m.store);
            let (mut frames2, acts2) = tiny_inputs(&tape2, 3, 2, 0, false);
            frames2[pert] =
                tape2.leaf(randn(pert as u64, &[2, 4, 8]).mapv(|v| v + 1.0), false);
            let out = tape2.value(m.pred.forward(&ctx2, &frames2, &acts2));
            let mut max_past = 0.0f64;
            for b in 0..2 {
                for t in 0..pert {
                    for n in 0..4 {
                        for d in 0..8 {
                            max_past =
                                max_past.max((base[[b, t, n, d]] - out[[b, t, n, d]]).abs());
                        }
                    }
                }
            }
            if bound_is_upper {
                assert!(
                    max_past <= 1e-5,
                    "masked model leaked future frame {pert}: {max_past}"
                );
            } else {
                assert!(
                    max_past >= 1e-3,
                    "unmasked model ignored future frame {pert}: {max_past}"
                );
            }
        }
    }
    // analytic route: gradient of a past slot w.r.t. future frames is zero
    let m = tiny_model(true);
    let tape = Tape::new();
    let ctx = ParamCtx::new(&tape, &m.store);
    let (frames, acts) = tiny_inputs(&tape, 3, 1, 7, true);
    let out = m.pred.forward(&ctx, &frames, &acts);
    let slot0 = tape.slice_axis(out, 1, 0, 1);
    let loss = tape.mean_sq(slot0);
    let grads = tape.backward(loss);
    for future in [1usize, 2] {
        let g = grads.get(frames[future]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0), "analytic gradient leaked");
    }
    println!("criterion 1: PASS — masked <=1e-5 perturbation response, unmasked >=1e-3, analytic zero");
}

/// Criterion 2: parallel masked pass equals sequential single-step
/// predictions within 1e-4.
#[test]
fn criterion_02_teacher_forcing_equivalence() {
    let m = tiny_model(true);
    let tape = Tape::new();
    let ctx = ParamCtx::frozen(&tape, &m.store);
    let (frames, acts) = tiny_inputs(&tape, 3, 2, 3, false);
    let full = tape.value(m.pred.forward(&ctx, &frames, &acts));
    let mut worst = 0.0f64;
    for l in 1..=3usize {
        let out = m.pred.forward(&ctx, &frames[..l], &acts[..l]);
        let v = tape.value(out);
        for b in 0..2 {
            for n in 0..4 {
                for d in 0..8 {
                    worst = worst.max((v[[b, l - 1, n, d]] - full[[b, l - 1, n, d]]).abs());
                }
            }
        }
    }
    assert!(worst < 1e-4, "parallel/sequential mismatch {worst}");
    println!("criterion 2: PASS — max deviation {worst:.2e} (tolerance 1e-4)");
}

/// Criterion 3: loss gradients w.r.t. actions and embedder inputs match
/// central finite differences within 1e-3 relative.
#[test]
fn criterion_03_gradient_checks() {
    let m = tiny_model(true);
    let target = randn(40, &[1, 2, 4, 8]);
    let frames_v: Vec<Arr> = (0..2).map(|i| randn(41 + i as u64, &[1, 4, 8])).collect();
    let mut acts_v: Vec<Arr> = (0..2).map(|i| randn(43 + i as u64, &[1, 4])).collect();
    let eval = |acts: &[Arr]| -> f64 {
        let tape = Tape::new();
        let ctx = ParamCtx::frozen(&tape, &m.store);
        let fr: Vec<_> = frames_v.iter().map(|f| tape.leaf(f.clone(), false)).collect();
        let ac: Vec<_> = acts.iter().map(|a| tape.leaf(a.clone(), false)).collect();
        let out = m.pred.forward(&ctx, &fr, &ac);
        let t = tape.leaf(target.clone(), false);
        tape.scalar(tape.mean_sq(tape.sub(out, t)))
    };
    let tape = Tape::new();
    let ctx = ParamCtx::new(&tape, &m.store);
    let fr: Vec<_> = frames_v.iter().map(|f| tape.leaf(f.clone(), false)).collect();
    let ac: Vec<_> = acts_v.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let out = m.pred.forward(&ctx, &fr, &ac);
    let t = tape.leaf(target.clone(), false);
    let loss = tape.mean_sq(tape.sub(out, t));
    let grads = tape.backward(loss);
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for ai in 0..2 {
        let g = grads.get(ac[ai]).unwrap().clone();
        for j in 0..4 {
            let orig = acts_v[ai][[0, j]];
            acts_v[ai][[0, j]] = orig + h;
            let lp = eval(&acts_v);
            acts_v[ai][[0, j]] = orig - h;
            let lm = eval(&acts_v);
            acts_v[ai][[0, j]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g[[0, j]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            worst_rel = worst_rel.max(rel);
        }
    }
    assert!(worst_rel < 1e-3, "action gradient off by {worst_rel}");

    // embedder input jacobian
    let emb = latent_wm::encoders::ActionEmbed::new(3, 5);
    let mut store = ParamStore::new();
    emb.init_params(&mut store, 1);
    let x0 = randn(50, &[1, 3]);
    let eval_emb = |x: &Arr| -> f64 {
        let tape = Tape::new();
        let ctx = ParamCtx::frozen(&tape, &store);
        let xr = tape.leaf(x.clone(), false);
        tape.scalar(tape.mean_sq(emb.forward(&ctx, xr)))
    };
    let tape2 = Tape::new();
    let ctx2 = ParamCtx::new(&tape2, &store);
    let xr = tape2.leaf(x0.clone(), true);
    let loss2 = tape2.mean_sq(emb.forward(&ctx2, xr));
    let g2 = tape2.backward(loss2).get(xr).unwrap().clone();
    let mut worst_emb = 0.0f64;
    for j in 0..3 {
        let mut xp = x0.clone();
        xp[[0, j]] += h;
        let mut xm = x0.clone();
        xm[[0, j]] -= h;
        let fd = (eval_emb(&xp) - eval_emb(&xm)) / (2.0 * h);
        let an = g2[[0, j]];
        worst_emb = worst_emb.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-9));
    }
    assert!(worst_emb < 1e-3, "embedder jacobian off by {worst_emb}");
    println!(
        "criterion 3: PASS — worst relative error: actions {worst_rel:.2e}, embedder {worst_emb:.2e}"
    );
}

fn reachable_toy(seed: u64) -> PointMass {
    let mut sys = PointMass::double_integrator(3, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = Array2::from_shape_fn((3, 2), |_| rng.random_range(-0.9..0.9));
    sys.set_reachable_goal(&acts.view());
    sys
}

/// Closed-form optimum of the convex toy via regularized normal equations.
fn toy_least_squares_cost(sys: &PointMass) -> f64 {
    // z_T = c + M vec(a); columns of M are B columns propagated by A powers
    let d = sys.z0.len();
    let k = sys.horizon * sys.b_mat.ncols();
    let mut m = Array2::<f64>::zeros((d, k));
    for t in 0..sys.horizon {
        // effect of a_t on z_T: A^{T-1-t} B
        let mut eff = sys.b_mat.clone();
        for _ in 0..(sys.horizon - 1 - t) {
            eff = sys.a_mat.dot(&eff);
        }
        for j in 0..sys.b_mat.ncols() {
            for i in 0..d {
                m[[i, t * sys.b_mat.ncols() + j]] = eff[[i, j]];
            }
        }
    }
    let mut c = sys.z0.clone();
    for _ in 0..sys.horizon {
        c = sys.a_mat.dot(&c);
    }
    let r = &sys.goal - &c;
    // solve (M^T M + eps I) x = M^T r by Gaussian elimination
    let mtm = m.t().dot(&m);
    let mtr = m.t().dot(&r);
    let mut aug = Array2::<f64>::zeros((k, k + 1));
    for i in 0..k {
        for j in 0..k {
            aug[[i, j]] = mtm[[i, j]] + if i == j { 1e-9 } else { 0.0 };
        }
        aug[[i, k]] = mtr[i];
    }
    for col in 0..k {
        let mut piv = col;
        for row in col + 1..k {
            if aug[[row, col]].abs() > aug[[piv, col]].abs() {
                piv = row;
            }
        }
        for j in 0..=k {
            let tmp = aug[[col, j]];
            aug[[col, j]] = aug[[piv, j]];
            aug[[piv, j]] = tmp;
        }
        let p = aug[[col, col]];
        for row in 0..k {
            if row != col && aug[[row, col]] != 0.0 {
                let f = aug[[row, col]] / p;
                for j in col..=k {
                    aug[[row, j]] -= f * aug[[col, j]];
                }
            }
        }
    }
    let x = Array1::from_shape_fn(k, |i| aug[[i, k]] / aug[[i, i]]);
    let opt_actions = Array2::from_shape_fn((sys.horizon, sys.b_mat.ncols()), |(t, j)| {
        x[t * sys.b_mat.ncols() + j]
    });
    sys.final_cost(&opt_actions.view())
}

/// Criterion 4: CEM beats 1.05x the exhaustive 11-level grid optimum on 20
/// seeded point-mass instances; GD reaches the closed-form optimum within
/// 1e-3 on the convex toy.
#[test]
fn criterion_04_planner_oracle() {
    use rayon::prelude::*;
    let levels = 11usize;
    let worst_ratio: f64 = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let sys = reachable_toy(seed);
            // brute-force grid oracle, independent of the CEM path
            let total = levels.pow(6);
            let mut best_grid = f64::INFINITY;
            for code in 0..total {
                let mut c = code;
                let mut acts = Array2::<f64>::zeros((3, 2));
                for t in 0..3 {
                    for j in 0..2 {
                        let l = c % levels;
                        c /= levels;
                        acts[[t, j]] = -1.0 + 2.0 * l as f64 / (levels - 1) as f64;
                    }
                }
                let cost = sys.final_cost(&acts.view());
                if cost < best_grid {
                    best_grid = cost;
                }
            }
            let cfg = PlanConfig {
                seed,
                n_samples: 100,
                iterations: 10,
                ..PlanConfig::default()
            };
            let r = cem_plan_system(&sys, 2, &cfg).unwrap();
            assert!(
                r.best_cost <= 1.05 * best_grid,
                "seed {seed}: CEM {} vs grid {best_grid}",
                r.best_cost
            );
            r.best_cost / best_grid
        })
        .reduce(|| 0.0, f64::max);

    let mut worst_gd = 0.0f64;
    for seed in 100..105u64 {
        let sys = reachable_toy(seed);
        let opt = toy_least_squares_cost(&sys);
        let cfg = PlanConfig { gd_lr: 0.2, gd_steps: 3000, ..PlanConfig::default() };
        let r = gd_plan_system(&sys, 2, &cfg).unwrap();
        let gap = (r.best_cost - opt).abs();
        assert!(gap <= 1e-3, "seed {seed}: GD {} vs closed form {opt}", r.best_cost);
        worst_gd = worst_gd.max(gap);
    }
    println!(
        "criterion 4: PASS — CEM/grid worst ratio {worst_ratio:.3} (<=1.05), GD gap {worst_gd:.2e} (<=1e-3)"
    );
}

/// Criterion 5: best-ever cost trace non-increasing on 100 random instances.
#[test]
fn criterion_05_cem_monotonicity() {
    for seed in 0..100u64 {
        let sys = reachable_toy(1000 + seed);
        let cfg = PlanConfig {
            seed,
            n_samples: 32,
            iterations: 8,
            ..PlanConfig::default()
        };
        let r = cem_plan_system(&sys, 2, &cfg).unwrap();
        for w in r.cost_trace.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: trace increased {:?}", r.cost_trace);
        }
    }
    println!("criterion 5: PASS — 100/100 non-increasing cost traces");
}

// ---------------------------------------------------------------------------
// shared desk-scale artifacts
// ---------------------------------------------------------------------------

struct Trained {
    cfg: SuiteConfig,
    model: WorldModel,
    enc: Box<dyn Encoder>,
    final_val: f64,
}

fn train_from(cfg: SuiteConfig) -> Trained {
    let (model, enc, logs) = train_world_model(&cfg).expect("training");
    let final_val = logs.last().unwrap().val_loss;
    Trained { cfg, model, enc, final_val }
}

fn smoke() -> &'static Trained {
    static SMOKE: OnceLock<Trained> = OnceLock::new();
    SMOKE.get_or_init(|| train_from(load_suite_config("wall_smoke.toml")))
}

struct ScaleRun {
    n: usize,
    val_loss: f64,
    sr: f64,
    trained: Trained,
}

fn scaling_runs() -> &'static Vec<ScaleRun> {
    static RUNS: OnceLock<Vec<ScaleRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let base = load_suite_config("scaling.toml");
        base.scales
            .clone()
            .into_iter()
            .map(|n| {
                let mut cfg = base.clone();
                cfg.data_n = n;
                let trained = train_from(cfg);
                let eps = eval_episodes(
                    &trained.cfg.env,
                    &trained.cfg.env_cfg,
                    &trained.model,
                    trained.enc.as_ref(),
                    &trained.cfg.plan,
                    trained.cfg.episodes,
                    trained.cfg.episode_seed,
                )
                .unwrap();
                ScaleRun {
                    n,
                    val_loss: trained.final_val,
                    sr: success_rate(&eps).unwrap(),
                    trained,
                }
            })
            .collect()
    })
}

fn eval_sr(t: &Trained, episodes: usize) -> f64 {
    let eps = eval_episodes(
        &t.cfg.env,
        &t.cfg.env_cfg,
        &t.model,
        t.enc.as_ref(),
        &t.cfg.plan,
        episodes,
        t.cfg.episode_seed,
    )
    .unwrap();
    success_rate(&eps).unwrap()
}

/// Criterion 6 (desk variant): MPC-CEM with the frozen test encoder on 200
/// trajectories beats the random-action baseline on the same 50 tasks.
#[test]
fn criterion_06_wall_end_to_end_smoke() {
    let t = smoke();
    let eps = eval_episodes(
        &t.cfg.env,
        &t.cfg.env_cfg,
        &t.model,
        t.enc.as_ref(),
        &t.cfg.plan,
        t.cfg.episodes,
        t.cfg.episode_seed,
    )
    .unwrap();
    let sr = success_rate(&eps).unwrap();
    let budget = mpc_step_budget(&t.cfg.plan, t.model.frameskip);
    let base = random_baseline(
        &t.cfg.env,
        &t.cfg.env_cfg,
        t.cfg.episodes,
        t.cfg.episode_seed,
        budget,
    )
    .unwrap();
    let base_sr = success_rate(&base).unwrap();
    assert!(
        sr > base_sr,
        "smoke MPC SR {sr} must strictly beat random baseline {base_sr}"
    );
    println!(
        "criterion 6 (smoke): PASS — MPC SR {sr:.2} > random baseline {base_sr:.2} over {} tasks",
        t.cfg.episodes
    );
}

/// Criterion 6, full scale: pretrained patch encoder, H=1, frameskip 5,
/// 1920 trajectories, 100 epochs; SR >= 0.85 over 50 MPC episodes.
/// Multi-hour run; needs `LWM_VIT_WEIGHTS` pointing at exported weights.
#[test]
#[ignore = "full-scale run: needs exported pretrained ViT weights and hours of compute"]
fn criterion_06_wall_end_to_end_full() {
    let weights = std::env::var("LWM_VIT_WEIGHTS").expect("set LWM_VIT_WEIGHTS");
    let mut cfg = load_suite_config("wall.toml");
    cfg.encoder = format!("vit:{weights}");
    let t = train_from(cfg);
    let sr = eval_sr(&t, t.cfg.episodes);
    assert!(sr >= 0.85, "full-scale Wall MPC SR {sr} < 0.85");
    println!("criterion 6 (full): PASS — MPC SR {sr:.2} >= 0.85");
}

/// Criterion 7: three ablation orderings at desk scale (Wall, 500
/// trajectories): mask > no-mask at h=3 (strict); detached decoder loss >=
/// backpropagated decoder loss; patch encoder >= pooled encoder.
#[test]
fn criterion_07_ablation_orderings() {
    // (a) causal mask on/off at h=3
    let base = load_suite_config("mask_ablation.toml");
    let with_mask = train_from(base.clone());
    let sr_mask = eval_sr(&with_mask, base.episodes);
    let mut nomask_cfg = base.clone();
    nomask_cfg.train.ablations.no_causal_mask = true;
    let no_mask = train_from(nomask_cfg);
    let sr_nomask = eval_sr(&no_mask, base.episodes);
    assert!(
        sr_mask > sr_nomask,
        "mask ordering violated: with {sr_mask} vs without {sr_nomask}"
    );

    // (b) decoder loss detached vs routed into the predictor; the detached
    // arm is the standard n=500 run from the scaling sweep
    let runs = scaling_runs();
    let detached = runs.iter().find(|r| r.n == 500).expect("n=500 run");
    let mut joint_cfg = detached.trained.cfg.clone();
    joint_cfg.train.ablations.decoder_loss_to_predictor = true;
    joint_cfg.train.epochs = 3;
    joint_cfg.train.max_batches_per_epoch = Some(120);
    let joint = train_from(joint_cfg);
    let sr_joint = eval_sr(&joint, detached.trained.cfg.episodes);
    assert!(
        detached.sr >= sr_joint,
        "decoder-loss ordering violated: detached {} vs joint {sr_joint}",
        detached.sr
    );

    // (c) patch vs pooled encoder (same budget as the n=500 run)
    let mut pooled_cfg = detached.trained.cfg.clone();
    pooled_cfg.encoder = pooled_variant(&pooled_cfg.encoder).unwrap();
    let pooled = train_from(pooled_cfg);
    let sr_pooled = eval_sr(&pooled, detached.trained.cfg.episodes);
    assert!(
        detached.sr >= sr_pooled,
        "encoder ordering violated: patch {} vs pooled {sr_pooled}",
        detached.sr
    );

    println!(
        "criterion 7: PASS — mask {sr_mask:.2} > no-mask {sr_nomask:.2}; detached {:.2} >= joint {sr_joint:.2}; patch {:.2} >= pooled {sr_pooled:.2}",
        detached.sr, detached.sr
    );
}

/// Criterion 8: scaling trend on Wall for n in {200, 500, 1000}: SR
/// non-decreasing and validation loss decreasing across both adjacent pairs.
#[test]
fn criterion_08_scaling_trend() {
    let runs = scaling_runs();
    assert_eq!(runs.len(), 3);
    for w in runs.windows(2) {
        assert!(
            w[1].sr >= w[0].sr,
            "SR decreased from n={} ({:.2}) to n={} ({:.2})",
            w[0].n,
            w[0].sr,
            w[1].n,
            w[1].sr
        );
        assert!(
            w[1].val_loss < w[0].val_loss,
            "val loss did not improve from n={} ({:.4}) to n={} ({:.4})",
            w[0].n,
            w[0].val_loss,
            w[1].n,
            w[1].val_loss
        );
    }
    let desc: Vec<String> = runs
        .iter()
        .map(|r| format!("n={}: SR {:.2} val {:.4}", r.n, r.sr, r.val_loss))
        .collect();
    println!("criterion 8: PASS — {}", desc.join("; "));
}

/// Criterion 9: metric oracles — Chamfer matches O(n*m) brute force exactly
/// on 100 instances; SSIM matches a direct reference within 1e-4;
/// ssim(a,a)=1; chamfer(A,A)=0.
#[test]
fn criterion_09_metrics_oracles() {
    // chamfer vs brute force
    let brute = |a: &ArrayView2<f64>, b: &ArrayView2<f64>| -> f64 {
        let nn = |from: &ArrayView2<f64>, to: &ArrayView2<f64>| -> f64 {
            let mut total = 0.0;
            for p in from.rows() {
                let mut best = f64::INFINITY;
                for q in to.rows() {
                    let d2: f64 = p
                        .iter()
                        .zip(q.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    best = best.min(d2.sqrt());
                }
                total += best;
            }
            total / from.nrows() as f64
        };
        nn(a, b) + nn(b, a)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..100 {
        let dim = if case % 2 == 0 { 2 } else { 3 };
        let n = rng.random_range(1..80);
        let m = rng.random_range(1..80);
        let scale: f64 = rng.random_range(0.05..20.0);
        let a = Array2::from_shape_fn((n, dim), |_| rng.random_range(-scale..scale));
        let b = Array2::from_shape_fn((m, dim), |_| rng.random_range(-scale..scale));
        let fast = chamfer(&a.view(), &b.view()).unwrap();
        let slow = brute(&a.view(), &b.view());
        assert_eq!(fast, slow, "chamfer mismatch on case {case}");
    }
    let a = Array2::from_shape_fn((30, 2), |_| rng.random_range(-1.0..1.0));
    assert_eq!(chamfer(&a.view(), &a.view()).unwrap(), 0.0);

    // ssim vs windowed reference (direct non-separable implementation)
    let gaussian = {
        let mut k = [0.0f64; 11];
        let mut sum = 0.0;
        for (i, v) in k.iter_mut().enumerate() {
            let d = i as f64 - 5.0;
            *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
            sum += *v;
        }
        for v in k.iter_mut() {
            *v /= sum;
        }
        k
    };
    let ssim_ref = |a: &Array3<f64>, b: &Array3<f64>| -> f64 {
        let (hh, ww, ch) = a.dim();
        let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
        let mut total = 0.0;
        for c in 0..ch {
            let mut acc = 0.0;
            let mut count = 0;
            for r0 in 0..=(hh - 11) {
                for c0 in 0..=(ww - 11) {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let kv = gaussian[i] * gaussian[j];
                            let xv = a[[r0 + i, c0 + j, c]];
                            let yv = b[[r0 + i, c0 + j, c]];
                            mx += kv * xv;
                            my += kv * yv;
                            sxx += kv * xv * xv;
                            syy += kv * yv * yv;
                            sxy += kv * xv * yv;
                        }
                    }
                    acc += ((2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2))
                        / ((mx * mx + my * my + c1)
                            * ((sxx - mx * mx) + (syy - my * my) + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / ch as f64
    };
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let a = Array3::from_shape_fn((20, 20, 3), |_| rng.random_range(0.0..1.0));
        let b = a.mapv(|v: f64| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
        let fast = ssim(&a.view(), &b.view()).unwrap();
        let slow = ssim_ref(&a, &b);
        worst = worst.max((fast - slow).abs());
        assert!((fast - slow).abs() < 1e-4, "ssim {fast} vs reference {slow}");
    }
    let a = Array3::from_shape_fn((20, 20, 3), |_| rng.random_range(0.0..1.0));
    assert!((ssim(&a.view(), &a.view()).unwrap() - 1.0).abs() < 1e-12);
    println!("criterion 9: PASS — chamfer exact on 100 cases, ssim within {worst:.2e} of reference");
}

/// Criterion 10 (desk variant): decoded one-step predictions on the
/// validation split reach mean SSIM >= 0.95 (threshold from the criterion;
/// the pretrained-encoder variant is the ignored full test below).
#[test]
fn criterion_10_decoded_prediction_quality() {
    let t = smoke();
    let cfg = &t.cfg;
    let lds = LatentDataset::generate(
        &cfg.env,
        cfg.data_n,
        cfg.data_len,
        cfg.data_seed,
        &cfg.env_cfg,
        t.enc.as_ref(),
    )
    .unwrap();
    let images = ReplayImages::from_latent(&lds, cfg.env_cfg);
    let mut tc = cfg.train.clone();
    tc.lr_decoder = 1e-3;
    tc.max_batches_per_epoch = Some(120);
    let dec_out = latent_wm::trainer::train_decoder(&lds, &images, &tc, 6).unwrap();

    // decoded 1-step predictions on held-out trajectories
    let (_, val_idx) = train_val_split(lds.trajs.len(), tc.seed);
    let f = t.model.frameskip;
    let mut scores = Vec::new();
    let tape = Tape::new();
    let ctx = ParamCtx::frozen(&tape, &t.model.store);
    let dctx = ParamCtx::frozen(&tape, &dec_out.store);
    for &ti in val_idx.iter().take(8) {
        let traj = &lds.trajs[ti];
        let t_len = traj.latents.shape()[0];
        for start in (0..t_len.saturating_sub(f)).step_by(11) {
            let n = t.model.predictor.cfg.n_patches;
            let e = t.model.predictor.cfg.e_dim;
            let mut z = Array3::<f64>::zeros((1, n, e));
            z.slice_mut(s![0, .., ..])
                .assign(&traj.latents.slice(s![start, .., ..]).mapv(|v| v as f64));
            let frame = t.model.frame_tensor(&ctx, z.into_dyn(), None).unwrap();
            let mut eff = Array2::<f64>::zeros((1, t.model.eff_action_dim()));
            for sub in 0..f {
                for j in 0..t.model.raw_action_dim {
                    eff[[0, sub * t.model.raw_action_dim + j]] =
                        traj.actions[[start + sub, j]] as f64;
                }
            }
            let al = tape.leaf(eff.into_dyn(), false);
            let aemb = t.model.action_embed.forward(&ctx, al);
            let pred = t
                .model
                .predictor
                .predict_next(&ctx, &[frame], &[aemb])
                .unwrap();
            let img = dec_out.decoder.decode(&dctx, pred).unwrap();
            let v = tape.value(img);
            let chw = v
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .index_axis_move(Axis(0), 0);
            let decoded = obs_to_hwc(&chw_to_obs(&chw));
            let truth = obs_to_hwc(&images.frame(ti, start + f).unwrap());
            scores.push(ssim(&decoded.view(), &truth.view()).unwrap());
        }
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!(
        mean >= 0.95,
        "decoded 1-step prediction SSIM {mean:.4} < 0.95 over {} frames",
        scores.len()
    );
    println!(
        "criterion 10 (desk): PASS — mean decoded prediction SSIM {mean:.4} >= 0.95 ({} frames)",
        scores.len()
    );
}

/// Criterion 10, full scale (pretrained encoder); see criterion 6 full.
#[test]
#[ignore = "full-scale run: needs exported pretrained ViT weights and hours of compute"]
fn criterion_10_decoded_prediction_quality_full() {
    let weights = std::env::var("LWM_VIT_WEIGHTS").expect("set LWM_VIT_WEIGHTS");
    let mut cfg = load_suite_config("wall.toml");
    cfg.encoder = format!("vit:{weights}");
    let t = train_from(cfg.clone());
    let lds = LatentDataset::generate(
        &cfg.env,
        cfg.data_n,
        cfg.data_len,
        cfg.data_seed,
        &cfg.env_cfg,
        t.enc.as_ref(),
    )
    .unwrap();
    let images = ReplayImages::from_latent(&lds, cfg.env_cfg);
    let dec_out =
        latent_wm::trainer::train_decoder(&lds, &images, &cfg.train, cfg.decoder_epochs).unwrap();
    let (_, val_idx) = train_val_split(lds.trajs.len(), cfg.train.seed);
    let tr = envs::generate_trajectory(
        &cfg.env,
        cfg.data_len,
        envs::traj_seed(cfg.data_seed, val_idx[0]),
        &cfg.env_cfg,
    )
    .unwrap();
    let report = latent_wm::eval::open_loop_eval(
        &t.model,
        t.enc.as_ref(),
        Some((&dec_out.decoder, &dec_out.store)),
        &tr,
        1,
    )
    .unwrap();
    let mean = report.ssim[0];
    assert!(mean >= 0.95, "decoded prediction SSIM {mean} < 0.95");
    println!("criterion 10 (full): PASS — SSIM {mean:.4}");
}

/// Criterion 11: repeated commands with identical seeds produce identical
/// artifacts — bitwise for records, checksums for checkpoints.
#[test]
fn criterion_11_reproducibility() {
    let env_cfg = EnvConfig::default();
    // dataset generation: byte-identical directories
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    envs::generate_dataset_to_dir("wall", 3, 8, 5, &env_cfg, d1.path()).unwrap();
    envs::generate_dataset_to_dir("wall", 3, 8, 5, &env_cfg, d2.path()).unwrap();
    for name in ["metadata.json", "traj_000000.bin", "traj_000002.bin"] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    // training: identical checkpoint files under the deterministic flag
    let enc = make_encoder("test:seed=0,n=16,e=8").unwrap();
    let lds = LatentDataset::generate("wall", 6, 12, 3, &env_cfg, enc.as_ref()).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch: 8,
        h: 1,
        frameskip: 2,
        depth: 1,
        heads: 2,
        mlp_dim: 32,
        embed_dim: 16,
        deterministic: true,
        ..TrainConfig::default()
    };
    let c1 = tempfile::tempdir().unwrap();
    let c2 = tempfile::tempdir().unwrap();
    train_predictor_latent(&lds, &tc, None, Some(c1.path())).unwrap();
    train_predictor_latent(&lds, &tc, None, Some(c2.path())).unwrap();
    let a = std::fs::read(c1.path().join("last.ckpt")).unwrap();
    let b = std::fs::read(c2.path().join("last.ckpt")).unwrap();
    assert_eq!(a, b, "checkpoints differ between identical deterministic runs");

    // planning: identical episode records
    let out1 = train_predictor_latent(&lds, &tc, None, None).unwrap();
    let (model, _) = out1.into_best_model();
    let plan_cfg = PlanConfig {
        horizon: 2,
        n_samples: 16,
        iterations: 3,
        method: latent_wm::planner::Method::MpcCem,
        max_plan_rounds: 2,
        ..PlanConfig::default()
    };
    let run = || {
        let eps =
            eval_episodes("wall", &env_cfg, &model, enc.as_ref(), &plan_cfg, 2, 9).unwrap();
        serde_json::to_string(&eps).unwrap()
    };
    assert_eq!(run(), run(), "episode records differ between identical runs");

    // eval losses reproduce bitwise
    let (_, val_idx) = train_val_split(lds.trajs.len(), tc.seed);
    let (l1, pf1) = eval_loss(&model, &lds, &val_idx, &tc).unwrap();
    let (l2, pf2) = eval_loss(&model, &lds, &val_idx, &tc).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(pf1, pf2);
    println!("criterion 11: PASS — datasets bitwise equal, checkpoints identical, reports identical");
}

/// Beyond the numbered list: latent cost fixtures used throughout planning.
#[test]
fn latent_cost_contract() {
    let a = ndarray::arr2(&[[1.0, 0.0], [0.0, 2.0]]);
    let b = ndarray::arr2(&[[0.0, 0.0], [0.0, 0.0]]);
    assert_eq!(latent_cost(&a.view(), &a.view()).unwrap(), 0.0);
    assert_eq!(
        latent_cost(&a.view(), &b.view()).unwrap(),
        latent_cost(&b.view(), &a.view()).unwrap()
    );
    assert!((latent_cost(&a.view(), &b.view()).unwrap() - 1.25).abs() < 1e-12);
    let (init, goal) = envs::sample_task("wall", 0, &EnvConfig::default()).unwrap();
    let enc = make_encoder("test:seed=0,n=16,e=8").unwrap();
    let zi = encode_obs(enc.as_ref(), &envs::render(&init, &EnvConfig::default())).unwrap();
    let zg = encode_obs(enc.as_ref(), &goal.goal_obs).unwrap();
    assert!(latent_cost(&zi.patches.view(), &zg.patches.view()).unwrap() > 0.0);
}
