//! Command-line entry point: dataset generation, training, planning, the
//! experiment suites, and timing, all config-file driven.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::Obs;
use crate::encoders::make_encoder;
use crate::envs::{self, EnvConfig};
use crate::error::{Error, Result};
use crate::eval::suites::{self, SuiteConfig};
use crate::eval::{success_rate, wilson_interval};
use crate::planner::{self, Method, PlanConfig};
use crate::trainer::{self, checkpoint, LatentDataset, ReplayImages};

#[derive(Parser)]
#[command(
    name = "lwm",
    about = "Latent world models on frozen patch features: data generation, training, planning, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random-policy dataset directory.
    GenData(GenDataArgs),
    /// Train the predictor (and optionally a decoder) from a dataset directory.
    Train(TrainArgs),
    /// Plan goal-reaching episodes with a trained checkpoint.
    Plan(PlanArgs),
    /// Run an experiment suite and write a report.
    Eval(EvalArgs),
    /// Measure single-step inference and full-plan wallclock times.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    env: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Temporal smoothing for generated actions (0 = i.i.d. uniform).
    #[arg(long, default_value_t = 0.0)]
    correlated: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Quick run: 2 epochs on ~1% of the trajectories.
    #[arg(long)]
    smoke: bool,
    /// Ablation switch.
    #[arg(long, value_parser = ["no-causal-mask", "decoder-loss"])]
    ablate: Option<String>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from <out>/last.ckpt.
    #[arg(long)]
    resume: bool,
    /// Zero wallclock fields so artifacts are bit-reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Also train the pixel decoder afterwards.
    #[arg(long)]
    decoder: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    env: String,
    #[arg(long, value_enum, default_value = "mpc-cem")]
    method: MethodArg,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional decoder checkpoint for imagined-rollout strips.
    #[arg(long)]
    decoder: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Experiment config for plan parameters (TOML); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Save a PNG strip per episode (environment row over imagination row).
    #[arg(long)]
    frames: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Cem,
    Gd,
    #[value(name = "mpc-cem")]
    MpcCem,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Cem => Method::Cem,
            MethodArg::Gd => Method::Gd,
            MethodArg::MpcCem => Method::MpcCem,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_parser = suites::SUITE_NAMES)]
    suite: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint; a freshly initialized model is timed otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<SuiteConfig> {
    match path {
        None => Ok(SuiteConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        }
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = EnvConfig::default();
    cfg.gen_action_smoothing = a.correlated;
    envs::generate_dataset_to_dir(&a.env, a.n, a.len, a.seed, &cfg, &a.out)?;
    println!(
        "wrote {} trajectories of length {} to {}",
        a.n,
        a.len,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(Some(&a.config))?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.train.deterministic |= a.deterministic;
    match a.ablate.as_deref() {
        Some("no-causal-mask") => cfg.train.ablations.no_causal_mask = true,
        Some("decoder-loss") => cfg.train.ablations.decoder_loss_to_predictor = true,
        _ => {}
    }
    let encoder = make_encoder(&cfg.encoder)?;
    let subset = if a.smoke {
        cfg.train.epochs = 2;
        let reader = crate::data::io::DatasetReader::open(&a.data)?;
        Some((reader.meta.n_traj / 100).max(4))
    } else {
        None
    };
    let lds = LatentDataset::from_dir(&a.data, encoder.as_ref(), subset)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let out = if a.resume {
        trainer::train_predictor_resume(&a.out.join("last.ckpt"), &lds, Some(&a.out))?
    } else {
        let images;
        let provider: Option<&dyn trainer::ImageProvider> =
            if cfg.train.ablations.decoder_loss_to_predictor {
                images = ReplayImages::from_latent(&lds, cfg.env_cfg);
                Some(&images)
            } else {
                None
            };
        trainer::train_predictor_latent(&lds, &cfg.train, provider, Some(&a.out))?
    };
    let last = out.logs.last().unwrap();
    println!(
        "trained {} epochs: train {:.6} val {:.6} -> {}",
        out.epochs_done,
        last.train_loss,
        last.val_loss,
        a.out.join("last.ckpt").display()
    );

    if a.decoder {
        let images = ReplayImages::from_latent(&lds, cfg.env_cfg);
        let dec_out = trainer::train_decoder(&lds, &images, &cfg.train, cfg.decoder_epochs)?;
        checkpoint::write_decoder(
            &a.out.join("decoder.ckpt"),
            &dec_out.decoder,
            &dec_out.store,
            &lds.encoder_id,
            &dec_out.logs,
        )?;
        println!(
            "decoder val recon {:.6} -> {}",
            dec_out.logs.last().unwrap().val_loss,
            a.out.join("decoder.ckpt").display()
        );
    }
    Ok(())
}

fn save_png(path: &Path, obs: &Obs) -> Result<()> {
    let (h, w) = (obs.shape()[0], obs.shape()[1]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([obs[[r, c, 0]], obs[[r, c, 1]], obs[[r, c, 2]]]),
            );
        }
    }
    img.save(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Two-row strip: environment frames on top, decoded imagination below.
fn save_strip(path: &Path, top: &[Obs], bottom: &[Obs]) -> Result<()> {
    let cols = top.len().max(bottom.len());
    let tile = crate::data::IMG as u32;
    let mut img = image::RgbImage::new(cols as u32 * tile, 2 * tile);
    let mut blit = |obs: &Obs, row: u32, col: u32| {
        for r in 0..tile {
            for c in 0..tile {
                img.put_pixel(
                    col * tile + c,
                    row * tile + r,
                    image::Rgb([
                        obs[[r as usize, c as usize, 0]],
                        obs[[r as usize, c as usize, 1]],
                        obs[[r as usize, c as usize, 2]],
                    ]),
                );
            }
        }
    };
    for (i, obs) in top.iter().enumerate() {
        blit(obs, 0, i as u32);
    }
    for (i, obs) in bottom.iter().enumerate() {
        blit(obs, 1, i as u32);
    }
    img.save(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let base = load_config(a.config.as_deref())?;
    let loaded = checkpoint::read_predictor(&a.checkpoint)?;
    let model = loaded.model;
    let encoder = make_encoder(&model.encoder_id)?;
    let decoder = match &a.decoder {
        Some(p) => Some(checkpoint::read_decoder(p)?),
        None => None,
    };
    let env_cfg = base.env_cfg;
    let mut plan_cfg = base.plan.clone();
    plan_cfg.method = a.method.into();
    plan_cfg.save_frames = a.frames;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let mut records = String::new();
    let mut results = Vec::with_capacity(a.episodes);
    for i in 0..a.episodes {
        let task_seed = suites::task_seed(a.seed, i);
        let res = match plan_cfg.method {
            Method::MpcCem => {
                let (init, goal) = envs::sample_task(&a.env, task_seed, &env_cfg)?;
                let mut cfg = plan_cfg.clone();
                cfg.seed = task_seed ^ 0x517c;
                let r = planner::mpc_run(&a.env, &env_cfg, &model, encoder.as_ref(), &init, &goal, &cfg)?;
                if a.frames {
                    save_png(&a.out.join(format!("episode_{i:03}_goal.png")), &goal.goal_obs)?;
                    write_episode_strip(
                        &a.out.join(format!("episode_{i:03}.png")),
                        &model,
                        encoder.as_ref(),
                        decoder.as_ref(),
                        &env_cfg,
                        &plan_cfg,
                        &a.env,
                        task_seed,
                        &r,
                    )?;
                }
                r
            }
            _ => {
                let mut c = base.clone();
                c.env = a.env.clone();
                c.plan = plan_cfg.clone();
                suites::eval_episodes(
                    &a.env,
                    &env_cfg,
                    &model,
                    encoder.as_ref(),
                    &plan_cfg,
                    1,
                    task_seed,
                )?
                .pop()
                .unwrap()
            }
        };
        records.push_str(
            &serde_json::to_string(&serde_json::json!({
                "episode": i,
                "task_seed": task_seed,
                "success": res.success,
                "steps": res.steps,
                "replans": res.replans,
                "final_plan_cost": res.final_plan_cost,
            }))
            .unwrap(),
        );
        records.push('\n');
        results.push(res);
    }
    let sr = success_rate(&results)?;
    let wins = results.iter().filter(|r| r.success).count();
    let (lo, hi) = wilson_interval(wins, results.len());
    records.push_str(
        &serde_json::to_string(&serde_json::json!({
            "summary": true, "episodes": a.episodes, "sr": sr,
            "wilson_lo": lo, "wilson_hi": hi,
        }))
        .unwrap(),
    );
    records.push('\n');
    let rec_path = a.out.join("plan_results.jsonl");
    std::fs::write(&rec_path, records).map_err(|e| Error::io(&rec_path, e))?;
    println!("SR {sr:.3} [{lo:.3}, {hi:.3}] over {} episodes -> {}", a.episodes, rec_path.display());
    Ok(())
}

/// Environment frames (every frameskip-th step) over the decoded imagined
/// rollout of a fresh plan from the initial observation.
#[allow(clippy::too_many_arguments)]
fn write_episode_strip(
    path: &Path,
    model: &trainer::WorldModel,
    encoder: &dyn crate::encoders::Encoder,
    decoder: Option<&(crate::decoder::Decoder, crate::math::ParamStore, String)>,
    env_cfg: &EnvConfig,
    plan_cfg: &PlanConfig,
    env: &str,
    task_seed: u64,
    episode: &planner::EpisodeResult,
) -> Result<()> {
    let top: Vec<Obs> = episode
        .frames
        .iter()
        .step_by(model.frameskip.max(1))
        .cloned()
        .collect();
    let bottom = match decoder {
        None => Vec::new(),
        Some((dec, store, _)) => {
            let (init, goal) = envs::sample_task(env, task_seed, env_cfg)?;
            let obs0 = envs::render(&init, env_cfg);
            let proprio = model
                .proprio_embed
                .as_ref()
                .map(|_| envs::proprio_of(&init).iter().map(|v| *v as f64).collect());
            let mut cfg = plan_cfg.clone();
            cfg.seed = task_seed ^ 0x517c;
            let plan = planner::cem_plan(
                model,
                encoder,
                &obs0,
                proprio,
                &goal.goal_obs,
                env_cfg.action_bound,
                &cfg,
            )?;
            crate::eval::decode_imagined_rollout(model, encoder, dec, store, &obs0, &plan)?
        }
    };
    save_strip(path, &top, &bottom)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
        cfg.episode_seed = seed ^ 0xe115;
        cfg.data_seed = seed ^ 0xda7a;
    }
    let report = suites::run_suite(&a.suite, &cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let table = report.render_table();
    let table_path = a.out.join("table.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    let jsonl_path = a.out.join("results.jsonl");
    std::fs::write(&jsonl_path, report.to_jsonl()).map_err(|e| Error::io(&jsonl_path, e))?;
    print!("{table}");
    println!("reports -> {}", a.out.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (model, encoder) = match &a.checkpoint {
        Some(p) => {
            let loaded = checkpoint::read_predictor(p)?;
            let enc = make_encoder(&loaded.model.encoder_id)?;
            (loaded.model, enc)
        }
        None => {
            // time a freshly initialized model of the configured shape
            let encoder = make_encoder(&cfg.encoder)?;
            let lds = LatentDataset::generate(&cfg.env, 1, 2, 0, &cfg.env_cfg, encoder.as_ref())?;
            let mut tc = cfg.train.clone();
            tc.epochs = 0;
            let out = trainer::train_predictor_latent(&lds, &tc, None, None)?;
            (out.model, encoder)
        }
    };
    let (init, goal) = envs::sample_task(&cfg.env, 0, &cfg.env_cfg)?;
    let obs0 = envs::render(&init, &cfg.env_cfg);
    let report = crate::eval::timing_bench(&model, encoder.as_ref(), &obs0, &goal.goal_obs, &cfg.plan)?;
    let json = serde_json::to_string_pretty(&report).unwrap();
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("timing.json");
        std::fs::write(&p, &json).map_err(|e| Error::io(&p, e))?;
    }
    println!("{json}");
    Ok(())
}
