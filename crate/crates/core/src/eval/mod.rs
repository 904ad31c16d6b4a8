//! Metrics and experiment drivers: success rate with Wilson intervals,
//! Chamfer distance, SSIM, open-loop rollout fidelity, timing, and the
//! experiment suites.

pub mod chamfer;
pub mod ssim;
pub mod suites;

use std::time::Instant;

use ndarray::prelude::*;

use crate::data::Trajectory;
use crate::decoder::Decoder;
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::math::{ParamCtx, ParamStore, Tape};
use crate::planner::{self, EpisodeResult, PlanConfig};
use crate::trainer::WorldModel;

pub use chamfer::chamfer;
pub use ssim::{obs_to_hwc, ssim};

/// Fraction of successful episodes.
pub fn success_rate(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no episodes".into()));
    }
    let wins = results.iter().filter(|r| r.success).count();
    Ok(wins as f64 / results.len() as f64)
}

/// Wilson 95% score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.96f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Debug)]
pub struct OpenLoopReport {
    /// Per predicted step: SSIM of the decoded prediction vs ground truth
    /// (empty when no decoder is given).
    pub ssim: Vec<f64>,
    /// Per predicted step: latent MSE of the prediction vs encoded truth.
    pub mse_latent: Vec<f64>,
    /// SSIM of the decoded *encoding* of the first predicted-step target
    /// (reconstruction quality upper bound for decoded predictions).
    pub recon_ssim: Option<f64>,
}

/// Roll the model forward from the first `h` frames using ground-truth
/// actions and compare per step against the real trajectory.
pub fn open_loop_eval(
    model: &WorldModel,
    encoder: &dyn Encoder,
    decoder: Option<(&Decoder, &ParamStore)>,
    traj: &Trajectory,
    max_steps: usize,
) -> Result<OpenLoopReport> {
    let f = model.frameskip;
    let h = model.predictor.cfg.h;
    let kept: Vec<usize> = (0..traj.len()).step_by(f).collect();
    if kept.len() < h + 1 {
        return Err(Error::InvalidArgument("trajectory too short for open-loop eval".into()));
    }
    let e = model.predictor.cfg.e_dim;
    let n = model.predictor.cfg.n_patches;
    let tape = Tape::new();
    let ctx = ParamCtx::frozen(&tape, &model.store);

    let frame_at = |ki: usize| -> Result<crate::math::tape::TensorRef> {
        let t = kept[ki];
        let z = encoder.encode_patches(&traj.observations[t])?;
        let mut arr = Array3::<f64>::zeros((1, n, e));
        arr.slice_mut(s![0, .., ..]).assign(&z);
        let proprio = if model.proprio_embed.is_some() {
            let row = traj.proprio.row(t);
            let mut p = Array2::<f64>::zeros((1, row.len()));
            for (j, v) in row.iter().enumerate() {
                p[[0, j]] = *v as f64;
            }
            Some(p.into_dyn())
        } else {
            None
        };
        model.frame_tensor(&ctx, arr.into_dyn(), proprio)
    };
    let eff_action_emb = |ki: usize| -> crate::math::tape::TensorRef {
        let start = kept[ki];
        let mut eff = Array2::<f64>::zeros((1, model.eff_action_dim()));
        for sub in 0..f {
            for j in 0..model.raw_action_dim {
                eff[[0, sub * model.raw_action_dim + j]] =
                    traj.actions[[start + sub, j]] as f64;
            }
        }
        let leaf = tape.leaf(eff.into_dyn(), false);
        model.action_embed.forward(&ctx, leaf)
    };

    let init_frames: Vec<_> = (0..h).map(frame_at).collect::<Result<_>>()?;
    let init_acts: Vec<_> = (0..h - 1).map(eff_action_emb).collect();
    let n_pred = (kept.len() - h).min(max_steps);
    let future: Vec<_> = (h - 1..h - 1 + n_pred).map(eff_action_emb).collect();
    let outs = model
        .predictor
        .rollout(&ctx, &init_frames, &init_acts, &future)?;

    let mut mse_latent = Vec::with_capacity(n_pred);
    let mut ssim_scores = Vec::with_capacity(n_pred);
    let mut recon_ssim = None;
    for (i, out) in outs.iter().enumerate() {
        let truth_t = kept[h + i];
        let z_true = encoder.encode_patches(&traj.observations[truth_t])?;
        let v = tape.value(*out);
        let pred = v
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .index_axis_move(Axis(0), 0);
        let pred_e = pred.slice(s![.., 0..e]);
        mse_latent.push(planner::latent_cost(&pred_e, &z_true.view())?);
        if let Some((dec, store)) = decoder {
            let dctx = ParamCtx::frozen(&tape, store);
            let zslice = tape.slice_axis(*out, 2, 0, e);
            let img = dec.decode(&dctx, zslice)?;
            let iv = tape.value(img);
            let iv3 = iv
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .index_axis_move(Axis(0), 0);
            let decoded = hwc_from_chw(&iv3);
            let truth = obs_to_hwc(&traj.observations[truth_t]);
            ssim_scores.push(ssim(&decoded.view(), &truth.view())?);
            if i == 0 {
                // step-0 bound: decode the *encoded* truth, no prediction
                let mut zt = Array3::<f64>::zeros((1, n, e));
                zt.slice_mut(s![0, .., ..]).assign(&z_true);
                let ztr = tape.leaf(zt.into_dyn(), false);
                let rimg = dec.decode(&dctx, ztr)?;
                let rv = tape.value(rimg);
                let rv3 = rv
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .index_axis_move(Axis(0), 0);
                let recon = hwc_from_chw(&rv3);
                recon_ssim = Some(ssim(&recon.view(), &truth.view())?);
            }
        }
    }
    Ok(OpenLoopReport { ssim: ssim_scores, mse_latent, recon_ssim })
}

fn hwc_from_chw(chw: &ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h, w) = chw.dim();
    Array3::from_shape_fn((h, w, c), |(r, cc, ch)| chw[[ch, r, cc]])
}

/// Decode the model's imagined rollout of a plan into images (for the
/// side-by-side episode strips).
pub fn decode_imagined_rollout(
    model: &WorldModel,
    encoder: &dyn Encoder,
    decoder: &Decoder,
    dec_store: &ParamStore,
    o0: &crate::data::Obs,
    plan: &crate::planner::PlanResult,
) -> Result<Vec<crate::data::Obs>> {
    let f = model.frameskip;
    let a_raw = model.raw_action_dim;
    let e = model.predictor.cfg.e_dim;
    let n = model.predictor.cfg.n_patches;
    let tape = Tape::new();
    let ctx = ParamCtx::frozen(&tape, &model.store);
    let z0 = encoder.encode_patches(o0)?;
    let mut arr = Array3::<f64>::zeros((1, n, e));
    arr.slice_mut(s![0, .., ..]).assign(&z0);
    let proprio = model
        .proprio_embed
        .as_ref()
        .map(|pe| Array2::<f64>::zeros((1, pe.in_dim)).into_dyn());
    let frame0 = model.frame_tensor(&ctx, arr.into_dyn(), proprio)?;
    let t_eff = plan.actions.len() / f.max(1);
    let mut future = Vec::with_capacity(t_eff);
    for t in 0..t_eff {
        let mut eff = Array2::<f64>::zeros((1, a_raw * f));
        for sub in 0..f {
            for j in 0..a_raw {
                eff[[0, sub * a_raw + j]] = plan.actions[t * f + sub][j];
            }
        }
        let leaf = tape.leaf(eff.into_dyn(), false);
        future.push(model.action_embed.forward(&ctx, leaf));
    }
    let outs = model.predictor.rollout(&ctx, &[frame0], &[], &future)?;
    let dctx = ParamCtx::frozen(&tape, dec_store);
    let mut images = Vec::with_capacity(outs.len() + 1);
    // first tile: decoded encoding of the initial observation
    {
        let mut z = Array3::<f64>::zeros((1, n, e));
        z.slice_mut(s![0, .., ..]).assign(&z0);
        let zr = tape.leaf(z.into_dyn(), false);
        let img = decoder.decode(&dctx, zr)?;
        images.push(obs_from_decoded(&tape.value(img)));
    }
    for out in outs {
        let zslice = tape.slice_axis(out, 2, 0, e);
        let img = decoder.decode(&dctx, zslice)?;
        images.push(obs_from_decoded(&tape.value(img)));
    }
    Ok(images)
}

fn obs_from_decoded(v: &crate::math::Arr) -> crate::data::Obs {
    let v4 = v.view().into_dimensionality::<Ix4>().unwrap();
    let chw = v4.index_axis_move(Axis(0), 0);
    crate::decoder::chw_to_obs(&chw)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TimingReport {
    /// Median batch-32 single-step forward time.
    pub per_step_inference_s: f64,
    /// One full CEM plan at the configured population and iterations.
    pub plan_s: f64,
    /// Cost-model prediction of plan time from the measured forward time.
    pub predicted_plan_s: f64,
}

/// Median of at least 20 timed single-step forwards (batch 32) plus one full
/// CEM plan, with a simple cost-model cross-check: plan time should be about
/// iterations x horizon single-step forwards at the population batch size.
pub fn timing_bench(
    model: &WorldModel,
    encoder: &dyn Encoder,
    o0: &crate::data::Obs,
    goal: &crate::data::Obs,
    plan_cfg: &PlanConfig,
) -> Result<TimingReport> {
    let n = model.predictor.cfg.n_patches;
    let e = model.predictor.cfg.e_dim;
    let z = encoder.encode_patches(o0)?;
    let time_forward = |batch_size: usize, reps: usize| -> Result<f64> {
        let mut batch = Array3::<f64>::zeros((batch_size, n, e));
        for b in 0..batch_size {
            batch.slice_mut(s![b, .., ..]).assign(&z);
        }
        let proprio = model
            .proprio_embed
            .as_ref()
            .map(|pe| Array2::<f64>::zeros((batch_size, pe.in_dim)).into_dyn());
        let mut times = Vec::with_capacity(reps);
        for rep in 0..=reps {
            let t0 = Instant::now();
            let tape = Tape::new();
            let ctx = ParamCtx::frozen(&tape, &model.store);
            let frame = model.frame_tensor(&ctx, batch.clone().into_dyn(), proprio.clone())?;
            let acts = tape.leaf(
                Array2::<f64>::zeros((batch_size, model.eff_action_dim())).into_dyn(),
                false,
            );
            let emb = model.action_embed.forward(&ctx, acts);
            let out = model.predictor.predict_next(&ctx, &[frame], &[emb])?;
            let _ = tape.value(out);
            if rep > 0 {
                times.push(t0.elapsed().as_secs_f64()); // first run warms caches
            }
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(times[times.len() / 2])
    };
    let per_step = time_forward(32, 20)?;
    let per_step_pop = time_forward(plan_cfg.n_samples, 5)?;

    let t0 = Instant::now();
    let _ = planner::cem_plan(
        model,
        encoder,
        o0,
        model.proprio_embed.as_ref().map(|pe| vec![0.0; pe.in_dim]),
        goal,
        0.1,
        plan_cfg,
    )?;
    let plan_s = t0.elapsed().as_secs_f64();
    let predicted = plan_cfg.iterations as f64 * plan_cfg.horizon as f64 * per_step_pop;
    Ok(TimingReport { per_step_inference_s: per_step, plan_s, predicted_plan_s: predicted })
}

/// External perceptual-distance hook. The crate ships no learned metric;
/// callers supply one (lower = more similar) and get per-pair means back.
pub type PerceptualMetric<'a> = &'a (dyn Fn(&crate::data::Obs, &crate::data::Obs) -> f64 + Sync);

pub fn mean_perceptual(metric: PerceptualMetric<'_>, pairs: &[(crate::data::Obs, crate::data::Obs)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no image pairs".into()));
    }
    Ok(pairs.iter().map(|(a, b)| metric(a, b)).sum::<f64>() / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(success: bool) -> EpisodeResult {
        EpisodeResult {
            success,
            steps: 1,
            replans: 0,
            final_plan_cost: 0.0,
            frames: Vec::new(),
        }
    }

    #[test]
    fn success_rate_arithmetic() {
        let all: Vec<EpisodeResult> = (0..10).map(|_| fake(true)).collect();
        assert_eq!(success_rate(&all).unwrap(), 1.0);
        let mixed: Vec<EpisodeResult> =
            (0..50).map(|i| fake(i < 45)).collect();
        assert_eq!(success_rate(&mixed).unwrap(), 0.9);
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn wilson_interval_brackets_point() {
        let (lo, hi) = wilson_interval(45, 50);
        assert!(lo < 0.9 && 0.9 < hi);
        assert!(lo > 0.7 && hi < 0.99);
        let (lo0, hi0) = wilson_interval(0, 50);
        assert_eq!(lo0, 0.0);
        assert!(hi0 > 0.0 && hi0 < 0.15);
    }

    #[test]
    fn perceptual_hook_accepts_external_metric() {
        let a = crate::data::Obs::zeros((crate::data::IMG, crate::data::IMG, 3));
        let b = a.clone();
        let metric = |x: &crate::data::Obs, y: &crate::data::Obs| -> f64 {
            x.iter()
                .zip(y.iter())
                .map(|(p, q)| (*p as f64 - *q as f64).abs())
                .sum::<f64>()
        };
        let m = mean_perceptual(&metric, &[(a, b)]).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn timing_bench_cost_model_within_3x() {
        use crate::encoders::make_encoder;
        use crate::envs::{self, EnvConfig};
        use crate::trainer::{train_predictor_latent, LatentDataset, TrainConfig};
        let env_cfg = EnvConfig::default();
        let enc = make_encoder("test:seed=0,n=16,e=8").unwrap();
        let lds = LatentDataset::generate("wall", 2, 6, 0, &env_cfg, enc.as_ref()).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            h: 1,
            frameskip: 1,
            depth: 2,
            heads: 2,
            mlp_dim: 64,
            embed_dim: 32,
            ..TrainConfig::default()
        };
        let (model, _) = train_predictor_latent(&lds, &tc, None, None)
            .unwrap()
            .into_best_model();
        let (init, goal) = envs::sample_task("wall", 0, &env_cfg).unwrap();
        let obs0 = envs::render(&init, &env_cfg);
        let cfg = PlanConfig {
            horizon: 4,
            n_samples: 64,
            iterations: 6,
            ..PlanConfig::default()
        };
        let report = timing_bench(&model, enc.as_ref(), &obs0, &goal.goal_obs, &cfg).unwrap();
        assert!(report.per_step_inference_s > 0.0);
        assert!(report.plan_s > 0.0);
        let ratio = report.plan_s / report.predicted_plan_s;
        assert!(
            (1.0 / 3.0..=3.0).contains(&ratio),
            "plan {:.4}s vs cost-model {:.4}s (ratio {ratio:.2})",
            report.plan_s,
            report.predicted_plan_s
        );
    }
}
