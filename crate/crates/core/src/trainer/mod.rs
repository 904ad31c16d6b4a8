//! Teacher-forcing training for the predictor (plus action/proprio
//! embedders) and the decoder, with ablation switches, checkpointing, and
//! line-delimited training logs.

pub mod checkpoint;
pub mod latent;

use std::collections::HashMap;
use std::time::Instant;

use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::segments::{effective_action, segment_starts};
use crate::data::train_val_split;
use crate::decoder::{mse_loss, obs_to_chw, Decoder, DecoderConfig};
use crate::encoders::{ActionEmbed, ProprioEmbed, PROPRIO_EMB_DIM};
use crate::error::{Error, Result};
use crate::math::tape::{Tape, TensorRef};
use crate::math::{AdamW, Arr, ParamCtx, ParamStore};
use crate::predictor::{Predictor, PredictorConfig};

pub use latent::{DatasetImages, ImageProvider, LatentDataset, ReplayImages};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Train without the frame-causal attention mask.
    pub no_causal_mask: bool,
    /// Backpropagate the decoder's reconstruction loss into the predictor
    /// (trains a fresh decoder jointly).
    pub decoder_loss_to_predictor: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_predictor: f64,
    pub lr_decoder: f64,
    pub lr_action_enc: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// History length (input frames per segment).
    pub h: usize,
    pub frameskip: usize,
    pub seed: u64,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub embed_dim: usize,
    /// Cap on optimizer steps per epoch (None = full pass).
    pub max_batches_per_epoch: Option<usize>,
    /// Cap on validation segments per evaluation.
    pub max_eval_segments: usize,
    /// Zero out wallclock fields in logs so artifacts are bit-reproducible.
    pub deterministic: bool,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 32,
            lr_predictor: 5e-5,
            lr_decoder: 3e-4,
            lr_action_enc: 5e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            h: 1,
            frameskip: 5,
            seed: 0,
            depth: 6,
            heads: 16,
            mlp_dim: 2048,
            embed_dim: 512,
            max_batches_per_epoch: None,
            max_eval_segments: 512,
            deterministic: false,
            ablations: Ablations::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wallclock_s: f64,
}

/// A trained world model: predictor plus embedders over a frozen encoder.
pub struct WorldModel {
    pub store: ParamStore,
    pub predictor: Predictor,
    pub action_embed: ActionEmbed,
    pub proprio_embed: Option<ProprioEmbed>,
    pub encoder_id: String,
    pub env_name: String,
    pub frameskip: usize,
    pub raw_action_dim: usize,
    pub fingerprint: String,
}

impl WorldModel {
    pub fn eff_action_dim(&self) -> usize {
        self.raw_action_dim * self.frameskip
    }

    /// Build a latent frame tensor `[B, N, E+P']` from constant patches and
    /// (when the model uses proprio) raw proprio values.
    pub fn frame_tensor(
        &self,
        ctx: &ParamCtx,
        patches: Arr,
        proprio: Option<Arr>,
    ) -> Result<TensorRef> {
        let tape = ctx.tape;
        let zp = tape.leaf(patches, false);
        match (&self.proprio_embed, proprio) {
            (None, _) => Ok(zp),
            (Some(pe), Some(raw)) => {
                let b = tape.shape(zp)[0];
                let n = tape.shape(zp)[1];
                let raw = tape.leaf(raw, false);
                let emb = pe.forward(ctx, raw); // [B, P']
                let emb = tape.reshape(emb, &[b, 1, pe.out_dim]);
                let emb = tape.broadcast_axis(emb, 1, n);
                Ok(tape.concat(&[zp, emb], 2))
            }
            (Some(_), None) => Err(Error::InvalidArgument(
                "model carries proprio but none was provided".into(),
            )),
        }
    }
}

pub struct TrainOutput {
    pub model: WorldModel,
    /// Parameters at the best validation loss.
    pub best_store: ParamStore,
    pub logs: Vec<EpochLog>,
    pub opt: AdamW,
    pub epochs_done: usize,
    pub train_cfg: TrainConfig,
}

impl TrainOutput {
    /// Consume the output, installing the best-validation parameters.
    pub fn into_best_model(self) -> (WorldModel, Vec<EpochLog>) {
        let model = WorldModel { store: self.best_store, ..self.model };
        (model, self.logs)
    }
}

fn predictor_config(lds: &LatentDataset, cfg: &TrainConfig) -> PredictorConfig {
    PredictorConfig {
        depth: cfg.depth,
        heads: cfg.heads,
        mlp_dim: cfg.mlp_dim,
        embed_dim: cfg.embed_dim,
        h: cfg.h,
        n_patches: lds.n_patches(),
        e_dim: lds.e_dim,
        k_dim: crate::encoders::embed::ACTION_EMB_DIM,
        p_dim: if lds.raw_proprio_dim > 0 { PROPRIO_EMB_DIM } else { 0 },
        causal_mask: !cfg.ablations.no_causal_mask,
    }
}

fn build_model(lds: &LatentDataset, cfg: &TrainConfig) -> Result<WorldModel> {
    let pred_cfg = predictor_config(lds, cfg);
    let predictor = Predictor::new(pred_cfg)?;
    let mut store = ParamStore::new();
    predictor.init_params(&mut store, cfg.seed);
    let action_embed = ActionEmbed::new(
        lds.raw_action_dim * cfg.frameskip,
        crate::encoders::embed::ACTION_EMB_DIM,
    );
    action_embed.init_params(&mut store, cfg.seed);
    let proprio_embed = ProprioEmbed::new(lds.raw_proprio_dim);
    if let Some(pe) = &proprio_embed {
        pe.init_params(&mut store, cfg.seed);
    }
    Ok(WorldModel {
        store,
        predictor,
        action_embed,
        proprio_embed,
        encoder_id: lds.encoder_id.clone(),
        env_name: lds.env_name.clone(),
        frameskip: cfg.frameskip,
        raw_action_dim: lds.raw_action_dim,
        fingerprint: lds.fingerprint.clone(),
    })
}

fn lr_groups(cfg: &TrainConfig) -> Vec<(String, f64)> {
    vec![
        ("pred.".into(), cfg.lr_predictor),
        ("action_enc.".into(), cfg.lr_action_enc),
        ("proprio_enc.".into(), cfg.lr_action_enc),
        ("dec.".into(), cfg.lr_decoder),
    ]
}

/// One training slice in latent space.
struct LatentBatch {
    /// H input frames: `[B, N, E]`
    frames: Vec<Arr>,
    /// H raw proprio rows `[B, P]` (empty when P = 0)
    proprio: Vec<Arr>,
    /// H effective actions `[B, A*f]`
    actions: Vec<Arr>,
    /// targets: `[B, H, N, E]`
    target_patches: Arr,
    /// H target proprio rows `[B, P]`
    target_proprio: Vec<Arr>,
    /// (traj, frame index) of each target slot, for image lookups
    target_ids: Vec<Vec<(usize, usize)>>,
}

fn build_batch(lds: &LatentDataset, picks: &[(usize, usize)], cfg: &TrainConfig) -> LatentBatch {
    let (h, f) = (cfg.h, cfg.frameskip);
    let b = picks.len();
    let n = lds.n_patches();
    let e = lds.e_dim;
    let p = lds.raw_proprio_dim;
    let a_eff = lds.raw_action_dim * f;
    let mut frames = vec![Array3::<f64>::zeros((b, n, e)); h];
    let mut proprio = vec![Array2::<f64>::zeros((b, p)); h];
    let mut actions = vec![Array2::<f64>::zeros((b, a_eff)); h];
    let mut target_patches = Array4::<f64>::zeros((b, h, n, e));
    let mut target_proprio = vec![Array2::<f64>::zeros((b, p)); h];
    let mut target_ids = vec![vec![(0usize, 0usize); b]; h];
    for (bi, &(ti, start)) in picks.iter().enumerate() {
        let tr = &lds.trajs[ti];
        for i in 0..h {
            let t = start + i * f;
            let zt = tr.latents.slice(s![t, .., ..]);
            frames[i]
                .slice_mut(s![bi, .., ..])
                .assign(&zt.mapv(|v| v as f64));
            for j in 0..p {
                proprio[i][[bi, j]] = tr.proprio[[t, j]] as f64;
            }
            let eff = effective_action(&tr.actions, start, i, f);
            for (j, v) in eff.into_iter().enumerate() {
                actions[i][[bi, j]] = v as f64;
            }
            let tt = start + (i + 1) * f;
            let ztt = tr.latents.slice(s![tt, .., ..]);
            target_patches
                .slice_mut(s![bi, i, .., ..])
                .assign(&ztt.mapv(|v| v as f64));
            for j in 0..p {
                target_proprio[i][[bi, j]] = tr.proprio[[tt, j]] as f64;
            }
            target_ids[i][bi] = (ti, tt);
        }
    }
    LatentBatch {
        frames: frames.into_iter().map(|a| a.into_dyn()).collect(),
        proprio: proprio.into_iter().map(|a| a.into_dyn()).collect(),
        actions: actions.into_iter().map(|a| a.into_dyn()).collect(),
        target_patches: target_patches.into_dyn(),
        target_proprio: target_proprio.into_iter().map(|a| a.into_dyn()).collect(),
        target_ids,
    }
}

/// Assemble the constant target tensor `[B, H, N, E+P']`. Target proprio
/// embeddings are computed without gradient (detached), so the loss cannot
/// be driven down by shrinking the embedding itself.
fn target_tensor(model: &WorldModel, tape: &Tape, batch: &LatentBatch) -> TensorRef {
    match &model.proprio_embed {
        None => tape.leaf(batch.target_patches.clone(), false),
        Some(pe) => {
            let frozen = ParamCtx::frozen(tape, &model.store);
            let shape = batch.target_patches.shape().to_vec();
            let (b, h, n) = (shape[0], shape[1], shape[2]);
            let tp = tape.leaf(batch.target_patches.clone(), false);
            let mut embs = Vec::with_capacity(h);
            for i in 0..h {
                let raw = tape.leaf(batch.target_proprio[i].clone(), false);
                let emb = pe.forward(&frozen, raw); // [B, P'] non-grad
                let emb = tape.reshape(emb, &[b, 1, 1, pe.out_dim]);
                let emb = tape.broadcast_axis(emb, 2, n);
                embs.push(emb); // [B, 1, N, P']
            }
            let emb_all = tape.concat(&embs, 1); // [B, H, N, P']
            tape.concat(&[tp, emb_all], 3)
        }
    }
}

/// Forward one batch; returns (loss node, ctx, prediction node).
fn batch_loss<'a>(
    model: &'a WorldModel,
    dec: Option<&Decoder>,
    images: Option<(&dyn ImageProvider, &LatentBatch)>,
    tape: &'a Tape,
    batch: &LatentBatch,
    trainable: bool,
) -> Result<(TensorRef, ParamCtx<'a>)> {
    let ctx = if trainable {
        ParamCtx::new(tape, &model.store)
    } else {
        ParamCtx::frozen(tape, &model.store)
    };
    let h = batch.frames.len();
    let mut frames = Vec::with_capacity(h);
    let mut acts = Vec::with_capacity(h);
    for i in 0..h {
        let pr = if model.proprio_embed.is_some() {
            Some(batch.proprio[i].clone())
        } else {
            None
        };
        frames.push(model.frame_tensor(&ctx, batch.frames[i].clone(), pr)?);
        let a = tape.leaf(batch.actions[i].clone(), false);
        acts.push(model.action_embed.forward(&ctx, a));
    }
    let pred = model.predictor.forward(&ctx, &frames, &acts);
    let target = target_tensor(model, tape, batch);
    let mut loss = tape.mean_sq(tape.sub(pred, target));
    if let (Some(dec), Some((provider, _))) = (dec, images) {
        // ablation: decode predicted patch slices and add pixel loss
        let shape = tape.shape(pred);
        let (b, hh, n) = (shape[0], shape[1], shape[2]);
        let e = model.predictor.cfg.e_dim;
        let zslice = tape.slice_axis(pred, 3, 0, e);
        let z = tape.reshape(zslice, &[b * hh, n, e]);
        let decoded = dec.decode(&ctx, z)?;
        // the reshape flattens [B, H] batch-major: row bi*hh + i
        let mut targets = Array4::<f64>::zeros((b * hh, 3, crate::data::IMG, crate::data::IMG));
        for bi in 0..b {
            for i in 0..hh {
                let (ti, t) = batch.target_ids[i][bi];
                let img = provider.frame(ti, t)?;
                targets
                    .slice_mut(s![bi * hh + i, .., .., ..])
                    .assign(&obs_to_chw(&img).into_dimensionality::<Ix3>().unwrap());
            }
        }
        let timg = tape.leaf(targets.into_dyn(), false);
        let recon = mse_loss(tape, decoded, timg);
        loss = tape.add(loss, recon);
    }
    Ok((loss, ctx))
}

fn shard_ranges(b: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let shards = shards.min(b).max(1);
    let base = b / shards;
    let extra = b % shards;
    let mut out = Vec::new();
    let mut at = 0;
    for i in 0..shards {
        let len = base + usize::from(i < extra);
        out.push(at..at + len);
        at += len;
    }
    out
}

fn subset_batch(lds: &LatentDataset, picks: &[(usize, usize)], cfg: &TrainConfig) -> LatentBatch {
    build_batch(lds, picks, cfg)
}

/// Run forward/backward over one optimizer step, data-parallel across
/// shards, and return (mean loss, summed-by-weight gradients).
fn grad_step(
    model: &WorldModel,
    dec: Option<&Decoder>,
    images: Option<&dyn ImageProvider>,
    lds: &LatentDataset,
    picks: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<(f64, HashMap<String, Arr>)> {
    use rayon::prelude::*;
    let ranges = shard_ranges(picks.len(), rayon::current_num_threads());
    let shard_out: Vec<Result<(f64, HashMap<String, Arr>, usize)>> = ranges
        .into_par_iter()
        .map(|r| {
            let shard_picks = &picks[r];
            let batch = subset_batch(lds, shard_picks, cfg);
            let tape = Tape::new();
            let (loss, ctx) =
                batch_loss(model, dec, images.map(|p| (p, &batch)), &tape, &batch, true)?;
            let lv = tape.scalar(loss);
            let mut grads = tape.backward(loss);
            Ok((lv, ctx.grads_by_name(&mut grads), shard_picks.len()))
        })
        .collect();

    let total = picks.len() as f64;
    let mut loss_sum = 0.0;
    let mut grads: HashMap<String, Arr> = HashMap::new();
    for out in shard_out {
        let (lv, g, count) = out?;
        let w = count as f64 / total;
        loss_sum += lv * w;
        for (name, arr) in g {
            let weighted = arr * w;
            match grads.get_mut(&name) {
                Some(acc) => *acc += &weighted,
                None => {
                    grads.insert(name, weighted);
                }
            }
        }
    }
    Ok((loss_sum, grads))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 32)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 32))
}

/// Mean teacher-forcing loss and per-slot breakdown over given trajectories.
pub fn eval_loss(
    model: &WorldModel,
    lds: &LatentDataset,
    traj_indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let lens = lds.lens();
    let sub_lens: Vec<usize> = traj_indices.iter().map(|&i| lens[i]).collect();
    let (mut segs, _) = segment_starts(&sub_lens, cfg.h, cfg.frameskip);
    for s in segs.iter_mut() {
        s.0 = traj_indices[s.0];
    }
    if segs.is_empty() {
        return Err(Error::InvalidArgument("no evaluable segments".into()));
    }
    if segs.len() > cfg.max_eval_segments {
        // deterministic thinning
        let stride = segs.len() as f64 / cfg.max_eval_segments as f64;
        segs = (0..cfg.max_eval_segments)
            .map(|i| segs[(i as f64 * stride) as usize])
            .collect();
    }
    let mut per_frame = vec![0.0; cfg.h];
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in segs.chunks(cfg.batch.max(1)) {
        let batch = build_batch(lds, chunk, cfg);
        let tape = Tape::new();
        let (loss, _ctx) = batch_loss(model, None, None, &tape, &batch, false)?;
        // recompute per-slot losses from the prediction node
        // (cheap: reuse the tape's stored values)
        let lv = tape.scalar(loss);
        total += lv * chunk.len() as f64;
        count += chunk.len();
        // per-frame: build fresh diff slices
        let ctx2 = ParamCtx::frozen(&tape, &model.store);
        let mut frames = Vec::new();
        let mut acts = Vec::new();
        for i in 0..cfg.h {
            let pr = if model.proprio_embed.is_some() {
                Some(batch.proprio[i].clone())
            } else {
                None
            };
            frames.push(model.frame_tensor(&ctx2, batch.frames[i].clone(), pr)?);
            let a = tape.leaf(batch.actions[i].clone(), false);
            acts.push(model.action_embed.forward(&ctx2, a));
        }
        let pred = model.predictor.forward(&ctx2, &frames, &acts);
        let target = target_tensor(model, &tape, &batch);
        let diff = tape.sub(pred, target);
        for i in 0..cfg.h {
            let slot = tape.slice_axis(diff, 1, i, 1);
            per_frame[i] += tape.scalar(tape.mean_sq(slot)) * chunk.len() as f64;
        }
    }
    for v in per_frame.iter_mut() {
        *v /= count as f64;
    }
    Ok((total / count as f64, per_frame))
}

/// Train the predictor (and embedders) on a latent dataset.
///
/// With `ablations.decoder_loss_to_predictor`, a fresh decoder is trained
/// jointly and its pixel loss backpropagates into the predictor; `images`
/// must then be provided.
pub fn train_predictor_latent(
    lds: &LatentDataset,
    cfg: &TrainConfig,
    images: Option<&dyn ImageProvider>,
    save_dir: Option<&std::path::Path>,
) -> Result<TrainOutput> {
    let model = build_model(lds, cfg)?;
    let opt = AdamW::new(cfg.weight_decay, lr_groups(cfg));
    run_training(model, opt, lds, cfg, images, save_dir, 0, Vec::new())
}

/// Continue training from a checkpoint produced by [`train_predictor_latent`].
pub fn train_predictor_resume(
    ckpt_path: &std::path::Path,
    lds: &LatentDataset,
    save_dir: Option<&std::path::Path>,
) -> Result<TrainOutput> {
    let loaded = checkpoint::read_predictor(ckpt_path)?;
    if loaded.model.fingerprint != lds.fingerprint {
        return Err(Error::Mismatch(format!(
            "checkpoint was trained on dataset {}, given {}",
            loaded.model.fingerprint, lds.fingerprint
        )));
    }
    let cfg = loaded.train_cfg.clone();
    run_training(
        loaded.model,
        loaded.opt,
        lds,
        &cfg,
        None,
        save_dir,
        loaded.epochs_done,
        loaded.logs,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    mut model: WorldModel,
    mut opt: AdamW,
    lds: &LatentDataset,
    cfg: &TrainConfig,
    images: Option<&dyn ImageProvider>,
    save_dir: Option<&std::path::Path>,
    start_epoch: usize,
    mut logs: Vec<EpochLog>,
) -> Result<TrainOutput> {
    if cfg.ablations.decoder_loss_to_predictor && images.is_none() && start_epoch == 0 {
        return Err(Error::InvalidArgument(
            "decoder_loss_to_predictor needs an image provider".into(),
        ));
    }
    let decoder = if cfg.ablations.decoder_loss_to_predictor {
        let dcfg = DecoderConfig::derive(lds.rows, lds.cols, lds.e_dim)?;
        let dec = Decoder::new(dcfg)?;
        if start_epoch == 0 {
            dec.init_params(&mut model.store, cfg.seed);
        }
        Some(dec)
    } else {
        None
    };

    let lens = lds.lens();
    let (train_idx, val_idx) = train_val_split(lens.len(), cfg.seed);
    let train_lens: Vec<usize> = train_idx.iter().map(|&i| lens[i]).collect();
    let (mut train_segs, skipped) = segment_starts(&train_lens, cfg.h, cfg.frameskip);
    if skipped > 0 {
        eprintln!("warning: {skipped} trajectories too short for H={}, f={}", cfg.h, cfg.frameskip);
    }
    if train_segs.is_empty() {
        return Err(Error::InvalidArgument("no training segments".into()));
    }
    for s in train_segs.iter_mut() {
        s.0 = train_idx[s.0];
    }

    let mut best_store = model.store.clone();
    let mut best_val = f64::INFINITY;
    for log in &logs {
        if log.val_loss < best_val {
            best_val = log.val_loss;
        }
    }
    let t0 = Instant::now();
    for epoch in start_epoch..cfg.epochs {
        let mut order = train_segs.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        if let Some(cap) = cfg.max_batches_per_epoch {
            order.truncate(cap * cfg.batch);
        }
        let mut train_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let (lv, grads) = grad_step(&model, decoder.as_ref(), images, lds, chunk, cfg)?;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, batch {batches}: loss {lv}")));
            }
            opt.apply(&mut model.store, &grads, Some(cfg.grad_clip));
            train_loss += lv;
            batches += 1;
        }
        train_loss /= batches.max(1) as f64;
        let (val_loss, _) = eval_loss(&model, lds, &val_idx, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: val loss {val_loss}")));
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_store = model.store.clone();
        }
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wallclock_s: if cfg.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
        });
        if let Some(dir) = save_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            checkpoint::write_predictor(
                &dir.join("last.ckpt"),
                &model,
                &opt,
                cfg,
                epoch + 1,
                &logs,
            )?;
            checkpoint::write_store(&dir.join("best.ckpt"), &best_store, "best")?;
            let log_path = dir.join("train_log.jsonl");
            let mut text = String::new();
            for l in &logs {
                text.push_str(&serde_json::to_string(l).unwrap());
                text.push('\n');
            }
            std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
        }
    }
    Ok(TrainOutput {
        model,
        best_store,
        logs,
        opt,
        epochs_done: cfg.epochs,
        train_cfg: cfg.clone(),
    })
}

/// Train the predictor from an image dataset (encodes first).
pub fn train_predictor(
    dataset: &crate::data::Dataset,
    encoder: &dyn crate::encoders::Encoder,
    cfg: &TrainConfig,
    save_dir: Option<&std::path::Path>,
) -> Result<TrainOutput> {
    let lds = LatentDataset::from_dataset(dataset, encoder)?;
    let images_store;
    let images: Option<&dyn ImageProvider> = if cfg.ablations.decoder_loss_to_predictor {
        images_store = DatasetImages(dataset);
        Some(&images_store)
    } else {
        None
    };
    train_predictor_latent(&lds, cfg, images, save_dir)
}

pub struct DecoderOutput {
    pub decoder: Decoder,
    pub store: ParamStore,
    pub logs: Vec<EpochLog>,
}


/// Train the pixel decoder on (latent, image) pairs. Touches only `dec.*`
/// parameters; latents enter as constants so nothing flows upstream.
pub fn train_decoder(
    lds: &LatentDataset,
    images: &dyn ImageProvider,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<DecoderOutput> {
    let dcfg = DecoderConfig::derive(lds.rows, lds.cols, lds.e_dim)?;
    let decoder = Decoder::new(dcfg)?;
    let mut store = ParamStore::new();
    decoder.init_params(&mut store, cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay, lr_groups(cfg));

    let lens = lds.lens();
    let (train_idx, val_idx) = train_val_split(lens.len(), cfg.seed);
    let mut all_frames: Vec<(usize, usize)> = Vec::new();
    for &ti in &train_idx {
        for t in 0..lens[ti] {
            all_frames.push((ti, t));
        }
    }
    let mut val_frames: Vec<(usize, usize)> = Vec::new();
    for &ti in &val_idx {
        for t in 0..lens[ti] {
            val_frames.push((ti, t));
        }
    }
    if val_frames.len() > 64 {
        let stride = val_frames.len() / 64;
        val_frames = val_frames.iter().step_by(stride.max(1)).copied().collect();
    }

    let batch_frames = |picks: &[(usize, usize)]| -> Result<(Arr, Arr)> {
        let b = picks.len();
        let n = lds.n_patches();
        let e = lds.e_dim;
        let mut z = Array3::<f64>::zeros((b, n, e));
        let mut img = Array4::<f64>::zeros((b, 3, crate::data::IMG, crate::data::IMG));
        for (bi, &(ti, t)) in picks.iter().enumerate() {
            z.slice_mut(s![bi, .., ..])
                .assign(&lds.trajs[ti].latents.slice(s![t, .., ..]).mapv(|v| v as f64));
            let frame = images.frame(ti, t)?;
            img.slice_mut(s![bi, .., .., ..])
                .assign(&obs_to_chw(&frame).into_dimensionality::<Ix3>().unwrap());
        }
        Ok((z.into_dyn(), img.into_dyn()))
    };

    let eval_recon = |store: &ParamStore| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in val_frames.chunks(cfg.batch.max(1)) {
            let (z, img) = batch_frames(chunk)?;
            let tape = Tape::new();
            let ctx = ParamCtx::frozen(&tape, store);
            let zr = tape.leaf(z, false);
            let ir = tape.leaf(img, false);
            let decoded = decoder.decode(&ctx, zr)?;
            total += tape.scalar(mse_loss(&tape, decoded, ir)) * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count.max(1) as f64)
    };

    let mut logs = Vec::new();
    let t0 = Instant::now();
    for epoch in 0..epochs {
        let mut order = all_frames.clone();
        order.shuffle(&mut epoch_rng(cfg.seed ^ 0xdec, epoch));
        if let Some(cap) = cfg.max_batches_per_epoch {
            order.truncate(cap * cfg.batch);
        }
        let mut train_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let ranges = shard_ranges(chunk.len(), rayon::current_num_threads());
            let outs: Vec<Result<(f64, HashMap<String, Arr>, usize)>> = {
                use rayon::prelude::*;
                ranges
                    .into_par_iter()
                    .map(|r| {
                        let picks = &chunk[r];
                        let (z, img) = batch_frames(picks)?;
                        let tape = Tape::new();
                        let ctx = ParamCtx::new(&tape, &store);
                        let zr = tape.leaf(z, false);
                        let ir = tape.leaf(img, false);
                        let decoded = decoder.decode(&ctx, zr)?;
                        let loss = mse_loss(&tape, decoded, ir);
                        let lv = tape.scalar(loss);
                        let mut grads = tape.backward(loss);
                        Ok((lv, ctx.grads_by_name(&mut grads), picks.len()))
                    })
                    .collect()
            };
            let total = chunk.len() as f64;
            let mut grads: HashMap<String, Arr> = HashMap::new();
            let mut lv_total = 0.0;
            for o in outs {
                let (lv, g, cnt) = o?;
                let w = cnt as f64 / total;
                lv_total += lv * w;
                for (name, arr) in g {
                    let weighted = arr * w;
                    match grads.get_mut(&name) {
                        Some(acc) => *acc += &weighted,
                        None => {
                            grads.insert(name, weighted);
                        }
                    }
                }
            }
            if !lv_total.is_finite() {
                return Err(Error::Diverged(format!("decoder epoch {epoch}: loss {lv_total}")));
            }
            opt.apply(&mut store, &grads, Some(cfg.grad_clip));
            train_loss += lv_total;
            batches += 1;
        }
        let val_loss = eval_recon(&store)?;
        logs.push(EpochLog {
            epoch,
            train_loss: train_loss / batches.max(1) as f64,
            val_loss,
            wallclock_s: if cfg.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
        });
    }
    Ok(DecoderOutput { decoder, store, logs })
}
