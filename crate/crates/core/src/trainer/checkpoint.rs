//! Predictor and decoder checkpoints: parameters, optimizer moments, model
//! configuration, encoder identity, and the dataset fingerprint, in the
//! crate's versioned tensor container.

use std::path::Path;

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoders::{ActionEmbed, ProprioEmbed};
use crate::error::{Error, Result};
use crate::math::serialize::{read_container, write_container};
use crate::math::{AdamW, Arr, ParamStore};
use crate::predictor::{Predictor, PredictorConfig};

use super::{EpochLog, TrainConfig, WorldModel};

pub struct LoadedPredictor {
    pub model: WorldModel,
    pub opt: AdamW,
    pub train_cfg: TrainConfig,
    pub epochs_done: usize,
    pub logs: Vec<EpochLog>,
}

pub fn write_predictor(
    path: &Path,
    model: &WorldModel,
    opt: &AdamW,
    cfg: &TrainConfig,
    epochs_done: usize,
    logs: &[EpochLog],
) -> Result<()> {
    let header = serde_json::json!({
        "kind": "predictor",
        "pred_cfg": model.predictor.cfg,
        "train_cfg": cfg,
        "encoder_id": model.encoder_id,
        "env_name": model.env_name,
        "frameskip": model.frameskip,
        "raw_action_dim": model.raw_action_dim,
        "fingerprint": model.fingerprint,
        "epochs_done": epochs_done,
        "opt": opt,
        "logs": logs,
    });
    let mut tensors: Vec<(String, &Arr)> = model
        .store
        .iter()
        .map(|(n, v)| (n.to_string(), v.as_ref()))
        .collect();
    let opt_state = opt.export_state();
    for (name, arr) in &opt_state {
        tensors.push((name.clone(), arr));
    }
    // keep opt tensors alive until written
    let refs: Vec<(String, &Arr)> = tensors.iter().map(|(n, a)| (n.clone(), *a)).collect();
    write_container(path, &header, &refs)
}

pub fn read_predictor(path: &Path) -> Result<LoadedPredictor> {
    let (header, tensors) = read_container(path)?;
    if header["kind"] != "predictor" {
        return Err(Error::Corrupt { path: path.into(), reason: "not a predictor checkpoint".into() });
    }
    let pred_cfg: PredictorConfig = serde_json::from_value(header["pred_cfg"].clone())
        .map_err(|e| Error::Corrupt { path: path.into(), reason: format!("pred_cfg: {e}") })?;
    let train_cfg: TrainConfig = serde_json::from_value(header["train_cfg"].clone())
        .map_err(|e| Error::Corrupt { path: path.into(), reason: format!("train_cfg: {e}") })?;
    let mut opt: AdamW = serde_json::from_value(header["opt"].clone())
        .map_err(|e| Error::Corrupt { path: path.into(), reason: format!("opt: {e}") })?;
    let logs: Vec<EpochLog> =
        serde_json::from_value(header["logs"].clone()).unwrap_or_default();
    let epochs_done = header["epochs_done"].as_u64().unwrap_or(0) as usize;
    let raw_action_dim = header["raw_action_dim"].as_u64().unwrap_or(2) as usize;
    let frameskip = header["frameskip"].as_u64().unwrap_or(1) as usize;

    let mut store = ParamStore::new();
    let mut opt_tensors = Vec::new();
    for (name, arr) in tensors {
        if name.starts_with("opt.") {
            opt_tensors.push((name, arr));
        } else {
            store.insert(name, arr);
        }
    }
    opt.import_state(opt_tensors);

    let predictor = Predictor::new(pred_cfg)?;
    let action_embed = ActionEmbed::new(
        raw_action_dim * frameskip,
        predictor.cfg.k_dim,
    );
    let proprio_embed = if predictor.cfg.p_dim > 0 {
        // raw proprio dim is recoverable from the stored weight shape
        let w = store.get("proprio_enc.w");
        ProprioEmbed::new(w.shape()[0])
    } else {
        None
    };
    let model = WorldModel {
        store,
        predictor,
        action_embed,
        proprio_embed,
        encoder_id: header["encoder_id"].as_str().unwrap_or_default().to_string(),
        env_name: header["env_name"].as_str().unwrap_or_default().to_string(),
        frameskip,
        raw_action_dim,
        fingerprint: header["fingerprint"].as_str().unwrap_or_default().to_string(),
    };
    Ok(LoadedPredictor { model, opt, train_cfg, epochs_done, logs })
}

/// Bare parameter snapshot (used for the best-validation copy).
pub fn write_store(path: &Path, store: &ParamStore, tag: &str) -> Result<()> {
    let header = serde_json::json!({ "kind": "store", "tag": tag });
    let tensors: Vec<(String, &Arr)> = store
        .iter()
        .map(|(n, v)| (n.to_string(), v.as_ref()))
        .collect();
    write_container(path, &header, &tensors)
}

pub fn read_store(path: &Path) -> Result<ParamStore> {
    let (_, tensors) = read_container(path)?;
    let mut store = ParamStore::new();
    for (name, arr) in tensors {
        store.insert(name, arr);
    }
    Ok(store)
}

pub fn write_decoder(
    path: &Path,
    decoder: &Decoder,
    store: &ParamStore,
    encoder_id: &str,
    logs: &[EpochLog],
) -> Result<()> {
    let header = serde_json::json!({
        "kind": "decoder",
        "dec_cfg": decoder.cfg,
        "encoder_id": encoder_id,
        "logs": logs,
    });
    let tensors: Vec<(String, &Arr)> = store
        .iter()
        .map(|(n, v)| (n.to_string(), v.as_ref()))
        .collect();
    write_container(path, &header, &tensors)
}

pub fn read_decoder(path: &Path) -> Result<(Decoder, ParamStore, String)> {
    let (header, tensors) = read_container(path)?;
    if header["kind"] != "decoder" {
        return Err(Error::Corrupt { path: path.into(), reason: "not a decoder checkpoint".into() });
    }
    let dec_cfg: DecoderConfig = serde_json::from_value(header["dec_cfg"].clone())
        .map_err(|e| Error::Corrupt { path: path.into(), reason: format!("dec_cfg: {e}") })?;
    let mut store = ParamStore::new();
    for (name, arr) in tensors {
        store.insert(name, arr);
    }
    Ok((
        Decoder::new(dec_cfg)?,
        store,
        header["encoder_id"].as_str().unwrap_or_default().to_string(),
    ))
}
