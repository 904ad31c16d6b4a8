//! Latent-space training cache.
//!
//! Training never touches pixels: each trajectory is encoded once by the
//! frozen encoder and only the (small) feature tensors are kept. For
//! decoder training, images are re-derived on demand by replaying the
//! deterministic simulator with the stored per-trajectory seed and actions,
//! which reproduces the original frames bit-exactly.

use ndarray::prelude::*;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Obs};
use crate::encoders::Encoder;
use crate::envs::{self, EnvConfig};
use crate::error::{Error, Result};

pub struct LatentTraj {
    /// `[T, N, E]`
    pub latents: Array3<f32>,
    /// `[T, P]` raw proprio
    pub proprio: Array2<f32>,
    /// `[T-1, A]` raw actions
    pub actions: Array2<f32>,
    pub seed: u64,
}

pub struct LatentDataset {
    pub env_name: String,
    pub encoder_id: String,
    pub rows: usize,
    pub cols: usize,
    pub e_dim: usize,
    pub raw_action_dim: usize,
    pub raw_proprio_dim: usize,
    pub trajs: Vec<LatentTraj>,
    pub fingerprint: String,
}

impl LatentDataset {
    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn lens(&self) -> Vec<usize> {
        self.trajs.iter().map(|t| t.latents.shape()[0]).collect()
    }

    fn finish(
        env_name: String,
        encoder: &dyn Encoder,
        raw_action_dim: usize,
        raw_proprio_dim: usize,
        trajs: Vec<LatentTraj>,
    ) -> Self {
        let (rows, cols, e_dim) = encoder.dims();
        let mut hasher = Sha256::new();
        hasher.update(env_name.as_bytes());
        hasher.update(encoder.id().as_bytes());
        hasher.update(encoder.checksum());
        for t in &trajs {
            hasher.update(t.seed.to_le_bytes());
            for v in t.latents.iter() {
                hasher.update(v.to_le_bytes());
            }
            for v in t.actions.iter() {
                hasher.update(v.to_le_bytes());
            }
            for v in t.proprio.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let fingerprint = digest.iter().map(|b| format!("{b:02x}")).collect();
        LatentDataset {
            env_name,
            encoder_id: encoder.id(),
            rows,
            cols,
            e_dim,
            raw_action_dim,
            raw_proprio_dim,
            trajs,
            fingerprint,
        }
    }

    /// Encode an in-memory image dataset.
    pub fn from_dataset(ds: &Dataset, encoder: &dyn Encoder) -> Result<Self> {
        let (rows, cols, e) = encoder.dims();
        let n = rows * cols;
        let trajs: Result<Vec<LatentTraj>> = ds
            .trajectories
            .par_iter()
            .map(|tr| {
                let t = tr.len();
                let mut latents = Array3::<f32>::zeros((t, n, e));
                for (ti, obs) in tr.observations.iter().enumerate() {
                    let z = encoder.encode_patches(obs)?;
                    latents
                        .slice_mut(s![ti, .., ..])
                        .assign(&z.mapv(|v| v as f32));
                }
                Ok(LatentTraj {
                    latents,
                    proprio: tr.proprio.clone(),
                    actions: tr.actions.clone(),
                    seed: tr.seed,
                })
            })
            .collect();
        Ok(Self::finish(
            ds.metadata.env_name.clone(),
            encoder,
            ds.metadata.action_dim,
            ds.metadata.proprio_dim,
            trajs?,
        ))
    }

    /// Stream a dataset directory through the encoder without loading all
    /// images at once. `subset` caps the number of trajectories read.
    pub fn from_dir(
        dir: &std::path::Path,
        encoder: &dyn Encoder,
        subset: Option<usize>,
    ) -> Result<Self> {
        let reader = crate::data::io::DatasetReader::open(dir)?;
        let n_traj = subset
            .unwrap_or(reader.meta.n_traj)
            .min(reader.meta.n_traj)
            .max(1);
        let (rows, cols, e) = encoder.dims();
        let n = rows * cols;
        let trajs: Result<Vec<LatentTraj>> = (0..n_traj)
            .into_par_iter()
            .map(|i| {
                let tr = reader.read(i)?;
                let t = tr.len();
                let mut latents = Array3::<f32>::zeros((t, n, e));
                for (ti, obs) in tr.observations.iter().enumerate() {
                    let z = encoder.encode_patches(obs)?;
                    latents
                        .slice_mut(s![ti, .., ..])
                        .assign(&z.mapv(|v| v as f32));
                }
                Ok(LatentTraj {
                    latents,
                    proprio: tr.proprio,
                    actions: tr.actions,
                    seed: tr.seed,
                })
            })
            .collect();
        Ok(Self::finish(
            reader.meta.env_name.clone(),
            encoder,
            reader.meta.action_dim,
            reader.meta.proprio_dim,
            trajs?,
        ))
    }

    /// Generate random-policy trajectories and encode them on the fly,
    /// keeping only latents. Identical content to
    /// `from_dataset(generate_dataset(..))` without the image memory.
    pub fn generate(
        env: &str,
        n_traj: usize,
        traj_len: usize,
        seed: u64,
        cfg: &EnvConfig,
        encoder: &dyn Encoder,
    ) -> Result<Self> {
        let (rows, cols, e) = encoder.dims();
        let n = rows * cols;
        let trajs: Result<Vec<LatentTraj>> = (0..n_traj)
            .into_par_iter()
            .map(|i| {
                let tr = envs::generate_trajectory(env, traj_len, envs::traj_seed(seed, i), cfg)?;
                let t = tr.len();
                let mut latents = Array3::<f32>::zeros((t, n, e));
                for (ti, obs) in tr.observations.iter().enumerate() {
                    let z = encoder.encode_patches(obs)?;
                    latents
                        .slice_mut(s![ti, .., ..])
                        .assign(&z.mapv(|v| v as f32));
                }
                Ok(LatentTraj {
                    latents,
                    proprio: tr.proprio,
                    actions: tr.actions,
                    seed: tr.seed,
                })
            })
            .collect();
        Ok(Self::finish(
            env.to_string(),
            encoder,
            envs::action_dim(env)?,
            envs::proprio_dim(env)?,
            trajs?,
        ))
    }
}

/// Source of ground-truth frames for decoder training and image metrics.
pub trait ImageProvider: Send + Sync {
    fn frame(&self, traj: usize, t: usize) -> Result<Obs>;
}

/// Replays the simulator to re-render any frame of a generated dataset.
pub struct ReplayImages {
    env_name: String,
    cfg: EnvConfig,
    seeds: Vec<u64>,
    actions: Vec<Array2<f32>>,
}

impl ReplayImages {
    pub fn from_latent(lds: &LatentDataset, cfg: EnvConfig) -> Self {
        ReplayImages {
            env_name: lds.env_name.clone(),
            cfg,
            seeds: lds.trajs.iter().map(|t| t.seed).collect(),
            actions: lds.trajs.iter().map(|t| t.actions.clone()).collect(),
        }
    }
}

impl ImageProvider for ReplayImages {
    fn frame(&self, traj: usize, t: usize) -> Result<Obs> {
        let seed = *self
            .seeds
            .get(traj)
            .ok_or_else(|| Error::InvalidArgument(format!("trajectory {traj} out of range")))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut state = envs::reset_from_rng_for_replay(&self.env_name, &mut rng, &self.cfg)?;
        for step_i in 0..t {
            let a = self.actions[traj].row(step_i);
            let (next, _) =
                envs::step_state(&state, &[a[0] as f64, a[1] as f64], &self.cfg)?;
            state = next;
        }
        Ok(envs::render(&state, &self.cfg))
    }
}

/// Serves frames straight from an in-memory dataset.
pub struct DatasetImages<'a>(pub &'a Dataset);

impl ImageProvider for DatasetImages<'_> {
    fn frame(&self, traj: usize, t: usize) -> Result<Obs> {
        Ok(self.0.trajectories[traj].observations[t].clone())
    }
}
