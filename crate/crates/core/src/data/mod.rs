//! Trajectory and dataset records, their on-disk format, and frameskip-aware
//! slicing into teacher-forcing segments.

pub mod io;
pub mod segments;

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every observation image.
pub const IMG: usize = 224;

/// RGB observation, `[224, 224, 3]` u8, row-major, y down.
pub type Obs = Array3<u8>;

/// One episode: `T` observations, `T` proprio rows, `T-1` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Obs>,
    /// `[T, P]`, environment units. `P` may be zero.
    pub proprio: Array2<f32>,
    /// `[T-1, A]`, environment action units.
    pub actions: Array2<f32>,
    pub env_name: String,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn proprio_dim(&self) -> usize {
        self.proprio.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.observations.len();
        if t < 2 {
            return Err(Error::Validation(format!("trajectory has {t} frames, need >= 2")));
        }
        for (i, o) in self.observations.iter().enumerate() {
            if o.shape() != [IMG, IMG, 3] {
                return Err(Error::Validation(format!(
                    "frame {i} has shape {:?}, expected [{IMG}, {IMG}, 3]",
                    o.shape()
                )));
            }
        }
        if self.proprio.nrows() != t {
            return Err(Error::Validation(format!(
                "proprio rows {} != frames {t}",
                self.proprio.nrows()
            )));
        }
        if self.actions.nrows() != t - 1 {
            return Err(Error::Validation(format!(
                "actions rows {} != frames-1 {}",
                self.actions.nrows(),
                t - 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_name: String,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub n_traj: usize,
    pub traj_len_min: usize,
    pub traj_len_max: usize,
    pub frames_total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub metadata: DatasetMeta,
}

impl Dataset {
    /// Build from trajectories, checking the shared-dimension invariants.
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Validation("dataset has no trajectories".into()));
        }
        let env_name = trajectories[0].env_name.clone();
        let a = trajectories[0].action_dim();
        let p = trajectories[0].proprio_dim();
        let mut len_min = usize::MAX;
        let mut len_max = 0;
        let mut frames = 0;
        for (i, tr) in trajectories.iter().enumerate() {
            tr.validate()
                .map_err(|e| Error::Validation(format!("trajectory {i}: {e}")))?;
            if tr.env_name != env_name || tr.action_dim() != a || tr.proprio_dim() != p {
                return Err(Error::Validation(format!(
                    "trajectory {i} dims ({}, A={}, P={}) differ from dataset ({env_name}, A={a}, P={p})",
                    tr.env_name,
                    tr.action_dim(),
                    tr.proprio_dim()
                )));
            }
            len_min = len_min.min(tr.len());
            len_max = len_max.max(tr.len());
            frames += tr.len();
        }
        let metadata = DatasetMeta {
            env_name,
            action_dim: a,
            proprio_dim: p,
            n_traj: trajectories.len(),
            traj_len_min: len_min,
            traj_len_max: len_max,
            frames_total: frames,
        };
        Ok(Dataset { trajectories, metadata })
    }
}

/// Deterministic 95/5 train/validation split over trajectory indices.
///
/// Membership depends only on `(seed, index)` so it is stable across runs
/// and dataset growth keeps earlier assignments.
pub fn train_val_split(n_traj: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n_traj {
        if split_hash(seed, i as u64) % 20 == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if val.is_empty() && n_traj >= 2 {
        val.push(train.pop().unwrap());
    }
    (train, val)
}

fn split_hash(seed: u64, i: u64) -> u64 {
    // splitmix64
    let mut z = seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
