//! Slicing trajectories into teacher-forcing segments of `H + 1` frames
//! spaced `frameskip` steps apart, with the raw actions between kept frames
//! concatenated into one effective action per model step.

use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Dataset, Obs};

/// A batch of image-space training segments.
///
/// `obs[b][i]` is frame `start + i*f` of the source trajectory;
/// `actions_eff[b, i]` concatenates the `f` raw actions between kept frames
/// `i` and `i+1`, in order.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    pub obs: Vec<Vec<Obs>>,
    /// `[B, H+1, P]`
    pub proprio: Array3<f32>,
    /// `[B, H, A*f]`
    pub actions_eff: Array3<f32>,
    pub frameskip: usize,
    pub history: usize,
}

/// `(trajectory index, start offset)` pairs for every valid segment.
///
/// A start `t` is valid when the last kept frame `t + f*h` is in range.
pub fn segment_starts(traj_lens: &[usize], h: usize, f: usize) -> (Vec<(usize, usize)>, usize) {
    let span = f * h; // last kept frame offset
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for (ti, &len) in traj_lens.iter().enumerate() {
        if len < span + 1 {
            skipped += 1;
            continue;
        }
        for start in 0..(len - span) {
            out.push((ti, start));
        }
    }
    (out, skipped)
}

/// Build the effective action row for a segment step: raw actions
/// `start+i*f .. start+(i+1)*f` concatenated.
pub fn effective_action(actions: &Array2<f32>, start: usize, step: usize, f: usize) -> Vec<f32> {
    let a = actions.ncols();
    let mut out = Vec::with_capacity(a * f);
    for sub in 0..f {
        let row = actions.row(start + step * f + sub);
        out.extend(row.iter().copied());
    }
    out
}

/// Deterministic shuffled stream of [`SegmentBatch`]es over a dataset.
pub struct SegmentStream<'a> {
    dataset: &'a Dataset,
    order: Vec<(usize, usize)>,
    pos: usize,
    batch: usize,
    h: usize,
    f: usize,
    skipped: usize,
}

impl<'a> SegmentStream<'a> {
    pub fn skipped_trajectories(&self) -> usize {
        self.skipped
    }

    pub fn total_segments(&self) -> usize {
        self.order.len()
    }
}

/// Enumerate all valid segments of `dataset`, shuffled by `shuffle_seed`,
/// grouped into batches of `batch` (final short batch included).
pub fn slice_segments<'a>(
    dataset: &'a Dataset,
    h: usize,
    frameskip: usize,
    shuffle_seed: u64,
    batch: usize,
) -> Result<SegmentStream<'a>> {
    if h < 1 {
        return Err(Error::InvalidArgument(format!("history must be >= 1, got {h}")));
    }
    if frameskip < 1 {
        return Err(Error::InvalidArgument(format!(
            "frameskip must be >= 1, got {frameskip}"
        )));
    }
    if batch < 1 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let lens: Vec<usize> = dataset.trajectories.iter().map(|t| t.len()).collect();
    let (mut order, skipped) = segment_starts(&lens, h, frameskip);
    if skipped > 0 {
        eprintln!("warning: {skipped} trajectories too short for H={h}, f={frameskip}; skipped");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    Ok(SegmentStream { dataset, order, pos: 0, batch, h, f: frameskip, skipped })
}

impl Iterator for SegmentStream<'_> {
    type Item = SegmentBatch;

    fn next(&mut self) -> Option<SegmentBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let picks = &self.order[self.pos..end];
        self.pos = end;
        let b = picks.len();
        let (h, f) = (self.h, self.f);
        let p = self.dataset.metadata.proprio_dim;
        let a = self.dataset.metadata.action_dim;
        let mut obs = Vec::with_capacity(b);
        let mut proprio = Array3::<f32>::zeros((b, h + 1, p));
        let mut actions_eff = Array3::<f32>::zeros((b, h, a * f));
        for (bi, &(ti, start)) in picks.iter().enumerate() {
            let tr = &self.dataset.trajectories[ti];
            let mut frames = Vec::with_capacity(h + 1);
            for i in 0..=h {
                let t = start + i * f;
                frames.push(tr.observations[t].clone());
                proprio
                    .slice_mut(s![bi, i, ..])
                    .assign(&tr.proprio.row(t).mapv(|v| v));
            }
            obs.push(frames);
            for i in 0..h {
                let eff = effective_action(&tr.actions, start, i, f);
                for (j, v) in eff.into_iter().enumerate() {
                    actions_eff[[bi, i, j]] = v;
                }
            }
        }
        Some(SegmentBatch { obs, proprio, actions_eff, frameskip: f, history: h })
    }
}
