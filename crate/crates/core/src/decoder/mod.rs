//! Optional pixel decoder: a stack of transposed convolutions mapping a
//! patch-feature grid back to a 224x224 RGB image in [0,1].
//!
//! Each stage upsamples by an integer factor (kernel = stride, so output
//! sizes compose exactly); the grid factor 224/rows is decomposed into
//! doublings plus one final odd factor. Training the decoder is entirely
//! independent of the predictor unless the ablation flag routes its loss
//! backward.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Obs, IMG};
use crate::error::{Error, Result};
use crate::math::tape::{Tape, TensorRef};
use crate::math::{init, Arr, ParamCtx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub rows: usize,
    pub cols: usize,
    pub e_dim: usize,
    /// Upsampling factor per stage; product must be `224 / rows`.
    pub strides: Vec<usize>,
    /// Output channels per stage (input channels are `e_dim` then chained).
    pub channels: Vec<usize>,
}

impl DecoderConfig {
    /// Derive a stage plan for a square grid: doublings then one odd factor,
    /// channel widths tapering geometrically to 8.
    pub fn derive(rows: usize, cols: usize, e_dim: usize) -> Result<Self> {
        if rows != cols {
            return Err(Error::InvalidArgument("decoder needs a square grid".into()));
        }
        if rows == 0 || IMG % rows != 0 {
            return Err(Error::InvalidArgument(format!("grid {rows} does not divide {IMG}")));
        }
        let mut factor = IMG / rows;
        let mut strides = Vec::new();
        while factor % 2 == 0 {
            strides.push(2);
            factor /= 2;
        }
        if factor > 1 {
            strides.push(factor);
        }
        let n = strides.len();
        let lo: f64 = 8.0;
        let hi = e_dim.max(8) as f64;
        let channels: Vec<usize> = (1..=n)
            .map(|i| (hi * (lo / hi).powf(i as f64 / n as f64)).round().max(8.0) as usize)
            .collect();
        Ok(DecoderConfig { rows, cols, e_dim, strides, channels })
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.iter().product::<usize>() * self.rows != IMG || self.rows != self.cols {
            return Err(Error::InvalidArgument("decoder stages do not reach 224".into()));
        }
        if self.strides.len() != self.channels.len() || self.strides.is_empty() {
            return Err(Error::InvalidArgument("decoder stage lists inconsistent".into()));
        }
        Ok(())
    }
}

pub struct Decoder {
    pub cfg: DecoderConfig,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Decoder { cfg })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0);
        let mut cin = self.cfg.e_dim;
        for (i, (&s, &cout)) in self.cfg.strides.iter().zip(&self.cfg.channels).enumerate() {
            let std = (2.0 / (cin * s * s) as f64).sqrt();
            store.insert(
                format!("dec.stage{i}.w"),
                init::normal(&mut rng, &[cin, cout, s, s], std),
            );
            store.insert(format!("dec.stage{i}.b"), init::zeros(&[cout]));
            cin = cout;
        }
        store.insert("dec.out.w", init::normal(&mut rng, &[cin, 3, 1, 1], (2.0 / cin as f64).sqrt()));
        store.insert("dec.out.b", init::zeros(&[3]));
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.cfg.strides.len() {
            names.push(format!("dec.stage{i}.w"));
            names.push(format!("dec.stage{i}.b"));
        }
        names.push("dec.out.w".into());
        names.push("dec.out.b".into());
        names
    }

    /// `z: [B, N, E]` (patch slice of a latent frame) -> `[B, 3, 224, 224]`
    /// in [0,1].
    pub fn decode(&self, ctx: &ParamCtx, z: TensorRef) -> Result<TensorRef> {
        let tape = ctx.tape;
        let c = &self.cfg;
        let shape = tape.shape(z);
        if shape.len() != 3 || shape[1] != c.rows * c.cols || shape[2] != c.e_dim {
            return Err(Error::ShapeMismatch(format!(
                "decoder input {:?}, expected [B, {}, {}]",
                shape,
                c.rows * c.cols,
                c.e_dim
            )));
        }
        let b = shape[0];
        let grid = tape.reshape(z, &[b, c.rows, c.cols, c.e_dim]);
        let mut x = tape.permute(grid, &[0, 3, 1, 2]);
        for (i, &s) in c.strides.iter().enumerate() {
            let w = ctx.param(&format!("dec.stage{i}.w"));
            let bb = ctx.param(&format!("dec.stage{i}.b"));
            x = tape.conv_t2d(x, w, Some(bb), s);
            x = tape.leaky_relu(x, 0.1);
        }
        let w = ctx.param("dec.out.w");
        let bb = ctx.param("dec.out.b");
        x = tape.conv_t2d(x, w, Some(bb), 1);
        Ok(tape.clamp01(x))
    }
}

/// Mean squared error between a decoded batch and target images; the spine
/// of the reconstruction loss.
pub fn mse_loss(tape: &Tape, decoded: TensorRef, target: TensorRef) -> TensorRef {
    tape.mean_sq(tape.sub(decoded, target))
}

/// Decode and compare against an observation batch. `z` is passed through
/// as given: hand a non-gradient leaf for the default detached training, or
/// a predictor output node for the backprop ablation.
pub fn reconstruction_loss(
    decoder: &Decoder,
    ctx: &ParamCtx,
    z: TensorRef,
    target: TensorRef,
) -> Result<TensorRef> {
    let decoded = decoder.decode(ctx, z)?;
    Ok(mse_loss(ctx.tape, decoded, target))
}

/// Observation to `[3, 224, 224]` float CHW in [0,1].
pub fn obs_to_chw(obs: &Obs) -> Arr {
    let mut out = Array3::<f64>::zeros((3, IMG, IMG));
    for r in 0..IMG {
        for c in 0..IMG {
            for ch in 0..3 {
                out[[ch, r, c]] = obs[[r, c, ch]] as f64 / 255.0;
            }
        }
    }
    out.into_dyn()
}

/// `[3, 224, 224]` float in [0,1] back to a u8 observation.
pub fn chw_to_obs(chw: &ArrayView3<'_, f64>) -> Obs {
    let mut out = Array3::<u8>::zeros((IMG, IMG, 3));
    for r in 0..IMG {
        for c in 0..IMG {
            for ch in 0..3 {
                out[[r, c, ch]] = (chw[[ch, r, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}
