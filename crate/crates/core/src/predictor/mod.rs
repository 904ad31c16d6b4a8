//! The transition model: a decoder-only transformer over patch tokens with a
//! frame-level causal attention mask.
//!
//! Tokens are per-patch feature vectors with the frame's proprio embedding
//! and the action embedding concatenated; a token of frame `t` may attend to
//! every token of frames `<= t` and never to later frames. One masked pass
//! therefore predicts all frames of a teacher-forcing segment in parallel,
//! and the same weights roll out autoregressively at plan time. Positions
//! are factorized into a frame index and a patch index so the history length
//! can vary at inference.

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::tape::TensorRef;
use crate::math::{init, ParamCtx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Internal token width after the input projection.
    pub embed_dim: usize,
    /// History length: maximum number of input frames.
    pub h: usize,
    pub n_patches: usize,
    pub e_dim: usize,
    /// Action embedding width concatenated to every patch token.
    pub k_dim: usize,
    /// Proprio embedding width carried inside each latent frame (0 = none).
    pub p_dim: usize,
    pub causal_mask: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            depth: 6,
            heads: 16,
            mlp_dim: 2048,
            embed_dim: 512,
            h: 1,
            n_patches: 196,
            e_dim: 384,
            k_dim: 10,
            p_dim: 0,
            causal_mask: true,
        }
    }
}

impl PredictorConfig {
    /// Latent width per patch: `E + P'`.
    pub fn frame_dim(&self) -> usize {
        self.e_dim + self.p_dim
    }

    pub fn token_dim(&self) -> usize {
        self.frame_dim() + self.k_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.heads < 1 || self.h < 1 || self.n_patches < 1 {
            return Err(Error::InvalidArgument("predictor config fields must be >= 1".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// `(q, k)` entry is true iff tokens of frame(k) are visible to frame(q):
/// frame-level causality, intra-frame attention included.
pub fn build_frame_causal_mask(l: usize, n: usize) -> Array2<bool> {
    let s = l * n;
    Array2::from_shape_fn((s, s), |(q, k)| (k / n) <= (q / n))
}

pub struct Predictor {
    pub cfg: PredictorConfig,
}

impl Predictor {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Predictor { cfg })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11ed);
        let std = 0.02;
        store.insert("pred.in.w", init::normal(&mut rng, &[c.token_dim(), c.embed_dim], std));
        store.insert("pred.in.b", init::zeros(&[c.embed_dim]));
        store.insert("pred.pos_frame", init::normal(&mut rng, &[c.h, c.embed_dim], std));
        store.insert("pred.pos_patch", init::normal(&mut rng, &[c.n_patches, c.embed_dim], std));
        for i in 0..c.depth {
            let p = format!("pred.blocks.{i}");
            store.insert(format!("{p}.ln1.g"), init::ones(&[c.embed_dim]));
            store.insert(format!("{p}.ln1.b"), init::zeros(&[c.embed_dim]));
            store.insert(
                format!("{p}.qkv.w"),
                init::normal(&mut rng, &[c.embed_dim, 3 * c.embed_dim], std),
            );
            store.insert(format!("{p}.qkv.b"), init::zeros(&[3 * c.embed_dim]));
            store.insert(
                format!("{p}.proj.w"),
                init::normal(&mut rng, &[c.embed_dim, c.embed_dim], std),
            );
            store.insert(format!("{p}.proj.b"), init::zeros(&[c.embed_dim]));
            store.insert(format!("{p}.ln2.g"), init::ones(&[c.embed_dim]));
            store.insert(format!("{p}.ln2.b"), init::zeros(&[c.embed_dim]));
            store.insert(
                format!("{p}.fc1.w"),
                init::normal(&mut rng, &[c.embed_dim, c.mlp_dim], std),
            );
            store.insert(format!("{p}.fc1.b"), init::zeros(&[c.mlp_dim]));
            store.insert(
                format!("{p}.fc2.w"),
                init::normal(&mut rng, &[c.mlp_dim, c.embed_dim], std),
            );
            store.insert(format!("{p}.fc2.b"), init::zeros(&[c.embed_dim]));
        }
        store.insert("pred.ln_f.g", init::ones(&[c.embed_dim]));
        store.insert("pred.ln_f.b", init::zeros(&[c.embed_dim]));
        store.insert("pred.head.w", init::normal(&mut rng, &[c.embed_dim, c.frame_dim()], std));
        store.insert("pred.head.b", init::zeros(&[c.frame_dim()]));
    }

    pub fn param_count(&self) -> usize {
        let c = &self.cfg;
        let d = c.embed_dim;
        let block = d * 3 * d + 3 * d   // qkv
            + d * d + d                 // proj
            + 4 * d                     // ln1, ln2
            + d * c.mlp_dim + c.mlp_dim // fc1
            + c.mlp_dim * d + d; // fc2
        c.token_dim() * d + d           // input proj
            + c.h * d + c.n_patches * d // positions
            + c.depth * block
            + 2 * d                     // final ln
            + d * c.frame_dim() + c.frame_dim() // head
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "pred.in.w".into(),
            "pred.in.b".into(),
            "pred.pos_frame".into(),
            "pred.pos_patch".into(),
            "pred.ln_f.g".into(),
            "pred.ln_f.b".into(),
            "pred.head.w".into(),
            "pred.head.b".into(),
        ];
        for i in 0..self.cfg.depth {
            let p = format!("pred.blocks.{i}");
            for t in [
                "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "ln2.g", "ln2.b",
                "fc1.w", "fc1.b", "fc2.w", "fc2.b",
            ] {
                names.push(format!("{p}.{t}"));
            }
        }
        names
    }

    /// Teacher-forced parallel pass.
    ///
    /// `frames[t]`: `[B, N, E+P']` latent of input frame `t`;
    /// `act_embs[t]`: `[B, K]` embedding of the action taken at frame `t`.
    /// Output `[B, L, N, E+P']`: slot `t` predicts frame `t+1`.
    pub fn forward(
        &self,
        ctx: &ParamCtx,
        frames: &[TensorRef],
        act_embs: &[TensorRef],
    ) -> TensorRef {
        let tape = ctx.tape;
        let c = &self.cfg;
        let l = frames.len();
        assert!(l >= 1 && l <= c.h, "window length {l} outside 1..={}", c.h);
        assert_eq!(act_embs.len(), l, "need one action embedding per frame");
        let b = tape.shape(frames[0])[0];
        let n = c.n_patches;
        let d = c.embed_dim;

        // tokens: [frame latent | action emb broadcast over patches]
        let mut per_frame = Vec::with_capacity(l);
        for (f, a) in frames.iter().zip(act_embs) {
            let a3 = tape.reshape(*a, &[b, 1, c.k_dim]);
            let a3 = tape.broadcast_axis(a3, 1, n);
            per_frame.push(tape.concat(&[*f, a3], 2));
        }
        let tokens = tape.concat(&per_frame, 1); // [B, L*N, Din]
        let s = l * n;
        let flat = tape.reshape(tokens, &[b * s, c.token_dim()]);
        let w_in = ctx.param("pred.in.w");
        let b_in = ctx.param("pred.in.b");
        let mut x = tape.reshape(tape.linear(flat, w_in, Some(b_in)), &[b, s, d]);

        // factorized positions: frame index + patch index
        let pf_all = ctx.param("pred.pos_frame");
        let pf = tape.slice_axis(pf_all, 0, 0, l);
        let pf = tape.broadcast_axis(tape.reshape(pf, &[l, 1, d]), 1, n);
        let pp = ctx.param("pred.pos_patch");
        let pp = tape.broadcast_axis(tape.reshape(pp, &[1, n, d]), 0, l);
        let pos = tape.reshape(tape.add(pf, pp), &[s, d]);
        x = tape.add_broadcast(x, pos);

        let mask = if c.causal_mask {
            Some(Arc::new(build_frame_causal_mask(l, n)))
        } else {
            None
        };

        for i in 0..c.depth {
            let p = format!("pred.blocks.{i}");
            let ln1 = tape.layer_norm(
                x,
                ctx.param(&format!("{p}.ln1.g")),
                ctx.param(&format!("{p}.ln1.b")),
            );
            let qkv = tape.linear(
                tape.reshape(ln1, &[b * s, d]),
                ctx.param(&format!("{p}.qkv.w")),
                Some(ctx.param(&format!("{p}.qkv.b"))),
            );
            let qkv = tape.reshape(qkv, &[b, s, 3 * d]);
            let q = tape.slice_axis(qkv, 2, 0, d);
            let k = tape.slice_axis(qkv, 2, d, d);
            let v = tape.slice_axis(qkv, 2, 2 * d, d);
            let att = tape.attention(q, k, v, c.heads, mask.clone());
            let att = tape.linear(
                tape.reshape(att, &[b * s, d]),
                ctx.param(&format!("{p}.proj.w")),
                Some(ctx.param(&format!("{p}.proj.b"))),
            );
            x = tape.add(x, tape.reshape(att, &[b, s, d]));
            let ln2 = tape.layer_norm(
                x,
                ctx.param(&format!("{p}.ln2.g")),
                ctx.param(&format!("{p}.ln2.b")),
            );
            let m = tape.linear(
                tape.reshape(ln2, &[b * s, d]),
                ctx.param(&format!("{p}.fc1.w")),
                Some(ctx.param(&format!("{p}.fc1.b"))),
            );
            let m = tape.gelu(m);
            let m = tape.linear(
                m,
                ctx.param(&format!("{p}.fc2.w")),
                Some(ctx.param(&format!("{p}.fc2.b"))),
            );
            x = tape.add(x, tape.reshape(m, &[b, s, d]));
        }
        let xf = tape.layer_norm(
            x,
            ctx.param("pred.ln_f.g"),
            ctx.param("pred.ln_f.b"),
        );
        let out = tape.linear(
            tape.reshape(xf, &[b * s, d]),
            ctx.param("pred.head.w"),
            Some(ctx.param("pred.head.b")),
        );
        tape.reshape(out, &[b, l, n, c.frame_dim()])
    }

    /// One-step prediction from a history window.
    ///
    /// Windows shorter than `h` run as genuine shorter sequences: the causal
    /// mask trains every prefix length anyway (slot `t` only sees frames
    /// `<= t`), so a short window is exactly the distribution the model was
    /// fit on. The window is truncated to the most recent `h` frames.
    pub fn predict_next(
        &self,
        ctx: &ParamCtx,
        frames: &[TensorRef],
        act_embs: &[TensorRef],
    ) -> Result<TensorRef> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("empty history".into()));
        }
        assert_eq!(frames.len(), act_embs.len());
        let tape = ctx.tape;
        let take = frames.len().min(self.cfg.h);
        let frames = &frames[frames.len() - take..];
        let act_embs = &act_embs[act_embs.len() - take..];
        let out = self.forward(ctx, frames, act_embs);
        let b = tape.shape(out)[0];
        let last = tape.slice_axis(out, 1, take - 1, 1);
        Ok(tape.reshape(last, &[b, self.cfg.n_patches, self.cfg.frame_dim()]))
    }

    /// Autoregressive rollout, entirely in latent space.
    ///
    /// `init_frames`: 1..=h observed latent frames; `init_act_embs`: the
    /// actions between them (`len = init_frames.len() - 1`);
    /// `future_act_embs`: T actions to apply. Returns the T predicted frames.
    pub fn rollout(
        &self,
        ctx: &ParamCtx,
        init_frames: &[TensorRef],
        init_act_embs: &[TensorRef],
        future_act_embs: &[TensorRef],
    ) -> Result<Vec<TensorRef>> {
        if init_frames.is_empty() {
            return Err(Error::InvalidArgument("empty history".into()));
        }
        if init_act_embs.len() + 1 != init_frames.len() {
            return Err(Error::InvalidArgument(
                "need exactly one action between consecutive history frames".into(),
            ));
        }
        if future_act_embs.is_empty() {
            return Err(Error::InvalidArgument("rollout horizon must be >= 1".into()));
        }
        let h = self.cfg.h;
        let mut frames: VecDeque<TensorRef> = init_frames.iter().copied().collect();
        let mut acts: VecDeque<TensorRef> = init_act_embs.iter().copied().collect();
        let mut outputs = Vec::with_capacity(future_act_embs.len());
        for a in future_act_embs {
            acts.push_back(*a);
            while frames.len() > h {
                frames.pop_front();
                acts.pop_front();
            }
            let wf: Vec<TensorRef> = frames.iter().copied().collect();
            let wa: Vec<TensorRef> = acts.iter().skip(acts.len() - wf.len()).copied().collect();
            let next = self.predict_next(ctx, &wf, &wa)?;
            outputs.push(next);
            frames.push_back(next);
        }
        Ok(outputs)
    }
}
