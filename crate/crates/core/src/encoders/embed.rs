//! Trainable embedders: an MLP lifting raw (frameskip-concatenated) actions
//! to the K-dimensional conditioning vector, and a linear map for
//! proprioception. Both are differentiable w.r.t. parameters and inputs; the
//! gradient-descent planner relies on the latter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::tape::TensorRef;
use crate::math::{init, ParamCtx, ParamStore};

/// Default action embedding width.
pub const ACTION_EMB_DIM: usize = 10;
/// Default proprio embedding width (when proprio is present).
pub const PROPRIO_EMB_DIM: usize = 10;

const HIDDEN: usize = 32;

/// Two-layer MLP `A*f -> 32 -> K`.
pub struct ActionEmbed {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ActionEmbed {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        ActionEmbed { in_dim, out_dim }
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xac7e);
        store.insert("action_enc.w1", init::he(&mut rng, self.in_dim, HIDDEN));
        store.insert("action_enc.b1", init::zeros(&[HIDDEN]));
        store.insert("action_enc.w2", init::he(&mut rng, HIDDEN, self.out_dim));
        store.insert("action_enc.b2", init::zeros(&[self.out_dim]));
    }

    /// `x: [B, in_dim]` -> `[B, out_dim]`.
    pub fn forward(&self, ctx: &ParamCtx, x: TensorRef) -> TensorRef {
        let tape = ctx.tape;
        let w1 = ctx.param("action_enc.w1");
        let b1 = ctx.param("action_enc.b1");
        let w2 = ctx.param("action_enc.w2");
        let b2 = ctx.param("action_enc.b2");
        let h = tape.gelu(tape.linear(x, w1, Some(b1)));
        tape.linear(h, w2, Some(b2))
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        vec!["action_enc.w1", "action_enc.b1", "action_enc.w2", "action_enc.b2"]
    }
}

/// Linear map `P -> P'`; absent entirely when `P = 0`.
pub struct ProprioEmbed {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProprioEmbed {
    /// Returns `None` when there is no proprioception (`p = 0`).
    pub fn new(p: usize) -> Option<Self> {
        if p == 0 {
            None
        } else {
            Some(ProprioEmbed { in_dim: p, out_dim: PROPRIO_EMB_DIM })
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9097);
        store.insert("proprio_enc.w", init::he(&mut rng, self.in_dim, self.out_dim));
        store.insert("proprio_enc.b", init::zeros(&[self.out_dim]));
    }

    /// `x: [B, P]` -> `[B, P']`.
    pub fn forward(&self, ctx: &ParamCtx, x: TensorRef) -> TensorRef {
        let w = ctx.param("proprio_enc.w");
        let b = ctx.param("proprio_enc.b");
        ctx.tape.linear(x, w, Some(b))
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        vec!["proprio_enc.w", "proprio_enc.b"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Arr, Tape};
    use ndarray::IxDyn;
    use rand::Rng;

    fn randn(seed: u64, shape: &[usize]) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init::normal(&mut rng, shape, 1.0)
    }

    #[test]
    fn zero_params_give_zero_vector() {
        let emb = ActionEmbed::new(4, ACTION_EMB_DIM);
        let mut store = ParamStore::new();
        store.insert("action_enc.w1", init::zeros(&[4, 32]));
        store.insert("action_enc.b1", init::zeros(&[32]));
        store.insert("action_enc.w2", init::zeros(&[32, ACTION_EMB_DIM]));
        store.insert("action_enc.b2", init::zeros(&[ACTION_EMB_DIM]));
        let tape = Tape::new();
        let x = tape.leaf(randn(0, &[3, 4]), false);
        let ctx = ParamCtx::new(&tape, &store);
        let y = emb.forward(&ctx, x);
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_dim_is_k_for_any_input_dim() {
        for a_eff in [2usize, 4, 10, 16] {
            let emb = ActionEmbed::new(a_eff, ACTION_EMB_DIM);
            let mut store = ParamStore::new();
            emb.init_params(&mut store, 0);
            let tape = Tape::new();
            let x = tape.leaf(randn(1, &[5, a_eff]), false);
            let ctx = ParamCtx::new(&tape, &store);
        let y = emb.forward(&ctx, x);
            assert_eq!(tape.shape(y), vec![5, ACTION_EMB_DIM]);
        }
    }

    #[test]
    fn proprio_absent_when_p_zero() {
        assert!(ProprioEmbed::new(0).is_none());
        assert!(ProprioEmbed::new(2).is_some());
    }

    /// Jacobian w.r.t. the input matches central finite differences at a
    /// 1e-4 step within 1e-4 relative error.
    #[test]
    fn input_jacobian_matches_finite_differences() {
        let emb = ActionEmbed::new(3, 5);
        let mut store = ParamStore::new();
        emb.init_params(&mut store, 7);
        let x0 = randn(2, &[1, 3]);
        let h = 1e-4;
        // probe one output coordinate at a time via a selector vector
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let sel: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eval = |x: &Arr| -> f64 {
                let tape = Tape::new();
                let ctx = ParamCtx::frozen(&tape, &store);
                let xr = tape.leaf(x.clone(), false);
                let y = emb.forward(&ctx, xr);
                let v = tape.value(y);
                v.iter().zip(&sel).map(|(a, b)| a * b).sum()
            };
            let tape = Tape::new();
            let ctx = ParamCtx::new(&tape, &store);
            let xr = tape.leaf(x0.clone(), true);
            let y = emb.forward(&ctx, xr);
            let selref = tape.leaf(
                Arr::from_shape_vec(IxDyn(&[1, 5]), sel.clone()).unwrap(),
                false,
            );
            let prod = tape.mul(y, selref);
            let loss = tape.scale(tape.mean(prod), 5.0); // sum = mean * len
            let grads = tape.backward(loss);
            let g = grads.get(xr).unwrap().clone();
            for j in 0..3 {
                let mut xp = x0.clone();
                xp[[0, j]] += h;
                let mut xm = x0.clone();
                xm[[0, j]] -= h;
                let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
                let an = g[[0, j]];
                let denom = fd.abs().max(an.abs()).max(1e-10);
                assert!(
                    ((fd - an).abs() / denom) < 1e-4,
                    "jacobian mismatch at {j}: fd={fd} an={an}"
                );
            }
        }
    }

    #[test]
    fn proprio_gradient_check() {
        let emb = ProprioEmbed::new(2).unwrap();
        let mut store = ParamStore::new();
        emb.init_params(&mut store, 1);
        let x0 = randn(5, &[2, 2]);
        let eval = |x: &Arr| -> f64 {
            let tape = Tape::new();
            let ctx = ParamCtx::frozen(&tape, &store);
            let xr = tape.leaf(x.clone(), false);
            let y = emb.forward(&ctx, xr);
            tape.scalar(tape.mean_sq(y))
        };
        let tape = Tape::new();
        let ctx = ParamCtx::new(&tape, &store);
        let xr = tape.leaf(x0.clone(), true);
        let y = emb.forward(&ctx, xr);
        let loss = tape.mean_sq(y);
        let g = tape.backward(loss).get(xr).unwrap().clone();
        let h = 1e-4;
        for i in 0..2 {
            for j in 0..2 {
                let mut xp = x0.clone();
                xp[[i, j]] += h;
                let mut xm = x0.clone();
                xm[[i, j]] -= h;
                let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
                let an = g[[i, j]];
                let denom = fd.abs().max(an.abs()).max(1e-10);
                assert!((fd - an).abs() / denom < 1e-4);
            }
        }
    }
}
