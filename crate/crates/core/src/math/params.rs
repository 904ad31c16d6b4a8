//! Named parameter storage shared between models, optimizers, and
//! checkpoints, plus the tape binding used during forward passes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::tape::{Grads, Tape, TensorRef};
use super::Arr;

/// Ordered map of named `f64` tensors. Values are `Arc`-shared so forward
/// passes on many tapes can reference them without copying; the optimizer is
/// the single writer.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Arc<Arr>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), Arc::new(value)).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Arc<Arr> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        Arc::make_mut(
            self.entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}")),
        )
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Arr>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters, optionally restricted to a prefix.
    pub fn count_values(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Put a parameter on a tape as a gradient-tracked leaf.
    pub fn leaf(&self, tape: &Tape, name: &str) -> TensorRef {
        tape.leaf_shared(Arc::clone(self.get(name)), true)
    }

    /// SHA-256 over names, shapes, and little-endian payloads in sorted name
    /// order. Used by the frozen-ness and reproducibility tests.
    pub fn checksum(&self) -> [u8; 32] {
        let mut names: Vec<&String> = self.entries.keys().collect();
        names.sort();
        let mut hasher = Sha256::new();
        for name in names {
            let v = &self.entries[name.as_str()];
            hasher.update(name.as_bytes());
            hasher.update((v.ndim() as u64).to_le_bytes());
            for d in v.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn checksum_hex(&self) -> String {
        let sum = self.checksum();
        let mut s = String::with_capacity(64);
        for b in sum {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// Binds a [`ParamStore`] to one tape for a forward pass.
///
/// Each parameter becomes exactly one leaf per tape (cached), so gradients
/// accumulate correctly even when a model reuses a weight many times, as the
/// rollout does. A frozen context creates non-gradient leaves for cheap
/// inference.
pub struct ParamCtx<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    trainable: bool,
    cache: RefCell<HashMap<String, TensorRef>>,
}

impl<'a> ParamCtx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        ParamCtx { tape, store, trainable: true, cache: RefCell::new(HashMap::new()) }
    }

    pub fn frozen(tape: &'a Tape, store: &'a ParamStore) -> Self {
        ParamCtx { tape, store, trainable: false, cache: RefCell::new(HashMap::new()) }
    }

    pub fn param(&self, name: &str) -> TensorRef {
        if let Some(t) = self.cache.borrow().get(name) {
            return *t;
        }
        let t = self
            .tape
            .leaf_shared(Arc::clone(self.store.get(name)), self.trainable);
        self.cache.borrow_mut().insert(name.to_string(), t);
        t
    }

    /// Collect gradients keyed by parameter name after a backward pass.
    /// Parameters that never entered the graph are absent.
    pub fn grads_by_name(&self, grads: &mut Grads) -> HashMap<String, Arr> {
        let mut out = HashMap::new();
        for (name, t) in self.cache.borrow().iter() {
            if let Some(g) = grads.take(*t) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_changes_with_values() {
        let mut p = ParamStore::new();
        p.insert("a", Arr::zeros(vec![2, 2]));
        let c0 = p.checksum();
        p.get_mut("a")[[0, 0]] = 1.0;
        assert_ne!(c0, p.checksum());
    }

    #[test]
    fn ctx_caches_one_leaf_per_param() {
        let mut p = ParamStore::new();
        p.insert("w", Arr::ones(vec![2, 2]));
        let tape = Tape::new();
        let ctx = ParamCtx::new(&tape, &p);
        let a = ctx.param("w");
        let b = ctx.param("w");
        assert_eq!(a, b);
    }

    #[test]
    fn grads_accumulate_across_reuses() {
        // y = mean_sq(x @ w) + mean_sq(x2 @ w): w used twice via one leaf
        let mut p = ParamStore::new();
        p.insert("w", Arr::ones(vec![2, 2]));
        let tape = Tape::new();
        let ctx = ParamCtx::new(&tape, &p);
        let x1 = tape.leaf(Arr::ones(vec![1, 2]), false);
        let x2 = tape.leaf(Arr::ones(vec![1, 2]) * 2.0, false);
        let w = ctx.param("w");
        let y1 = tape.mean_sq(tape.linear(x1, w, None));
        let y2 = tape.mean_sq(tape.linear(x2, w, None));
        let loss = tape.add(y1, y2);
        let mut grads = tape.backward(loss);
        let g = ctx.grads_by_name(&mut grads);
        // term with x=c: y=[2c,2c], dY = 2*(2c)/2 = 2c, dW entry = c*2c
        // c=1 -> 2 ; c=2 -> 8 ; total 10
        assert_eq!(g["w"][[0, 0]], 10.0);
    }
}
