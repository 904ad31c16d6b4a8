//! AdamW with decoupled weight decay, per-parameter-group learning rates,
//! and global-norm gradient clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Arr;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Learning rate per name prefix; longest matching prefix wins.
    pub group_lr: Vec<(String, f64)>,
    #[serde(skip)]
    m: HashMap<String, Arr>,
    #[serde(skip)]
    v: HashMap<String, Arr>,
}

impl AdamW {
    pub fn new(weight_decay: f64, group_lr: Vec<(String, f64)>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            group_lr,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    fn lr_for(&self, name: &str) -> f64 {
        let mut best: Option<(usize, f64)> = None;
        for (prefix, lr) in &self.group_lr {
            if name.starts_with(prefix.as_str())
                && best.map(|(l, _)| prefix.len() > l).unwrap_or(true)
            {
                best = Some((prefix.len(), *lr));
            }
        }
        best.map(|(_, lr)| lr)
            .unwrap_or_else(|| panic!("no learning-rate group matches parameter {name}"))
    }

    /// Apply one update. Gradients are clipped jointly to `clip` global norm
    /// when given. Names absent from `grads` are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &HashMap<String, Arr>, clip: Option<f64>) {
        let mut factor = 1.0;
        if let Some(clip) = clip {
            let mut sq = 0.0;
            let mut names: Vec<&String> = grads.keys().collect();
            names.sort();
            for name in &names {
                sq += grads[*name].iter().map(|g| g * g).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > clip {
                factor = clip / norm;
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut names: Vec<String> = grads.keys().cloned().collect();
        names.sort();
        for name in names {
            let g = &grads[&name];
            let lr = self.lr_for(&name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.shape()));
            let p = store.get_mut(&name);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, g| {
                    let g = g * factor;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }

    /// Moment tensors for checkpointing, with stable name prefixes.
    pub fn export_state(&self) -> Vec<(String, Arr)> {
        let mut out = Vec::new();
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            out.push((format!("opt.m.{name}"), self.m[name.as_str()].clone()));
            out.push((format!("opt.v.{name}"), self.v[name.as_str()].clone()));
        }
        out
    }

    pub fn import_state(&mut self, tensors: Vec<(String, Arr)>) {
        for (name, arr) in tensors {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                self.m.insert(rest.to_string(), arr);
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                self.v.insert(rest.to_string(), arr);
            }
        }
    }
}
