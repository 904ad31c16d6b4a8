//! Reverse-mode autodiff on dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records an eager computation graph. Each op computes its value
//! at construction time; [`Tape::backward`] then walks the node list in
//! reverse and accumulates gradients for every node with `requires_grad`.
//!
//! The op set is exactly what the models in this crate need: affine maps,
//! layer norm, GELU, masked multi-head attention, transposed convolution,
//! concat/slice/reshape plumbing, and mean-square reductions. Gradients of
//! masked attention entries are exactly zero (the mask zeroes the softmax
//! weight and the backward never re-introduces a contribution), which the
//! frame-causality tests rely on.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::prelude::*;
use ndarray::{linalg::general_mat_mul, IxDyn};

use super::Arr;

/// Handle to a tensor stored on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorRef(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

enum Op {
    Leaf,
    Add(TensorRef, TensorRef),
    /// rhs is broadcast (right-aligned, numpy rules) up to lhs's shape.
    AddBroadcast(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Scale(TensorRef, f64),
    /// x: [rows, in], w: [in, out], optional bias [out].
    Linear {
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
    },
    /// Normalization over the last axis with per-feature gain/bias.
    LayerNorm {
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        mean: Arc<Arr>,
        inv_std: Arc<Arr>,
    },
    Gelu(TensorRef),
    LeakyRelu(TensorRef, f64),
    /// q,k,v: [B, S, D]. Masked-out probabilities are exactly zero in
    /// `probs`, so the backward pass needs no mask.
    Attention {
        q: TensorRef,
        k: TensorRef,
        v: TensorRef,
        heads: usize,
        probs: Arc<Array4<f64>>,
    },
    Concat {
        parts: Vec<TensorRef>,
        axis: usize,
    },
    SliceAxis {
        x: TensorRef,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(TensorRef),
    Permute {
        x: TensorRef,
        perm: Vec<usize>,
    },
    /// Broadcast a size-1 axis.
    BroadcastAxis {
        x: TensorRef,
        axis: usize,
    },
    /// Scalar mean of squared entries.
    MeanSq(TensorRef),
    Mean(TensorRef),
    /// x: [B, C, h, w], w: [C, O, kh, kw]; output [B, O, (h-1)s+kh, (w-1)s+kw].
    ConvT2d {
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
        stride: usize,
    },
    Clamp01(TensorRef),
}

struct Node {
    op: Op,
    value: Arc<Arr>,
    requires_grad: bool,
}

/// Eager computation graph. One tape per forward/backward pass; not `Sync`.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by tape node index, produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, t: TensorRef) -> Option<&Arr> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: TensorRef) -> Option<Arr> {
        self.grads.get_mut(t.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, op: Op, value: Arr, requires_grad: bool) -> TensorRef {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value: Arc::new(value), requires_grad });
        TensorRef(nodes.len() - 1)
    }

    fn requires(&self, t: TensorRef) -> bool {
        self.nodes.borrow()[t.0].requires_grad
    }

    pub fn value(&self, t: TensorRef) -> Arc<Arr> {
        Arc::clone(&self.nodes.borrow()[t.0].value)
    }

    pub fn shape(&self, t: TensorRef) -> Vec<usize> {
        self.nodes.borrow()[t.0].value.shape().to_vec()
    }

    pub fn scalar(&self, t: TensorRef) -> f64 {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        v.iter().next().copied().unwrap()
    }

    /// Insert a leaf. `requires_grad` marks it as a gradient target.
    pub fn leaf(&self, value: Arr, requires_grad: bool) -> TensorRef {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Arr>, requires_grad: bool) -> TensorRef {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value, requires_grad });
        TensorRef(nodes.len() - 1)
    }

    pub fn add(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn add_broadcast(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.value(a), self.value(b));
        let out = &*va + &*vb; // ndarray broadcasts rhs
        assert_eq!(out.shape(), va.shape(), "add_broadcast must not grow lhs");
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::AddBroadcast(a, b), out, rg)
    }

    pub fn sub(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Sub(a, b), out, rg)
    }

    pub fn mul(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn scale(&self, a: TensorRef, c: f64) -> TensorRef {
        let out = self.value(a).as_ref() * c;
        let rg = self.requires(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    /// `x @ w + b` with `x: [rows, in]`, `w: [in, out]`.
    pub fn linear(&self, x: TensorRef, w: TensorRef, b: Option<TensorRef>) -> TensorRef {
        let vx = self.value(x);
        let vw = self.value(w);
        let x2 = as2(&vx);
        let w2 = as2(&vw);
        assert_eq!(x2.ncols(), w2.nrows(), "linear inner dim mismatch");
        let mut out = Array2::<f64>::zeros((x2.nrows(), w2.ncols()));
        general_mat_mul(1.0, &x2, &w2, 0.0, &mut out);
        if let Some(b) = b {
            let vb = self.value(b);
            let b1 = vb.view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
            out += &b1.insert_axis(Axis(0));
        }
        let rg = self.requires(x) || self.requires(w) || b.map(|b| self.requires(b)).unwrap_or(false);
        self.push(Op::Linear { x, w, b }, out.into_dyn(), rg)
    }

    pub fn layer_norm(&self, x: TensorRef, gamma: TensorRef, beta: TensorRef) -> TensorRef {
        const EPS: f64 = 1e-6;
        let vx = self.value(x);
        let d = *vx.shape().last().expect("layer_norm on 0-d");
        let rows = vx.len() / d;
        let xm = vx
            .view()
            .into_shape_with_order((rows, d))
            .expect("layer_norm reshape");
        let mut mean = Array1::<f64>::zeros(rows);
        let mut inv_std = Array1::<f64>::zeros(rows);
        let mut out = Array2::<f64>::zeros((rows, d));
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let g = vg.view().into_dimensionality::<Ix1>().unwrap();
        let b = vb.view().into_dimensionality::<Ix1>().unwrap();
        for r in 0..rows {
            let row = xm.row(r);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            let mut orow = out.row_mut(r);
            for j in 0..d {
                orow[j] = (row[j] - mu) * is * g[j] + b[j];
            }
        }
        let out = out.into_shape_with_order(IxDyn(vx.shape())).unwrap();
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: Arc::new(mean.into_dyn()),
                inv_std: Arc::new(inv_std.into_dyn()),
            },
            out,
            rg,
        )
    }

    pub fn gelu(&self, x: TensorRef) -> TensorRef {
        let vx = self.value(x);
        let out = vx.mapv(|v| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let rg = self.requires(x);
        self.push(Op::Gelu(x), out, rg)
    }

    pub fn leaky_relu(&self, x: TensorRef, slope: f64) -> TensorRef {
        let vx = self.value(x);
        let out = vx.mapv(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.requires(x);
        self.push(Op::LeakyRelu(x, slope), out, rg)
    }

    /// Masked multi-head scaled-dot-product attention over `[B, S, D]`.
    pub fn attention(
        &self,
        q: TensorRef,
        k: TensorRef,
        v: TensorRef,
        heads: usize,
        mask: Option<Arc<Array2<bool>>>,
    ) -> TensorRef {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let shape = vq.shape().to_vec();
        assert_eq!(shape.len(), 3, "attention expects [B, S, D]");
        assert_eq!(vk.shape(), &shape[..], "k shape");
        assert_eq!(vv.shape(), &shape[..], "v shape");
        let (bsz, s, d) = (shape[0], shape[1], shape[2]);
        assert!(d % heads == 0, "D must divide heads");
        let dh = d / heads;
        let scale = (dh as f64).powf(-0.5);
        if let Some(m) = &mask {
            assert_eq!(m.shape(), &[s, s], "mask shape");
        }

        let q3 = vq.view().into_dimensionality::<Ix3>().unwrap();
        let k3 = vk.view().into_dimensionality::<Ix3>().unwrap();
        let v3 = vv.view().into_dimensionality::<Ix3>().unwrap();
        let mut probs = Array4::<f64>::zeros((bsz, heads, s, s));
        let mut out = Array3::<f64>::zeros((bsz, s, d));
        let mut scores = Array2::<f64>::zeros((s, s));
        for bi in 0..bsz {
            for h in 0..heads {
                let qh = q3.slice(s![bi, .., h * dh..(h + 1) * dh]);
                let kh = k3.slice(s![bi, .., h * dh..(h + 1) * dh]);
                let vh = v3.slice(s![bi, .., h * dh..(h + 1) * dh]);
                general_mat_mul(scale, &qh, &kh.t(), 0.0, &mut scores);
                // softmax rows with mask
                let mut p = probs.slice_mut(s![bi, h, .., ..]);
                for qi in 0..s {
                    let mut mx = f64::NEG_INFINITY;
                    for ki in 0..s {
                        let ok = mask.as_ref().map(|m| m[[qi, ki]]).unwrap_or(true);
                        if ok && scores[[qi, ki]] > mx {
                            mx = scores[[qi, ki]];
                        }
                    }
                    let mut sum = 0.0;
                    for ki in 0..s {
                        let ok = mask.as_ref().map(|m| m[[qi, ki]]).unwrap_or(true);
                        let e = if ok { (scores[[qi, ki]] - mx).exp() } else { 0.0 };
                        p[[qi, ki]] = e;
                        sum += e;
                    }
                    let inv = 1.0 / sum;
                    for ki in 0..s {
                        p[[qi, ki]] *= inv;
                    }
                }
                let mut oh = out.slice_mut(s![bi, .., h * dh..(h + 1) * dh]);
                general_mat_mul(1.0, &p.view(), &vh, 0.0, &mut oh);
            }
        }
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(
            Op::Attention { q, k, v, heads, probs: Arc::new(probs) },
            out.into_dyn(),
            rg,
        )
    }

    pub fn concat(&self, parts: &[TensorRef], axis: usize) -> TensorRef {
        assert!(!parts.is_empty());
        let values: Vec<Arc<Arr>> = parts.iter().map(|p| self.value(*p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let rg = parts.iter().any(|p| self.requires(*p));
        self.push(Op::Concat { parts: parts.to_vec(), axis }, out, rg)
    }

    pub fn slice_axis(&self, x: TensorRef, axis: usize, start: usize, len: usize) -> TensorRef {
        let vx = self.value(x);
        let out = vx
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let rg = self.requires(x);
        self.push(Op::SliceAxis { x, axis, start, len }, out, rg)
    }

    pub fn reshape(&self, x: TensorRef, shape: &[usize]) -> TensorRef {
        let vx = self.value(x);
        assert_eq!(vx.len(), shape.iter().product::<usize>(), "reshape size");
        let out = vx
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let rg = self.requires(x);
        self.push(Op::Reshape(x), out, rg)
    }

    pub fn permute(&self, x: TensorRef, perm: &[usize]) -> TensorRef {
        let vx = self.value(x);
        let out = vx
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let rg = self.requires(x);
        self.push(Op::Permute { x, perm: perm.to_vec() }, out, rg)
    }

    pub fn broadcast_axis(&self, x: TensorRef, axis: usize, times: usize) -> TensorRef {
        let vx = self.value(x);
        assert_eq!(vx.shape()[axis], 1, "broadcast_axis needs size-1 axis");
        let mut shape = vx.shape().to_vec();
        shape[axis] = times;
        let out = vx.broadcast(IxDyn(&shape)).unwrap().to_owned();
        let rg = self.requires(x);
        self.push(Op::BroadcastAxis { x, axis }, out, rg)
    }

    pub fn mean_sq(&self, x: TensorRef) -> TensorRef {
        let vx = self.value(x);
        let m = vx.iter().map(|v| v * v).sum::<f64>() / vx.len() as f64;
        let rg = self.requires(x);
        self.push(Op::MeanSq(x), ndarray::arr0(m).into_dyn(), rg)
    }

    pub fn mean(&self, x: TensorRef) -> TensorRef {
        let vx = self.value(x);
        let m = vx.iter().sum::<f64>() / vx.len() as f64;
        let rg = self.requires(x);
        self.push(Op::Mean(x), ndarray::arr0(m).into_dyn(), rg)
    }

    pub fn conv_t2d(
        &self,
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
        stride: usize,
    ) -> TensorRef {
        let vx = self.value(x);
        let vw = self.value(w);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv_t2d x 4-d");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("conv_t2d w 4-d");
        let (bsz, cin, h, wd) = x4.dim();
        let (wc, cout, kh, kw) = w4.dim();
        assert_eq!(cin, wc, "conv_t2d channel mismatch");
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        let mut out = Array4::<f64>::zeros((bsz, cout, oh, ow));
        for bi in 0..bsz {
            for c in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        let xv = x4[[bi, c, i, j]];
                        if xv == 0.0 {
                            continue;
                        }
                        for o in 0..cout {
                            for di in 0..kh {
                                for dj in 0..kw {
                                    out[[bi, o, i * stride + di, j * stride + dj]] +=
                                        xv * w4[[c, o, di, dj]];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let vb = self.value(b);
            let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
            for o in 0..cout {
                out.slice_mut(s![.., o, .., ..]).mapv_inplace(|v| v + b1[o]);
            }
        }
        let rg = self.requires(x) || self.requires(w) || b.map(|b| self.requires(b)).unwrap_or(false);
        self.push(Op::ConvT2d { x, w, b, stride }, out.into_dyn(), rg)
    }

    pub fn clamp01(&self, x: TensorRef) -> TensorRef {
        let vx = self.value(x);
        let out = vx.mapv(|v| v.clamp(0.0, 1.0));
        let rg = self.requires(x);
        self.push(Op::Clamp01(x), out, rg)
    }

    /// Backpropagate from a scalar loss node; returns per-node gradients.
    pub fn backward(&self, loss: TensorRef) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Arr::ones(nodes[loss.0].value.shape()));

        for idx in (0..=loss.0).rev() {
            if !nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy); // keep for caller
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, gy.clone(), &nodes);
                    accum(&mut grads, *b, gy, &nodes);
                }
                Op::AddBroadcast(a, b) => {
                    let bshape = nodes[b.0].value.shape().to_vec();
                    let gb = reduce_to_shape(&gy, &bshape);
                    accum(&mut grads, *a, gy, &nodes);
                    accum(&mut grads, *b, gb, &nodes);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, gy.clone(), &nodes);
                    accum(&mut grads, *b, -gy, &nodes);
                }
                Op::Mul(a, b) => {
                    let va = Arc::clone(&nodes[a.0].value);
                    let vb = Arc::clone(&nodes[b.0].value);
                    accum(&mut grads, *a, &gy * &*vb, &nodes);
                    accum(&mut grads, *b, &gy * &*va, &nodes);
                }
                Op::Scale(a, c) => {
                    accum(&mut grads, *a, &gy * *c, &nodes);
                }
                Op::Linear { x, w, b } => {
                    let vx = Arc::clone(&nodes[x.0].value);
                    let vw = Arc::clone(&nodes[w.0].value);
                    let x2 = as2(&vx);
                    let w2 = as2(&vw);
                    let g2 = as2(&gy);
                    if nodes[x.0].requires_grad {
                        let mut gx = Array2::<f64>::zeros(x2.raw_dim());
                        general_mat_mul(1.0, &g2, &w2.t(), 0.0, &mut gx);
                        accum(&mut grads, *x, gx.into_dyn(), &nodes);
                    }
                    if nodes[w.0].requires_grad {
                        let mut gw = Array2::<f64>::zeros(w2.raw_dim());
                        general_mat_mul(1.0, &x2.t(), &g2, 0.0, &mut gw);
                        accum(&mut grads, *w, gw.into_dyn(), &nodes);
                    }
                    if let Some(b) = b {
                        if nodes[b.0].requires_grad {
                            let gb = g2.sum_axis(Axis(0));
                            accum(&mut grads, *b, gb.into_dyn(), &nodes);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                    let vx = Arc::clone(&nodes[x.0].value);
                    let vg = Arc::clone(&nodes[gamma.0].value);
                    let d = *vx.shape().last().unwrap();
                    let rows = vx.len() / d;
                    let xm = vx.view().into_shape_with_order((rows, d)).unwrap();
                    let gym = gy.view().into_shape_with_order((rows, d)).unwrap();
                    let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
                    let mean1 = mean.view().into_dimensionality::<Ix1>().unwrap();
                    let is1 = inv_std.view().into_dimensionality::<Ix1>().unwrap();
                    let mut gx = Array2::<f64>::zeros((rows, d));
                    let mut gg = Array1::<f64>::zeros(d);
                    let mut gb = Array1::<f64>::zeros(d);
                    for r in 0..rows {
                        let xr = xm.row(r);
                        let gr = gym.row(r);
                        let (mu, is) = (mean1[r], is1[r]);
                        let mut s1 = 0.0; // sum(dyhat)
                        let mut s2 = 0.0; // sum(dyhat * xhat)
                        for j in 0..d {
                            let xh = (xr[j] - mu) * is;
                            let dyh = gr[j] * g1[j];
                            s1 += dyh;
                            s2 += dyh * xh;
                            gg[j] += gr[j] * xh;
                            gb[j] += gr[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        let mut gxr = gx.row_mut(r);
                        for j in 0..d {
                            let xh = (xr[j] - mu) * is;
                            let dyh = gr[j] * g1[j];
                            gxr[j] = is * (dyh - inv_d * s1 - xh * inv_d * s2);
                        }
                    }
                    let gx = gx.into_shape_with_order(IxDyn(vx.shape())).unwrap();
                    accum(&mut grads, *x, gx, &nodes);
                    accum(&mut grads, *gamma, gg.into_dyn(), &nodes);
                    accum(&mut grads, *beta, gb.into_dyn(), &nodes);
                }
                Op::LeakyRelu(x, slope) => {
                    let vx = Arc::clone(&nodes[x.0].value);
                    let slope = *slope;
                    let mut gx = gy;
                    ndarray::Zip::from(&mut gx).and(&*vx).for_each(|g, &v| {
                        if v < 0.0 {
                            *g *= slope;
                        }
                    });
                    accum(&mut grads, *x, gx, &nodes);
                }
                Op::Gelu(x) => {
                    let vx = Arc::clone(&nodes[x.0].value);
                    let mut gx = gy;
                    ndarray::Zip::from(&mut gx).and(&*vx).for_each(|g, &v| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *g *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    });
                    accum(&mut grads, *x, gx, &nodes);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (vq, vk, vv) = (
                        Arc::clone(&nodes[q.0].value),
                        Arc::clone(&nodes[k.0].value),
                        Arc::clone(&nodes[v.0].value),
                    );
                    let q3 = vq.view().into_dimensionality::<Ix3>().unwrap();
                    let k3 = vk.view().into_dimensionality::<Ix3>().unwrap();
                    let v3 = vv.view().into_dimensionality::<Ix3>().unwrap();
                    let gy3 = gy.view().into_dimensionality::<Ix3>().unwrap();
                    let (bsz, s, d) = q3.dim();
                    let heads = *heads;
                    let dh = d / heads;
                    let scale = (dh as f64).powf(-0.5);
                    let mut gq = Array3::<f64>::zeros((bsz, s, d));
                    let mut gk = Array3::<f64>::zeros((bsz, s, d));
                    let mut gv = Array3::<f64>::zeros((bsz, s, d));
                    let mut dprobs = Array2::<f64>::zeros((s, s));
                    let mut dscores = Array2::<f64>::zeros((s, s));
                    for bi in 0..bsz {
                        for h in 0..heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = probs.slice(s![bi, h, .., ..]);
                            let qh = q3.slice(s![bi, .., cols.clone()]);
                            let kh = k3.slice(s![bi, .., cols.clone()]);
                            let vh = v3.slice(s![bi, .., cols.clone()]);
                            let goh = gy3.slice(s![bi, .., cols.clone()]);
                            // dV = P^T dO
                            let mut gvh = gv.slice_mut(s![bi, .., cols.clone()]);
                            general_mat_mul(1.0, &p.t(), &goh, 0.0, &mut gvh);
                            // dP = dO V^T
                            general_mat_mul(1.0, &goh, &vh.t(), 0.0, &mut dprobs);
                            // dS = P ⊙ (dP - rowsum(dP ⊙ P))
                            for qi in 0..s {
                                let mut dot = 0.0;
                                for ki in 0..s {
                                    dot += dprobs[[qi, ki]] * p[[qi, ki]];
                                }
                                for ki in 0..s {
                                    dscores[[qi, ki]] = p[[qi, ki]] * (dprobs[[qi, ki]] - dot);
                                }
                            }
                            let mut gqh = gq.slice_mut(s![bi, .., cols.clone()]);
                            general_mat_mul(scale, &dscores.view(), &kh, 0.0, &mut gqh);
                            let mut gkh = gk.slice_mut(s![bi, .., cols]);
                            general_mat_mul(scale, &dscores.t(), &qh, 0.0, &mut gkh);
                        }
                    }
                    accum(&mut grads, *q, gq.into_dyn(), &nodes);
                    accum(&mut grads, *k, gk.into_dyn(), &nodes);
                    accum(&mut grads, *v, gv.into_dyn(), &nodes);
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for p in parts {
                        let len = nodes[p.0].value.shape()[*axis];
                        let gp = gy
                            .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        accum(&mut grads, *p, gp, &nodes);
                        start += len;
                    }
                }
                Op::SliceAxis { x, axis, start, len } => {
                    let mut gx = Arr::zeros(nodes[x.0].value.shape());
                    gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + *len))
                        .assign(&gy);
                    accum(&mut grads, *x, gx, &nodes);
                }
                Op::Reshape(x) => {
                    let gx = gy
                        .into_shape_with_order(IxDyn(nodes[x.0].value.shape()))
                        .unwrap();
                    accum(&mut grads, *x, gx, &nodes);
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, p) in perm.iter().enumerate() {
                        inv[*p] = i;
                    }
                    let gx = gy
                        .view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned();
                    accum(&mut grads, *x, gx, &nodes);
                }
                Op::BroadcastAxis { x, axis } => {
                    let gx = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    accum(&mut grads, *x, gx, &nodes);
                }
                Op::MeanSq(x) => {
                    let vx = Arc::clone(&nodes[x.0].value);
                    let g = gy.iter().next().copied().unwrap();
                    let c = 2.0 * g / vx.len() as f64;
                    accum(&mut grads, *x, vx.as_ref() * c, &nodes);
                }
                Op::Mean(x) => {
                    let vx_shape = nodes[x.0].value.shape().to_vec();
                    let n: usize = vx_shape.iter().product();
                    let g = gy.iter().next().copied().unwrap();
                    accum(&mut grads, *x, Arr::from_elem(IxDyn(&vx_shape), g / n as f64), &nodes);
                }
                Op::ConvT2d { x, w, b, stride } => {
                    let vx = Arc::clone(&nodes[x.0].value);
                    let vw = Arc::clone(&nodes[w.0].value);
                    let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
                    let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let (bsz, cin, h, wd) = x4.dim();
                    let (_, cout, kh, kw) = w4.dim();
                    let st = *stride;
                    if nodes[x.0].requires_grad {
                        let mut gx = Array4::<f64>::zeros((bsz, cin, h, wd));
                        for bi in 0..bsz {
                            for c in 0..cin {
                                for i in 0..h {
                                    for j in 0..wd {
                                        let mut acc = 0.0;
                                        for o in 0..cout {
                                            for di in 0..kh {
                                                for dj in 0..kw {
                                                    acc += w4[[c, o, di, dj]]
                                                        * gy4[[bi, o, i * st + di, j * st + dj]];
                                                }
                                            }
                                        }
                                        gx[[bi, c, i, j]] = acc;
                                    }
                                }
                            }
                        }
                        accum(&mut grads, *x, gx.into_dyn(), &nodes);
                    }
                    if nodes[w.0].requires_grad {
                        let mut gw = Array4::<f64>::zeros(w4.raw_dim());
                        for bi in 0..bsz {
                            for c in 0..cin {
                                for i in 0..h {
                                    for j in 0..wd {
                                        let xv = x4[[bi, c, i, j]];
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        for o in 0..cout {
                                            for di in 0..kh {
                                                for dj in 0..kw {
                                                    gw[[c, o, di, dj]] +=
                                                        xv * gy4[[bi, o, i * st + di, j * st + dj]];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        accum(&mut grads, *w, gw.into_dyn(), &nodes);
                    }
                    if let Some(b) = b {
                        if nodes[b.0].requires_grad {
                            let mut gb = Array1::<f64>::zeros(cout);
                            for o in 0..cout {
                                gb[o] = gy4.slice(s![.., o, .., ..]).sum();
                            }
                            accum(&mut grads, *b, gb.into_dyn(), &nodes);
                        }
                    }
                }
                Op::Clamp01(x) => {
                    let vx = Arc::clone(&nodes[x.0].value);
                    let mut gx = gy;
                    ndarray::Zip::from(&mut gx).and(&*vx).for_each(|g, &v| {
                        if !(0.0..=1.0).contains(&v) || v == 0.0 || v == 1.0 {
                            *g = 0.0;
                        }
                    });
                    accum(&mut grads, *x, gx, &nodes);
                }
            }
        }
        Grads { grads }
    }
}

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

fn accum(grads: &mut [Option<Arr>], t: TensorRef, g: Arr, nodes: &[Node]) {
    if !nodes[t.0].requires_grad {
        return;
    }
    match &mut grads[t.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

/// Sum `g` down to `shape` following right-aligned broadcasting rules.
fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&od, &sd)) in out.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && od != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of `backward` against `f`.
    ///
    /// `f` rebuilds the graph from scratch for the given inputs and returns
    /// the scalar loss; inputs are perturbed one entry at a time.
    fn fd_check(inputs: &mut [Arr], f: &dyn Fn(&Tape, &[TensorRef]) -> TensorRef, tol: f64) {
        let tape = Tape::new();
        let refs: Vec<TensorRef> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
        let loss = f(&tape, &refs);
        let grads = tape.backward(loss);
        let h = 1e-5;
        let eval = |inputs: &[Arr]| -> f64 {
            let tp = Tape::new();
            let rs: Vec<TensorRef> = inputs.iter().map(|a| tp.leaf(a.clone(), false)).collect();
            tp.scalar(f(&tp, &rs))
        };
        for ii in 0..inputs.len() {
            let g = grads.get(refs[ii]).expect("missing grad").clone();
            for flat in 0..inputs[ii].len() {
                let orig = inputs[ii].as_slice().unwrap()[flat];
                inputs[ii].as_slice_mut().unwrap()[flat] = orig + h;
                let lp = eval(inputs);
                inputs[ii].as_slice_mut().unwrap()[flat] = orig - h;
                let lm = eval(inputs);
                inputs[ii].as_slice_mut().unwrap()[flat] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "grad mismatch input {ii} flat {flat}: fd={fd} an={an}"
                );
            }
        }
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        init::normal(rng, shape, 1.0)
    }

    #[test]
    fn fd_linear_gelu_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut inputs = vec![
            randn(&mut rng, &[3, 4]),
            randn(&mut rng, &[4, 5]),
            randn(&mut rng, &[5]),
            randn(&mut rng, &[5]),
            randn(&mut rng, &[5]),
        ];
        fd_check(
            &mut inputs,
            &|t, r| {
                let y = t.linear(r[0], r[1], Some(r[2]));
                let y = t.gelu(y);
                let y = t.layer_norm(y, r[3], r[4]);
                t.mean_sq(y)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_attention_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inputs = vec![
            randn(&mut rng, &[2, 4, 6]),
            randn(&mut rng, &[2, 4, 6]),
            randn(&mut rng, &[2, 4, 6]),
        ];
        let mut mask = Array2::from_elem((4, 4), true);
        mask[[0, 3]] = false;
        mask[[1, 3]] = false;
        mask[[0, 2]] = false;
        let mask = Arc::new(mask);
        fd_check(
            &mut inputs,
            &|t, r| {
                let y = t.attention(r[0], r[1], r[2], 2, Some(Arc::clone(&mask)));
                t.mean_sq(y)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_convt_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inputs = vec![
            randn(&mut rng, &[2, 3, 2, 2]).mapv(|v| v * 0.3),
            randn(&mut rng, &[3, 2, 4, 4]).mapv(|v| v * 0.3),
            randn(&mut rng, &[2]).mapv(|v| v * 0.1),
        ];
        fd_check(
            &mut inputs,
            &|t, r| {
                let y = t.conv_t2d(r[0], r[1], Some(r[2]), 2);
                let y = t.gelu(y);
                t.mean_sq(y)
            },
            1e-5,
        );
    }

    #[test]
    fn fd_leaky_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // keep entries away from the kink at 0
        let mut inputs = vec![randn(&mut rng, &[4, 5]).mapv(|v| v + v.signum() * 0.2)];
        fd_check(
            &mut inputs,
            &|t, r| {
                let y = t.leaky_relu(r[0], 0.1);
                t.mean_sq(y)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_plumbing_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inputs = vec![
            randn(&mut rng, &[2, 3, 4]),
            randn(&mut rng, &[2, 3, 2]),
            randn(&mut rng, &[1, 3, 6]),
        ];
        fd_check(
            &mut inputs,
            &|t, r| {
                let c = t.concat(&[r[0], r[1]], 2);
                let c = t.add_broadcast(c, r[2]);
                let sl = t.slice_axis(c, 1, 1, 2);
                let p = t.permute(sl, &[1, 0, 2]);
                let q = t.reshape(p, &[2, 12]);
                let m = t.mean(q);
                let s = t.mean_sq(q);
                let neg = t.scale(m, -0.7);
                t.add(s, neg)
            },
            1e-6,
        );
    }

    #[test]
    fn fd_mul_broadcast_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inputs = vec![randn(&mut rng, &[2, 1, 3]), randn(&mut rng, &[2, 4, 3])];
        fd_check(
            &mut inputs,
            &|t, r| {
                let b = t.broadcast_axis(r[0], 1, 4);
                let m = t.mul(b, r[1]);
                let d = t.sub(m, r[1]);
                t.mean_sq(d)
            },
            1e-6,
        );
    }

    #[test]
    fn masked_attention_blocks_exactly() {
        // With a mask forbidding column 2 for query 0, the output row 0 must
        // have exactly zero gradient w.r.t. v row 2.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randn(&mut rng, &[1, 3, 4]);
        let k = randn(&mut rng, &[1, 3, 4]);
        let v = randn(&mut rng, &[1, 3, 4]);
        let mut mask = Array2::from_elem((3, 3), true);
        mask[[0, 2]] = false;
        let tape = Tape::new();
        let (qr, kr, vr) = (tape.leaf(q, false), tape.leaf(k, false), tape.leaf(v, true));
        let y = tape.attention(qr, kr, vr, 1, Some(Arc::new(mask)));
        let row0 = tape.slice_axis(y, 1, 0, 1);
        let loss = tape.mean_sq(row0);
        let grads = tape.backward(loss);
        let gv = grads.get(vr).unwrap();
        let gv = gv.view().into_dimensionality::<Ix3>().unwrap();
        for d in 0..4 {
            assert_eq!(gv[[0, 2, d]], 0.0, "masked key leaked gradient");
        }
    }

    #[test]
    fn determinism_same_inputs_same_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[4, 8]);
        let w = randn(&mut rng, &[8, 8]);
        let run = || {
            let t = Tape::new();
            let xr = t.leaf(x.clone(), true);
            let wr = t.leaf(w.clone(), true);
            let y = t.gelu(t.linear(xr, wr, None));
            let l = t.mean_sq(y);
            let g = t.backward(l);
            (t.scalar(l), g.get(wr).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
