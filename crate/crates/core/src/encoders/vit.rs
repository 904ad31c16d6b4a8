//! Frozen pretrained ViT encoder (inference only).
//!
//! Loads weights from the crate's tensor container as exported by
//! `scripts/export_vit_weights.py` (the standard export is DINOv2 ViT-S/14,
//! giving a 14x14 grid of 384-d patch features from images resized to
//! 196x196). The architecture — patch size, width, depth, heads — comes from
//! the file header, so small synthetic files exercise the same code path in
//! tests. No gradient ever flows here; the forward pass is plain `ndarray`.

use std::path::Path;

use ndarray::prelude::*;
use ndarray::linalg::general_mat_mul;
use sha2::{Digest, Sha256};

use crate::data::{Obs, IMG};
use crate::error::{Error, Result};
use crate::math::serialize::read_container;
use crate::math::Arr;

use super::Encoder;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub struct VitEncoder {
    id: String,
    img_size: usize,
    patch: usize,
    dim: usize,
    depth: usize,
    heads: usize,
    cls_pooled: bool,
    tensors: std::collections::HashMap<String, Arr>,
    checksum: [u8; 32],
}

impl VitEncoder {
    pub fn load(path: &Path, cls_pooled: bool) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingWeights(format!(
                "{} not found; export pretrained ViT weights with \
                 scripts/export_vit_weights.py and point the encoder spec at the file",
                path.display()
            )));
        }
        let (header, tensor_list) = read_container(path)?;
        let get = |k: &str| -> Result<usize> {
            header[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("header missing `{k}`"),
                })
        };
        if header["kind"] != "vit" {
            return Err(Error::Corrupt { path: path.to_path_buf(), reason: "kind != vit".into() });
        }
        let img_size = get("img_size")?;
        let patch = get("patch")?;
        let dim = get("dim")?;
        let depth = get("depth")?;
        let heads = get("heads")?;
        if img_size % patch != 0 || dim % heads != 0 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: "inconsistent vit geometry".into(),
            });
        }
        let mut hasher = Sha256::new();
        let mut tensors = std::collections::HashMap::new();
        for (name, arr) in tensor_list {
            hasher.update(name.as_bytes());
            for v in arr.iter() {
                hasher.update(v.to_le_bytes());
            }
            tensors.insert(name, arr);
        }
        let enc = VitEncoder {
            id: format!("{}:{}", if cls_pooled { "vit-cls" } else { "vit" }, path.display()),
            img_size,
            patch,
            dim,
            depth,
            heads,
            cls_pooled,
            tensors,
            checksum: hasher.finalize().into(),
        };
        // fail fast on missing tensors
        for name in enc.required_tensors() {
            if !enc.tensors.contains_key(&name) {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("missing tensor {name}"),
                });
            }
        }
        Ok(enc)
    }

    fn required_tensors(&self) -> Vec<String> {
        let mut names = vec![
            "patch_embed.weight".to_string(),
            "patch_embed.bias".to_string(),
            "pos_embed".to_string(),
            "cls_token".to_string(),
            "norm.weight".to_string(),
            "norm.bias".to_string(),
        ];
        for i in 0..self.depth {
            for t in [
                "norm1.weight",
                "norm1.bias",
                "attn.qkv.weight",
                "attn.qkv.bias",
                "attn.proj.weight",
                "attn.proj.bias",
                "norm2.weight",
                "norm2.bias",
                "mlp.fc1.weight",
                "mlp.fc1.bias",
                "mlp.fc2.weight",
                "mlp.fc2.bias",
            ] {
                names.push(format!("blocks.{i}.{t}"));
            }
        }
        names
    }

    fn t2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.tensors[name].view().into_dimensionality::<Ix2>().unwrap()
    }

    fn t1(&self, name: &str) -> ArrayView1<'_, f64> {
        self.tensors[name].view().into_dimensionality::<Ix1>().unwrap()
    }

    fn grid(&self) -> usize {
        self.img_size / self.patch
    }
}

fn layer_norm_rows(x: &mut Array2<f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    let d = x.ncols();
    for mut row in x.rows_mut() {
        let mu = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for j in 0..d {
            row[j] = (row[j] - mu) * inv * g[j] + b[j];
        }
    }
}

fn gelu_erf(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Bilinear resize of one channel plane.
fn resize_plane(src: &Array2<f64>, dst_size: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let mut out = Array2::zeros((dst_size, dst_size));
    let sy = sh as f64 / dst_size as f64;
    let sx = sw as f64 / dst_size as f64;
    for r in 0..dst_size {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for c in 0..dst_size {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            out[[r, c]] = src[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                + src[[y0, x1]] * (1.0 - wy) * wx
                + src[[y1, x0]] * wy * (1.0 - wx)
                + src[[y1, x1]] * wy * wx;
        }
    }
    out
}

impl Encoder for VitEncoder {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn dims(&self) -> (usize, usize, usize) {
        if self.cls_pooled {
            (1, 1, self.dim)
        } else {
            (self.grid(), self.grid(), self.dim)
        }
    }

    fn encode_patches(&self, img: &Obs) -> Result<Array2<f64>> {
        // resize each channel, normalize with the encoder's published stats
        let mut planes = Vec::with_capacity(3);
        for c in 0..3 {
            let plane = Array2::from_shape_fn((IMG, IMG), |(r, cc)| img[[r, cc, c]] as f64 / 255.0);
            let mut resized = resize_plane(&plane, self.img_size);
            resized.mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
            planes.push(resized);
        }
        // patchify: [n_tokens, patch*patch*3] in channel-last order
        let g = self.grid();
        let p = self.patch;
        let n = g * g;
        let mut flat = Array2::<f64>::zeros((n, p * p * 3));
        for pr in 0..g {
            for pc in 0..g {
                let row = pr * g + pc;
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for (ci, plane) in planes.iter().enumerate() {
                            let _ = ci;
                            flat[[row, k]] = plane[[pr * p + dy, pc * p + dx]];
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut tokens = Array2::<f64>::zeros((n + 1, self.dim));
        {
            let w = self.t2("patch_embed.weight");
            let b = self.t1("patch_embed.bias");
            let mut body = tokens.slice_mut(s![1.., ..]);
            general_mat_mul(1.0, &flat.view(), &w, 0.0, &mut body);
            body += &b.insert_axis(Axis(0));
            let cls = self.t1("cls_token");
            tokens.row_mut(0).assign(&cls);
        }
        tokens += &self.t2("pos_embed");

        let s_len = n + 1;
        let dh = self.dim / self.heads;
        let scale = (dh as f64).powf(-0.5);
        for i in 0..self.depth {
            let pre = format!("blocks.{i}");
            // attention
            let mut h = tokens.clone();
            layer_norm_rows(
                &mut h,
                self.t1(&format!("{pre}.norm1.weight")),
                self.t1(&format!("{pre}.norm1.bias")),
            );
            let mut qkv = Array2::<f64>::zeros((s_len, 3 * self.dim));
            general_mat_mul(1.0, &h.view(), &self.t2(&format!("{pre}.attn.qkv.weight")), 0.0, &mut qkv);
            qkv += &self.t1(&format!("{pre}.attn.qkv.bias")).insert_axis(Axis(0));
            let mut attn_out = Array2::<f64>::zeros((s_len, self.dim));
            let mut scores = Array2::<f64>::zeros((s_len, s_len));
            for head in 0..self.heads {
                let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
                let k = qkv.slice(s![.., self.dim + head * dh..self.dim + (head + 1) * dh]);
                let v = qkv.slice(s![.., 2 * self.dim + head * dh..2 * self.dim + (head + 1) * dh]);
                general_mat_mul(scale, &q, &k.t(), 0.0, &mut scores);
                for mut row in scores.rows_mut() {
                    let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    row.mapv_inplace(|v| v / sum);
                }
                let mut o = attn_out.slice_mut(s![.., head * dh..(head + 1) * dh]);
                general_mat_mul(1.0, &scores.view(), &v, 0.0, &mut o);
            }
            let mut proj = Array2::<f64>::zeros((s_len, self.dim));
            general_mat_mul(
                1.0,
                &attn_out.view(),
                &self.t2(&format!("{pre}.attn.proj.weight")),
                0.0,
                &mut proj,
            );
            proj += &self.t1(&format!("{pre}.attn.proj.bias")).insert_axis(Axis(0));
            if let Some(ls) = self.tensors.get(&format!("{pre}.ls1.gamma")) {
                let g1 = ls.view().into_dimensionality::<Ix1>().unwrap();
                proj *= &g1.insert_axis(Axis(0));
            }
            tokens += &proj;
            // mlp
            let mut h = tokens.clone();
            layer_norm_rows(
                &mut h,
                self.t1(&format!("{pre}.norm2.weight")),
                self.t1(&format!("{pre}.norm2.bias")),
            );
            let w1 = self.t2(&format!("{pre}.mlp.fc1.weight"));
            let mut mid = Array2::<f64>::zeros((s_len, w1.ncols()));
            general_mat_mul(1.0, &h.view(), &w1, 0.0, &mut mid);
            mid += &self.t1(&format!("{pre}.mlp.fc1.bias")).insert_axis(Axis(0));
            mid.mapv_inplace(gelu_erf);
            let mut out = Array2::<f64>::zeros((s_len, self.dim));
            general_mat_mul(1.0, &mid.view(), &self.t2(&format!("{pre}.mlp.fc2.weight")), 0.0, &mut out);
            out += &self.t1(&format!("{pre}.mlp.fc2.bias")).insert_axis(Axis(0));
            if let Some(ls) = self.tensors.get(&format!("{pre}.ls2.gamma")) {
                let g2 = ls.view().into_dimensionality::<Ix1>().unwrap();
                out *= &g2.insert_axis(Axis(0));
            }
            tokens += &out;
        }
        layer_norm_rows(&mut tokens, self.t1("norm.weight"), self.t1("norm.bias"));
        if self.cls_pooled {
            Ok(tokens.slice(s![0..1, ..]).to_owned())
        } else {
            Ok(tokens.slice(s![1.., ..]).to_owned())
        }
    }

    fn checksum(&self) -> [u8; 32] {
        self.checksum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::make_encoder;
    use crate::math::init;
    use crate::math::serialize::write_container;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Write a tiny random ViT weight file for exercising the loader.
    pub(crate) fn write_tiny_vit(path: &Path, seed: u64) {
        let (img_size, patch, dim, depth, heads) = (28usize, 14usize, 8usize, 1usize, 2usize);
        let grid = img_size / patch;
        let n = grid * grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors: Vec<(String, Arr)> = Vec::new();
        let mut add = |n: String, a: Arr, t: &mut Vec<(String, Arr)>| t.push((n, a));
        add("patch_embed.weight".into(), init::normal(&mut rng, &[patch * patch * 3, dim], 0.05), &mut tensors);
        add("patch_embed.bias".into(), init::zeros(&[dim]), &mut tensors);
        add("pos_embed".into(), init::normal(&mut rng, &[n + 1, dim], 0.05), &mut tensors);
        add("cls_token".into(), init::normal(&mut rng, &[dim], 0.05), &mut tensors);
        add("norm.weight".into(), init::ones(&[dim]), &mut tensors);
        add("norm.bias".into(), init::zeros(&[dim]), &mut tensors);
        for i in 0..depth {
            let p = format!("blocks.{i}");
            add(format!("{p}.norm1.weight"), init::ones(&[dim]), &mut tensors);
            add(format!("{p}.norm1.bias"), init::zeros(&[dim]), &mut tensors);
            add(format!("{p}.attn.qkv.weight"), init::normal(&mut rng, &[dim, 3 * dim], 0.2), &mut tensors);
            add(format!("{p}.attn.qkv.bias"), init::zeros(&[3 * dim]), &mut tensors);
            add(format!("{p}.attn.proj.weight"), init::normal(&mut rng, &[dim, dim], 0.2), &mut tensors);
            add(format!("{p}.attn.proj.bias"), init::zeros(&[dim]), &mut tensors);
            add(format!("{p}.ls1.gamma"), init::ones(&[dim]), &mut tensors);
            add(format!("{p}.norm2.weight"), init::ones(&[dim]), &mut tensors);
            add(format!("{p}.norm2.bias"), init::zeros(&[dim]), &mut tensors);
            add(format!("{p}.mlp.fc1.weight"), init::normal(&mut rng, &[dim, 4 * dim], 0.2), &mut tensors);
            add(format!("{p}.mlp.fc1.bias"), init::zeros(&[4 * dim]), &mut tensors);
            add(format!("{p}.mlp.fc2.weight"), init::normal(&mut rng, &[4 * dim, dim], 0.2), &mut tensors);
            add(format!("{p}.mlp.fc2.bias"), init::zeros(&[dim]), &mut tensors);
            add(format!("{p}.ls2.gamma"), init::ones(&[dim]), &mut tensors);
        }
        let header = serde_json::json!({
            "kind": "vit", "img_size": img_size, "patch": patch,
            "dim": dim, "depth": depth, "heads": heads, "mlp_ratio": 4,
        });
        let refs: Vec<(String, &Arr)> = tensors.iter().map(|(n, a)| (n.clone(), a)).collect();
        write_container(path, &header, &refs).unwrap();
    }

    #[test]
    fn missing_weights_give_hint() {
        let Err(err) = VitEncoder::load(Path::new("/nonexistent/vit.bin"), false) else {
            panic!("expected missing-weights error");
        };
        let msg = format!("{err}");
        assert!(msg.contains("export_vit_weights"), "{msg}");
    }

    #[test]
    fn tiny_vit_loads_and_encodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.bin");
        write_tiny_vit(&path, 0);
        let enc = make_encoder(&format!("vit:{}", path.display())).unwrap();
        assert_eq!(enc.dims(), (2, 2, 8));
        let img = ndarray::Array3::<u8>::from_shape_fn((IMG, IMG, 3), |(r, c, ch)| {
            ((r * 7 + c * 3 + ch * 31) % 255) as u8
        });
        let a = enc.encode_patches(&img).unwrap();
        let b = enc.encode_patches(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [4, 8]);
        assert!(a.iter().all(|v| v.is_finite()));

        let cls = make_encoder(&format!("vit-cls:{}", path.display())).unwrap();
        assert_eq!(cls.dims(), (1, 1, 8));
        assert_eq!(cls.encode_patches(&img).unwrap().shape(), [1, 8]);
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.bin");
        write_tiny_vit(&path, 0);
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0x55;
        std::fs::write(&path, bytes).unwrap();
        assert!(VitEncoder::load(&path, false).is_err());
    }
}
