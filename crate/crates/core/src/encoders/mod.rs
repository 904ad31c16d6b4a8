//! Frozen observation encoders and trainable action/proprio embedders.
//!
//! An encoder maps a 224x224 RGB image to a grid of patch feature vectors.
//! Encoders never receive gradients; their parameters are fixed at load time
//! and checksummed so training runs can prove they stayed frozen. Pooled
//! (single-vector) encoders are represented as a 1x1 grid so the predictor
//! and planner are reused unchanged.

pub mod embed;
pub mod test_enc;
pub mod vit;

use ndarray::prelude::*;

use crate::data::{Obs, IMG};
use crate::error::{Error, Result};

pub use embed::{ActionEmbed, ProprioEmbed, ACTION_EMB_DIM, PROPRIO_EMB_DIM};
pub use test_enc::TestEncoder;

/// Per-timestep latent state: `N = rows * cols` patch vectors of width `E`,
/// plus an optional proprio embedding appended by the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLatent {
    /// `[N, E]`
    pub patches: Array2<f64>,
    pub grid: (usize, usize),
    pub proprio_emb: Option<Array1<f64>>,
}

impl PatchLatent {
    pub fn n(&self) -> usize {
        self.patches.nrows()
    }

    pub fn e(&self) -> usize {
        self.patches.ncols()
    }
}

pub trait Encoder: Send + Sync {
    /// Stable identifier recorded in checkpoints.
    fn id(&self) -> String;
    /// (rows, cols, feature dim)
    fn dims(&self) -> (usize, usize, usize);
    /// Encode one image to `[rows*cols, E]` patch features.
    fn encode_patches(&self, img: &Obs) -> Result<Array2<f64>>;
    /// Checksum of the frozen weights.
    fn checksum(&self) -> [u8; 32];
}

fn check_image(img: &Obs) -> Result<()> {
    if img.shape() != [IMG, IMG, 3] {
        return Err(Error::ShapeMismatch(format!(
            "image shape {:?}, expected [{IMG}, {IMG}, 3]",
            img.shape()
        )));
    }
    Ok(())
}

/// Encode an observation into a [`PatchLatent`] (no proprio attached).
pub fn encode_obs(encoder: &dyn Encoder, img: &Obs) -> Result<PatchLatent> {
    check_image(img)?;
    let (rows, cols, e) = encoder.dims();
    let patches = encoder.encode_patches(img)?;
    if patches.shape() != [rows * cols, e] {
        return Err(Error::ShapeMismatch(format!(
            "encoder {} produced {:?}, expected [{}, {e}]",
            encoder.id(),
            patches.shape(),
            rows * cols
        )));
    }
    if !patches.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("encoder {} output", encoder.id())));
    }
    Ok(PatchLatent { patches, grid: (rows, cols), proprio_emb: None })
}

/// Wraps any encoder into a pooled single-vector one (mean over patches,
/// exposed as a 1x1 grid). The id is the spec string that reconstructs it.
pub struct PooledEncoder<E: Encoder> {
    inner: E,
    id: String,
}

impl<E: Encoder> PooledEncoder<E> {
    pub fn new(inner: E, id: String) -> Self {
        PooledEncoder { inner, id }
    }
}

impl<E: Encoder> Encoder for PooledEncoder<E> {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn dims(&self) -> (usize, usize, usize) {
        let (_, _, e) = self.inner.dims();
        (1, 1, e)
    }

    fn encode_patches(&self, img: &Obs) -> Result<Array2<f64>> {
        let p = self.inner.encode_patches(img)?;
        let mean = p.mean_axis(Axis(0)).unwrap();
        Ok(mean.insert_axis(Axis(0)))
    }

    fn checksum(&self) -> [u8; 32] {
        self.inner.checksum()
    }
}

/// Parse an encoder spec string into an encoder.
///
/// Forms: `test:seed=S,n=N,e=E` (frozen random projection),
/// `test-pooled:...` (same, 1x1 grid), `vit:<weights-path>` (frozen
/// pretrained patch ViT; the standard configuration expects DINOv2 ViT-S/14
/// exported with `scripts/export_vit_weights.py`), `vit-cls:<weights-path>`
/// (its class-token pooled variant).
pub fn make_encoder(spec: &str) -> Result<Box<dyn Encoder>> {
    if let Some(rest) = spec.strip_prefix("test:") {
        let (seed, n, e) = parse_test_spec(rest)?;
        return Ok(Box::new(TestEncoder::new(seed, n, e)?));
    }
    if let Some(rest) = spec.strip_prefix("test-pooled:") {
        let (seed, n, e) = parse_test_spec(rest)?;
        let enc = TestEncoder::new(seed, n, e)?;
        let id = format!("test-pooled:{}", enc.id().strip_prefix("test:").unwrap());
        return Ok(Box::new(PooledEncoder::new(enc, id)));
    }
    if let Some(path) = spec.strip_prefix("vit:") {
        return Ok(Box::new(vit::VitEncoder::load(std::path::Path::new(path), false)?));
    }
    if let Some(path) = spec.strip_prefix("vit-cls:") {
        return Ok(Box::new(vit::VitEncoder::load(std::path::Path::new(path), true)?));
    }
    Err(Error::UnknownEncoder(spec.into()))
}

fn parse_test_spec(rest: &str) -> Result<(u64, usize, usize)> {
    let (mut seed, mut n, mut e) = (0u64, 16usize, 32usize);
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("bad encoder spec field `{part}`")))?;
        let parse = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number `{v}`")))
        };
        match k {
            "seed" => seed = parse(v)?,
            "n" => n = parse(v)? as usize,
            "e" => e = parse(v)? as usize,
            other => return Err(Error::InvalidArgument(format!("unknown field `{other}`"))),
        }
    }
    Ok((seed, n, e))
}

/// Register-style constructor used by the tests and docs.
pub fn make_test_encoder(seed: u64, n: usize, e: usize) -> Result<TestEncoder> {
    TestEncoder::new(seed, n, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing_round_trips() {
        let enc = make_encoder("test:seed=3,n=16,e=8").unwrap();
        assert_eq!(enc.dims(), (4, 4, 8));
        assert_eq!(enc.id(), "test:seed=3,n=16,e=8");
        let pooled = make_encoder("test-pooled:seed=3,n=16,e=8").unwrap();
        assert_eq!(pooled.dims(), (1, 1, 8));
        assert_eq!(pooled.id(), "test-pooled:seed=3,n=16,e=8");
        assert!(make_encoder("bogus:x").is_err());
    }

    #[test]
    fn wrong_image_shape_errors() {
        let enc = make_encoder("test:seed=0,n=4,e=4").unwrap();
        let img = Array3::<u8>::zeros((10, 10, 3));
        assert!(matches!(encode_obs(enc.as_ref(), &img), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pooled_is_mean_of_patches() {
        let enc = TestEncoder::new(0, 16, 8).unwrap();
        let pooled = PooledEncoder::new(TestEncoder::new(0, 16, 8).unwrap(), "p".into());
        let img = Array3::<u8>::from_elem((IMG, IMG, 3), 128);
        let p = enc.encode_patches(&img).unwrap();
        let q = pooled.encode_patches(&img).unwrap();
        let mean = p.mean_axis(Axis(0)).unwrap();
        for j in 0..8 {
            assert!((q[[0, j]] - mean[j]).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        /// Latents stay finite for arbitrary environment renders.
        #[test]
        fn latents_finite_for_random_states(seed in 0u64..300) {
            let cfg = crate::envs::EnvConfig::default();
            let envs = ["wall", "point_maze", "push_t"];
            let env = envs[(seed % 3) as usize];
            let (state, obs) = crate::envs::reset(env, seed, &cfg).unwrap();
            let _ = state;
            let enc = TestEncoder::new(0, 16, 8).unwrap();
            let z = encode_obs(&enc, &obs).unwrap();
            proptest::prop_assert!(z.patches.iter().all(|v| v.is_finite()));
        }
    }
}
