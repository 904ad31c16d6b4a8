//! Numerics: a small reverse-mode autodiff tape over `ndarray`, parameter
//! storage, deterministic initializers, and an AdamW optimizer.
//!
//! Everything runs in `f64` on the CPU. All reductions use fixed iteration
//! order, so results are bit-reproducible for a given seed and thread-safe
//! to share read-only.

pub mod adamw;
pub mod init;
pub mod params;
pub mod serialize;
pub mod tape;

pub type Arr = ndarray::ArrayD<f64>;

pub use adamw::AdamW;
pub use params::{ParamCtx, ParamStore};
pub use tape::{Tape, TensorRef};
