//! Tiny deterministic software rasterizer for 224x224 RGB observations.
//!
//! Arena coordinates are [0,1]^2 with y down. Pixel centers map as
//! `x = (col + 0.5) / 224`, `y = (row + 0.5) / 224`. Shapes are drawn with a
//! short linear edge ramp so small motions change pixel values smoothly.

use ndarray::Array3;

use crate::data::{Obs, IMG};

pub const PX: f64 = IMG as f64;

pub fn to_px(u: f64) -> f64 {
    u * PX - 0.5
}

pub fn blank(color: [u8; 3]) -> Obs {
    let mut img = Array3::zeros((IMG, IMG, 3));
    for row in 0..IMG {
        for col in 0..IMG {
            for c in 0..3 {
                img[[row, col, c]] = color[c];
            }
        }
    }
    img
}

fn blend(img: &mut Obs, row: usize, col: usize, color: [u8; 3], alpha: f64) {
    let a = alpha.clamp(0.0, 1.0);
    for c in 0..3 {
        let old = img[[row, col, c]] as f64;
        img[[row, col, c]] = (old + (color[c] as f64 - old) * a).round() as u8;
    }
}

/// Filled disk centered at arena point `(cx, cy)` with radius in arena units.
/// `soft` is the edge ramp width in pixels.
pub fn disk(img: &mut Obs, cx: f64, cy: f64, radius: f64, color: [u8; 3], soft: f64) {
    let (pcx, pcy, pr) = (to_px(cx), to_px(cy), radius * PX);
    let r0 = ((pcy - pr - soft).floor().max(0.0)) as usize;
    let r1 = ((pcy + pr + soft).ceil().min(PX - 1.0)) as usize;
    let c0 = ((pcx - pr - soft).floor().max(0.0)) as usize;
    let c1 = ((pcx + pr + soft).ceil().min(PX - 1.0)) as usize;
    if r0 > r1 || c0 > c1 {
        return;
    }
    for row in r0..=r1 {
        for col in c0..=c1 {
            let dy = row as f64 - pcy;
            let dx = col as f64 - pcx;
            let d = (dx * dx + dy * dy).sqrt();
            let alpha = (pr + soft - d) / soft;
            if alpha > 0.0 {
                blend(img, row, col, color, alpha);
            }
        }
    }
}

/// Axis-aligned rectangle given in arena units, hard edges.
pub fn rect(img: &mut Obs, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let c0 = (to_px(x0).ceil().max(0.0)) as usize;
    let c1 = (to_px(x1).floor().min(PX - 1.0)) as usize;
    let r0 = (to_px(y0).ceil().max(0.0)) as usize;
    let r1 = (to_px(y1).floor().min(PX - 1.0)) as usize;
    for row in r0..=r1.min(IMG - 1) {
        for col in c0..=c1.min(IMG - 1) {
            blend(img, row, col, color, 1.0);
        }
    }
}

/// A rectangle in a rigid body's frame: center, half-extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyRect {
    pub cx: f64,
    pub cy: f64,
    pub hw: f64,
    pub hh: f64,
}

/// Signed distance from a body-frame point to the rect boundary (< 0 inside).
pub fn sdf_rect(r: &BodyRect, x: f64, y: f64) -> f64 {
    let dx = (x - r.cx).abs() - r.hw;
    let dy = (y - r.cy).abs() - r.hh;
    let ox = dx.max(0.0);
    let oy = dy.max(0.0);
    let outside = (ox * ox + oy * oy).sqrt();
    let inside = dx.max(dy).min(0.0);
    outside + inside
}

/// Signed distance to a union of body rects at world point `(x, y)` for a
/// body at `(bx, by)` rotated by `theta`.
pub fn sdf_body(rects: &[BodyRect], bx: f64, by: f64, theta: f64, x: f64, y: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let dx = x - bx;
    let dy = y - by;
    // world -> body: rotate by -theta
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    rects
        .iter()
        .map(|r| sdf_rect(r, lx, ly))
        .fold(f64::INFINITY, f64::min)
}

/// Rasterize a rotated union-of-rects body with a soft edge.
pub fn body(
    img: &mut Obs,
    rects: &[BodyRect],
    bx: f64,
    by: f64,
    theta: f64,
    color: [u8; 3],
    soft_px: f64,
) {
    let extent = rects
        .iter()
        .map(|r| (r.cx.abs() + r.hw).hypot(r.cy.abs() + r.hh))
        .fold(0.0, f64::max);
    let (pbx, pby, pe) = (to_px(bx), to_px(by), extent * PX + soft_px + 1.0);
    let r0 = ((pby - pe).floor().max(0.0)) as usize;
    let r1 = ((pby + pe).ceil().min(PX - 1.0)) as usize;
    let c0 = ((pbx - pe).floor().max(0.0)) as usize;
    let c1 = ((pbx + pe).ceil().min(PX - 1.0)) as usize;
    for row in r0..=r1 {
        for col in c0..=c1 {
            let x = (col as f64 + 0.5) / PX;
            let y = (row as f64 + 0.5) / PX;
            let d = sdf_body(rects, bx, by, theta, x, y) * PX;
            let alpha = (0.5 - d) / soft_px + 0.5;
            if alpha > 0.0 {
                blend(img, row, col, color, alpha);
            }
        }
    }
}
