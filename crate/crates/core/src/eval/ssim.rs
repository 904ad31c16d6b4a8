//! Structural similarity index over [0,1] images.
//!
//! Windowed SSIM with an 11x11 Gaussian window (sigma 1.5) and the standard
//! stabilizers C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1. The map is
//! computed on the valid region (windows fully inside the image) and
//! averaged over channels.

use ndarray::prelude::*;

use crate::data::Obs;
use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-region Gaussian filter.
fn filter_valid(img: &ArrayView2<'_, f64>, k: &[f64; WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let oh = h - WINDOW + 1;
    let ow = w - WINDOW + 1;
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += img[[r, c + i]] * kv;
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += tmp[[r + i, c]] * kv;
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// SSIM between two `[H, W, C]` images in [0,1]; mean over channels.
pub fn ssim(a: &ArrayView3<'_, f64>, b: &ArrayView3<'_, f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w, ch) = a.dim();
    if h < WINDOW || w < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..ch {
        let x = a.slice(s![.., .., c]);
        let y = b.slice(s![.., .., c]);
        let xx = &x.to_owned() * &x;
        let yy = &y.to_owned() * &y;
        let xy = &x.to_owned() * &y;
        let mu_x = filter_valid(&x, &k);
        let mu_y = filter_valid(&y, &k);
        let m_xx = filter_valid(&xx.view(), &k);
        let m_yy = filter_valid(&yy.view(), &k);
        let m_xy = filter_valid(&xy.view(), &k);
        let mut acc = 0.0;
        let (oh, ow) = mu_x.dim();
        for r in 0..oh {
            for cc in 0..ow {
                let (mx, my) = (mu_x[[r, cc]], mu_y[[r, cc]]);
                let vx = m_xx[[r, cc]] - mx * mx;
                let vy = m_yy[[r, cc]] - my * my;
                let cov = m_xy[[r, cc]] - mx * my;
                acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / ch as f64)
}

/// Observation to `[H, W, C]` floats in [0,1].
pub fn obs_to_hwc(obs: &Obs) -> Array3<f64> {
    obs.mapv(|v| v as f64 / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct non-separable implementation used as the reference oracle.
    fn ssim_reference(a: &ArrayView3<'_, f64>, b: &ArrayView3<'_, f64>) -> f64 {
        let k1d = gaussian_kernel();
        let mut k2 = [[0.0; WINDOW]; WINDOW];
        for i in 0..WINDOW {
            for j in 0..WINDOW {
                k2[i][j] = k1d[i] * k1d[j];
            }
        }
        let (h, w, ch) = a.dim();
        let mut total = 0.0;
        for c in 0..ch {
            let mut acc = 0.0;
            let mut count = 0;
            for r0 in 0..=(h - WINDOW) {
                for c0 in 0..=(w - WINDOW) {
                    let (mut mx, mut my) = (0.0, 0.0);
                    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                    for i in 0..WINDOW {
                        for j in 0..WINDOW {
                            let kv = k2[i][j];
                            let xv = a[[r0 + i, c0 + j, c]];
                            let yv = b[[r0 + i, c0 + j, c]];
                            mx += kv * xv;
                            my += kv * yv;
                            sxx += kv * xv * xv;
                            syy += kv * yv * yv;
                            sxy += kv * xv * yv;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                        / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / ch as f64
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Array3::from_shape_fn((32, 32, 3), |_| rng.random_range(0.0..1.0));
        let s = ssim(&a.view(), &a.view()).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim(a,a) = {s}");
    }

    #[test]
    fn inversion_scores_well_below_one() {
        // all-dark vs all-bright checkerboard-free pattern
        let a = Array3::from_shape_fn((32, 32, 3), |(r, c, _)| {
            if (r / 4 + c / 4) % 2 == 0 {
                0.9
            } else {
                0.1
            }
        });
        let b = a.mapv(|v| 1.0 - v);
        let s = ssim(&a.view(), &b.view()).unwrap();
        assert!(s < 0.2, "inverted image scored {s}");
    }

    #[test]
    fn matches_reference_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pair in 0..10 {
            let a = Array3::from_shape_fn((24, 24, 3), |_| rng.random_range(0.0..1.0));
            let noise: f64 = rng.random_range(0.0..0.3);
            let b = a.mapv(|v| (v + rng.random_range(-noise..noise + 1e-9)).clamp(0.0, 1.0));
            let fast = ssim(&a.view(), &b.view()).unwrap();
            let slow = ssim_reference(&a.view(), &b.view());
            assert!(
                (fast - slow).abs() < 1e-4,
                "pair {pair}: fast {fast} vs reference {slow}"
            );
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array3::<f64>::zeros((24, 24, 3));
        let b = Array3::<f64>::zeros((24, 20, 3));
        assert!(ssim(&a.view(), &b.view()).is_err());
    }
}
