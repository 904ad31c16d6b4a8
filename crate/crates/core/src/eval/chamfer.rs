//! Symmetric Chamfer distance between point sets.
//!
//! Convention: mean over A of the Euclidean distance to the nearest point in
//! B, plus the same with the roles swapped. Euclidean (not squared)
//! distances; both directions averaged then summed. Nearest-neighbor
//! lookups use a uniform grid with ring expansion; results are exactly the
//! brute-force values because the search only stops once no unexamined cell
//! can contain a closer point.

use std::collections::HashMap;

use ndarray::prelude::*;

use crate::error::{Error, Result};

struct Grid {
    cell: f64,
    origin: Vec<f64>,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
    dim: usize,
}

impl Grid {
    fn build(pts: &ArrayView2<'_, f64>) -> Grid {
        let (n, dim) = pts.dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in pts.rows() {
            for d in 0..dim {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let extent = (0..dim)
            .map(|d| hi[d] - lo[d])
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let cells_per_axis = (n as f64).powf(1.0 / dim as f64).ceil().max(1.0);
        let cell = extent / cells_per_axis;
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, p) in pts.rows().into_iter().enumerate() {
            let key: Vec<i64> = (0..dim).map(|d| ((p[d] - lo[d]) / cell).floor() as i64).collect();
            buckets.entry(key).or_default().push(i);
        }
        Grid { cell, origin: lo, buckets, dim }
    }

    /// Exact nearest-neighbor distance from `q` to the indexed set.
    fn nearest(&self, pts: &ArrayView2<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
        // small sets, degenerate extents, and far-away queries fall back to
        // a direct scan; the grid only pays off inside a populated box
        let n = pts.nrows();
        if n < 16 {
            return brute_nearest(pts, q);
        }
        let key: Vec<i64> = (0..self.dim)
            .map(|d| ((q[d] - self.origin[d]) / self.cell).floor() as i64)
            .collect();
        let ring_cap = (n as f64).powf(1.0 / self.dim as f64).ceil() as i64 + 2;
        if key.iter().any(|k| *k < -ring_cap || *k > 2 * ring_cap) {
            return brute_nearest(pts, q);
        }
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        while ring <= 3 * ring_cap {
            // any cell at Chebyshev ring k is at least (k-1)*cell away
            if ring > 1 && best.is_finite() && (ring - 1) as f64 * self.cell > best {
                return best;
            }
            visit_ring(&key, ring, &mut |cell_key| {
                if let Some(ids) = self.buckets.get(cell_key) {
                    for &i in ids {
                        let p = pts.row(i);
                        let mut d2 = 0.0;
                        for d in 0..self.dim {
                            let dv = p[d] - q[d];
                            d2 += dv * dv;
                        }
                        let dist = d2.sqrt();
                        if dist < best {
                            best = dist;
                        }
                    }
                }
            });
            ring += 1;
        }
        if best.is_finite() {
            best
        } else {
            brute_nearest(pts, q)
        }
    }
}

fn brute_nearest(pts: &ArrayView2<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    let mut best = f64::INFINITY;
    for p in pts.rows() {
        let mut d2 = 0.0;
        for d in 0..p.len() {
            let dv = p[d] - q[d];
            d2 += dv * dv;
        }
        best = best.min(d2.sqrt());
    }
    best
}

/// Visit every cell key at exact Chebyshev distance `ring` from `center`.
fn visit_ring(center: &[i64], ring: i64, f: &mut dyn FnMut(&Vec<i64>)) {
    let dim = center.len();
    let mut key = vec![0i64; dim];
    let mut offsets = vec![-ring; dim];
    'outer: loop {
        let cheb = offsets.iter().map(|o| o.abs()).max().unwrap_or(0);
        if cheb == ring {
            for d in 0..dim {
                key[d] = center[d] + offsets[d];
            }
            f(&key);
        }
        for d in 0..dim {
            offsets[d] += 1;
            if offsets[d] <= ring {
                continue 'outer;
            }
            offsets[d] = -ring;
        }
        break;
    }
}

/// Symmetric Chamfer distance. Points are rows; 2-D or 3-D.
pub fn chamfer(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument("chamfer on an empty point set".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "point dims {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if !(2..=3).contains(&a.ncols()) {
        return Err(Error::InvalidArgument("chamfer supports 2-d or 3-d points".into()));
    }
    let gb = Grid::build(b);
    let mut ab = 0.0;
    for p in a.rows() {
        ab += gb.nearest(b, p);
    }
    let ga = Grid::build(a);
    let mut ba = 0.0;
    for p in b.rows() {
        ba += ga.nearest(a, p);
    }
    Ok(ab / a.nrows() as f64 + ba / b.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// O(n*m) brute force, the independence oracle.
    fn chamfer_brute(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> f64 {
        let nn = |from: &ArrayView2<'_, f64>, to: &ArrayView2<'_, f64>| -> f64 {
            let mut total = 0.0;
            for p in from.rows() {
                let mut best = f64::INFINITY;
                for q in to.rows() {
                    let mut d2 = 0.0;
                    for d in 0..p.len() {
                        let dv = p[d] - q[d];
                        d2 += dv * dv;
                    }
                    best = best.min(d2.sqrt());
                }
                total += best;
            }
            total / from.nrows() as f64
        };
        nn(a, b) + nn(b, a)
    }

    #[test]
    fn identical_sets_zero() {
        let a = ndarray::arr2(&[[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]]);
        assert_eq!(chamfer(&a.view(), &a.view()).unwrap(), 0.0);
    }

    #[test]
    fn hand_geometry_single_points() {
        // A = {(0,0)}, B = {(3,4)}: each direction contributes 5
        let a = ndarray::arr2(&[[0.0, 0.0]]);
        let b = ndarray::arr2(&[[3.0, 4.0]]);
        assert_eq!(chamfer(&a.view(), &b.view()).unwrap(), 10.0);
    }

    #[test]
    fn symmetric_and_translation_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Array2::from_shape_fn((40, 2), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((25, 2), |_| rng.random_range(-1.0..1.0));
        let ab = chamfer(&a.view(), &b.view()).unwrap();
        let ba = chamfer(&b.view(), &a.view()).unwrap();
        assert_eq!(ab, ba);
        let mut prev = 0.0;
        for k in 1..5 {
            let shifted = &a + k as f64 * 0.5;
            let d = chamfer(&a.view(), &shifted.view()).unwrap();
            assert!(d > prev, "shift {k}: {d} <= {prev}");
            prev = d;
        }
    }

    #[test]
    fn matches_brute_force_exactly_100_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..100 {
            let dim = if case % 2 == 0 { 2 } else { 3 };
            let n = rng.random_range(1..60);
            let m = rng.random_range(1..60);
            let scale: f64 = rng.random_range(0.1..10.0);
            let a = Array2::from_shape_fn((n, dim), |_| rng.random_range(-scale..scale));
            let b = Array2::from_shape_fn((m, dim), |_| rng.random_range(-scale..scale));
            let fast = chamfer(&a.view(), &b.view()).unwrap();
            let slow = chamfer_brute(&a.view(), &b.view());
            assert_eq!(fast, slow, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn empty_set_rejected() {
        let a = Array2::<f64>::zeros((0, 2));
        let b = ndarray::arr2(&[[0.0, 0.0]]);
        assert!(chamfer(&a.view(), &b.view()).is_err());
    }
}
