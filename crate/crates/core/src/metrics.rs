//! Image and point-set quality metrics.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plane::RgbImage;

/// PSNR reported for identical images in serialized output.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Point counts above this use the grid index.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("point set is empty")]
    EmptySet,
    #[error("matched depth lists differ in length")]
    LengthMismatch,
}

/// `10·log10(1/MSE)`; `+∞` for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let n = (3 * a.len()) as f64;
    let mse: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Clamps an infinite PSNR to [`PSNR_CAP_DB`] for serialization.
pub fn psnr_for_report(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<(), MetricError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ))
    }
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean SSIM over pixels and channels with an 11×11 Gaussian window
/// (σ = 1.5). Windows are truncated at the border and renormalized.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w == 0 || h == 0 {
        return Ok(1.0);
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = gaussian_window();
    let total: f64 = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = 0.0;
            for x in 0..w {
                for c in 0..3 {
                    let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) =
                        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        let yy = y as isize + dy as isize - 5;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..11 {
                            let xx = x as isize + dx as isize - 5;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let k = win[dy] * win[dx];
                            let va = a.get(xx as usize, yy as usize)[c];
                            let vb = b.get(xx as usize, yy as usize)[c];
                            sw += k;
                            ma += k * va;
                            mb += k * vb;
                            saa += k * va * va;
                            sbb += k * vb * vb;
                            sab += k * va * vb;
                        }
                    }
                    ma /= sw;
                    mb /= sw;
                    let va = saa / sw - ma * ma;
                    let vb = sbb / sw - mb * mb;
                    let cov = sab / sw - ma * mb;
                    row += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                        / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                }
            }
            row
        })
        .sum();
    Ok(total / (3 * w * h) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn image_metrics(a: &RgbImage, b: &RgbImage) -> Result<ImageMetrics, MetricError> {
    Ok(ImageMetrics {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

/// Uniform hash grid over a point set for nearest-neighbour queries.
struct Grid<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let n = points.len() as f64;
        let volume = extent.iter().map(|e| e.max(1e-9)).product::<f64>();
        // About two points per cell; flat sets widen the cell until the
        // cell count is proportional to the point count.
        let mut cell = (volume * 2.0 / n)
            .cbrt()
            .max(extent.max() * 1e-6)
            .max(1e-12);
        let dims_for = |cell: f64| [0, 1, 2].map(|k| (extent[k] / cell).floor() as usize + 1);
        while dims_for(cell).iter().product::<usize>() as f64 > 4.0 * n + 8.0 {
            cell *= 1.5;
        }
        let dims = dims_for(cell);
        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.key(grid.coords(p))).collect();
        let mut counts = vec![0usize; n_cells + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn coords(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - self.origin[k]) / self.cell).floor();
            if c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[k] - 1)
            }
        })
    }

    fn key(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Exact nearest distance: rings are searched until the ring's inner
    /// boundary is farther than the best distance found.
    fn nearest(&self, q: &Vector3<f64>) -> f64 {
        let c = self.coords(q);
        // Distance from q to the clamped cell box, so queries outside the
        // grid still get a valid lower bound per ring.
        let outside = (0..3)
            .map(|k| {
                let lo = self.origin[k];
                let hi = self.origin[k] + self.cell * self.dims[k] as f64;
                (lo - q[k]).max(q[k] - hi).max(0.0)
            })
            .fold(0.0f64, |a, b| a.max(b));
        let mut best = f64::INFINITY;
        let max_ring = *self.dims.iter().max().unwrap();
        for ring in 0..=max_ring {
            let bound = outside.max((ring as f64 - 1.0) * self.cell);
            if bound > best {
                break;
            }
            let r = ring as isize;
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let cc = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                        if (0..3).any(|k| cc[k] < 0 || cc[k] >= self.dims[k] as isize) {
                            continue;
                        }
                        let key = self.key([cc[0] as usize, cc[1] as usize, cc[2] as usize]);
                        for &i in &self.order[self.starts[key]..self.starts[key + 1]] {
                            let d = (self.points[i] - q).norm();
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> f64 {
    points
        .iter()
        .map(|p| (p - q).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Distance from each query to its nearest neighbour in `points`.
pub fn nearest_distances(queries: &[Vector3<f64>], points: &[Vector3<f64>]) -> Vec<f64> {
    if points.len() <= BRUTE_FORCE_LIMIT && queries.len() <= BRUTE_FORCE_LIMIT {
        queries
            .par_iter()
            .map(|q| brute_nearest(points, q))
            .collect()
    } else {
        nearest_distances_grid(queries, points)
    }
}

/// Grid-accelerated variant of [`nearest_distances`], regardless of size.
pub fn nearest_distances_grid(queries: &[Vector3<f64>], points: &[Vector3<f64>]) -> Vec<f64> {
    let grid = Grid::new(points);
    queries.par_iter().map(|q| grid.nearest(q)).collect()
}

/// Mean of both directed mean nearest-neighbour distances.
pub fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let ab = nearest_distances(a, b);
    let ba = nearest_distances(b, a);
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Harmonic mean of precision and recall at `threshold`.
pub fn f_score(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    threshold: f64,
) -> Result<f64, MetricError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricError::EmptySet);
    }
    Ok(f_score_from(
        &nearest_distances(pred, gt),
        &nearest_distances(gt, pred),
        threshold,
    ))
}

fn f_score_from(pred_to_gt: &[f64], gt_to_pred: &[f64], threshold: f64) -> f64 {
    let precision =
        pred_to_gt.iter().filter(|&&d| d < threshold).count() as f64 / pred_to_gt.len() as f64;
    let recall =
        gt_to_pred.iter().filter(|&&d| d < threshold).count() as f64 / gt_to_pred.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `mean(|d_pred − d_gt| / d_gt)` over matched ray distances.
pub fn abs_rel(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch);
    }
    if pred.is_empty() {
        return Err(MetricError::EmptySet);
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).abs() / g)
        .sum::<f64>()
        / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub abs_rel: Option<f64>,
    pub chamfer: f64,
    pub f_score: f64,
    pub f_score_threshold: f64,
}

/// Chamfer and F-score between point sets, plus AbsRel when matched ray
/// distances are supplied.
pub fn geometry_metrics(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    f_thresh: f64,
    matched: Option<(&[f64], &[f64])>,
) -> Result<GeometryMetrics, MetricError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let ab = nearest_distances(pred, gt);
    let ba = nearest_distances(gt, pred);
    Ok(GeometryMetrics {
        abs_rel: matched.map(|(p, g)| abs_rel(p, g)).transpose()?,
        chamfer: 0.5 * (mean(&ab) + mean(&ba)),
        f_score: f_score_from(&ab, &ba, f_thresh),
        f_score_threshold: f_thresh,
    })
}

/// Default F-score threshold: 5% of the bounding-box diagonal.
pub fn default_f_threshold(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (lo, hi) = points
        .iter()
        .fold((points[0], points[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    0.05 * (hi - lo).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::Plane;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, w: usize, h: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identical_images() {
        let a = noise_image(1, 16, 12);
        let m = image_metrics(&a, &a).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert_eq!(psnr_for_report(m.psnr), 99.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_is_twenty_db() {
        let a = Plane::filled(8, 8, [0.3, 0.4, 0.5]);
        let b = a.map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let black = Plane::filled(4, 4, [0.0; 3]);
        let white = Plane::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_dimensions() {
        assert!(matches!(
            psnr(
                &Plane::filled(2, 2, [0.0; 3]),
                &Plane::filled(3, 2, [0.0; 3])
            ),
            Err(MetricError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn image_metrics_are_symmetric() {
        let a = noise_image(2, 20, 20);
        let b = noise_image(3, 20, 20);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn translated_set_chamfer_is_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Points on a coarse lattice so a small shift keeps every nearest
        // neighbour matched to its own copy.
        let gt: Vec<_> = (0..50)
            .map(|_| {
                Vector3::new(
                    rng.random_range(0..10) as f64,
                    rng.random_range(0..10) as f64,
                    rng.random_range(0..10) as f64,
                )
            })
            .collect();
        let delta = 0.01;
        let pred: Vec<_> = gt
            .iter()
            .map(|p| p + Vector3::new(delta, 0.0, 0.0))
            .collect();
        let m = geometry_metrics(&pred, &gt, 0.05, None).unwrap();
        assert!((m.chamfer - delta).abs() < 1e-12);
        assert_eq!(m.f_score, 1.0);
        let same = geometry_metrics(&gt, &gt, 0.05, Some((&[1.0, 2.0], &[1.0, 2.0]))).unwrap();
        assert_eq!(
            (same.chamfer, same.f_score, same.abs_rel),
            (0.0, 1.0, Some(0.0))
        );
    }

    #[test]
    fn far_pair_scores_zero() {
        let a = [Vector3::zeros()];
        let b = [Vector3::new(0.1, 0.0, 0.0)];
        assert_eq!(f_score(&a, &b, 0.05).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&a, &[]), Err(MetricError::EmptySet));
    }

    fn cloud(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.0..1.0),
                    rng.random::<f64>() * 0.01,
                )
            })
            .collect()
    }

    #[test]
    fn grid_matches_brute_force() {
        let pts = cloud(5, 3000);
        let mut qs = cloud(6, 500);
        qs.push(Vector3::new(40.0, -20.0, 5.0));
        let grid = nearest_distances_grid(&qs, &pts);
        for (q, g) in qs.iter().zip(grid) {
            assert!((brute_nearest(&pts, q) - g).abs() <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn chamfer_symmetric(sa in 0u64..1000, sb in 0u64..1000, na in 1usize..40, nb in 1usize..40) {
            let a = cloud(sa, na);
            let b = cloud(sb + 1000, nb);
            let ab = chamfer_distance(&a, &b).unwrap();
            prop_assert!((ab - chamfer_distance(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab > 0.0);
        }

        #[test]
        fn chamfer_zero_for_permutation(seed in 0u64..1000, n in 1usize..40) {
            let a = cloud(seed, n);
            let mut b = a.clone();
            b.reverse();
            prop_assert!(chamfer_distance(&a, &b).unwrap() < 1e-9);
        }

        #[test]
        fn f_score_monotone(seed in 0u64..1000, t1 in 0.0..1.0f64, dt in 0.0..1.0f64) {
            let a = cloud(seed, 30);
            let b = cloud(seed + 7, 30);
            prop_assert!(f_score(&a, &b, t1).unwrap() <= f_score(&a, &b, t1 + dt).unwrap());
        }
    }
}
