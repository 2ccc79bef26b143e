//! Robust affine alignment of a predicted depth map to metric context depth.
//!
//! Hypotheses come from two-pixel minimal samples drawn from a seeded
//! generator, so a fit is a pure function of its inputs and the seed. The
//! winning hypothesis' inlier set is refit by least squares until it stops
//! changing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plane::{DepthMap, Mask, Plane};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("insufficient correspondences: {found} valid pixels, need at least 2")]
    InsufficientCorrespondences { found: usize },
    #[error("degenerate: zero depth variance")]
    ZeroVariance,
    #[error("inlier fraction {fraction:.3} below minimum {minimum:.3}")]
    TooFewInliers { fraction: f64, minimum: f64 },
    #[error("fitted scale {0} is not positive")]
    NonPositiveScale(f64),
    #[error("depth maps and mask differ in shape")]
    ShapeMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold as a fraction of the median context depth.
    pub threshold_frac: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
    /// Hypotheses are scored on at most this many pixels; the final inlier
    /// set always uses every pixel.
    pub score_sample: usize,
    pub max_refits: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 256,
            threshold_frac: 0.05,
            min_inlier_fraction: 0.2,
            seed: 0,
            score_sample: 8192,
            max_refits: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineDepthFit {
    pub scale: f64,
    pub shift: f64,
    pub inlier_count: usize,
    pub inlier_fraction: f64,
    pub residual_median: f64,
}

impl AffineDepthFit {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            shift: 0.0,
            inlier_count: 0,
            inlier_fraction: 1.0,
            residual_median: 0.0,
        }
    }

    #[inline]
    pub fn apply(&self, d: f64) -> f64 {
        self.scale * d + self.shift
    }
}

/// Pixels where both depths are finite and the context is solid enough to
/// trust.
pub fn correspondence_mask(
    pred: &DepthMap,
    ctx: &DepthMap,
    ctx_alpha: &Plane<f64>,
    tau: f64,
) -> Mask {
    assert!(
        pred.same_shape(ctx) && pred.same_shape(ctx_alpha),
        "correspondence buffers differ in shape"
    );
    Plane::from_fn(pred.width(), pred.height(), |x, y| {
        pred.get(x, y).is_finite() && ctx.get(x, y).is_finite() && *ctx_alpha.get(x, y) >= tau
    })
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, &mut hi, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Closed-form least squares `c ≈ s·p + t` over the selected pairs.
fn least_squares(pairs: &[(f64, f64)], select: impl Fn(usize) -> bool) -> Option<(f64, f64)> {
    let mut n = 0.0;
    let (mut mp, mut mc) = (0.0, 0.0);
    for (i, &(p, c)) in pairs.iter().enumerate() {
        if select(i) {
            n += 1.0;
            mp += p;
            mc += c;
        }
    }
    if n < 2.0 {
        return None;
    }
    mp /= n;
    mc /= n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (i, &(p, c)) in pairs.iter().enumerate() {
        if select(i) {
            cov += (p - mp) * (c - mc);
            var += (p - mp) * (p - mp);
        }
    }
    if !(var > 0.0) {
        return None;
    }
    let s = cov / var;
    Some((s, mc - s * mp))
}

fn inliers(pairs: &[(f64, f64)], s: f64, t: f64, eps: f64) -> Vec<bool> {
    pairs
        .iter()
        .map(|&(p, c)| (s * p + t - c).abs() < eps)
        .collect()
}

/// Fits `ctx ≈ s·pred + t` over `valid` pixels.
pub fn fit_affine_depth_ransac(
    pred: &DepthMap,
    ctx: &DepthMap,
    valid: &Mask,
    cfg: &RansacConfig,
) -> Result<AffineDepthFit, AlignError> {
    if !pred.same_shape(ctx) || !pred.same_shape(valid) {
        return Err(AlignError::ShapeMismatch);
    }
    let pairs: Vec<(f64, f64)> = pred
        .as_slice()
        .iter()
        .zip(ctx.as_slice())
        .zip(valid.as_slice())
        .filter(|&((p, c), &v)| v && p.is_finite() && c.is_finite())
        .map(|((&p, &c), _)| (p, c))
        .collect();
    fit_pairs(&pairs, cfg)
}

/// Same as [`fit_affine_depth_ransac`] on explicit `(pred, ctx)` pairs.
pub fn fit_pairs(pairs: &[(f64, f64)], cfg: &RansacConfig) -> Result<AffineDepthFit, AlignError> {
    let n = pairs.len();
    if n < 2 {
        return Err(AlignError::InsufficientCorrespondences { found: n });
    }
    let first = pairs[0].0;
    if pairs.iter().all(|&(p, _)| p == first) {
        return Err(AlignError::ZeroVariance);
    }
    let eps =
        cfg.threshold_frac * median(&mut pairs.iter().map(|&(_, c)| c).collect::<Vec<_>>()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<(usize, usize)> = (0..cfg.iterations.max(1))
        .map(|_| loop {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if pairs[i].0 != pairs[j].0 {
                break (i, j);
            }
        })
        .collect();
    let scoring: Vec<(f64, f64)> = if n > cfg.score_sample {
        (0..cfg.score_sample)
            .map(|_| pairs[rng.random_range(0..n)])
            .collect()
    } else {
        pairs.to_vec()
    };

    let scores: Vec<usize> = samples
        .par_iter()
        .map(|&(i, j)| {
            let (p0, c0) = pairs[i];
            let (p1, c1) = pairs[j];
            let s = (c1 - c0) / (p1 - p0);
            let t = c0 - s * p0;
            scoring
                .iter()
                .filter(|&&(p, c)| (s * p + t - c).abs() < eps)
                .count()
        })
        .collect();
    let mut best = 0;
    for (k, &score) in scores.iter().enumerate() {
        if score > scores[best] {
            best = k;
        }
    }
    let (i, j) = samples[best];
    let mut s = (pairs[j].1 - pairs[i].1) / (pairs[j].0 - pairs[i].0);
    let mut t = pairs[i].1 - s * pairs[i].0;

    let mut mask = inliers(pairs, s, t, eps);
    for _ in 0..cfg.max_refits {
        let Some((s2, t2)) = least_squares(pairs, |k| mask[k]) else {
            break;
        };
        s = s2;
        t = t2;
        let next = inliers(pairs, s, t, eps);
        if next == mask {
            break;
        }
        mask = next;
    }

    let inlier_count = mask.iter().filter(|&&b| b).count();
    let inlier_fraction = inlier_count as f64 / n as f64;
    if inlier_fraction < cfg.min_inlier_fraction {
        return Err(AlignError::TooFewInliers {
            fraction: inlier_fraction,
            minimum: cfg.min_inlier_fraction,
        });
    }
    if !(s > 0.0) {
        return Err(AlignError::NonPositiveScale(s));
    }
    let mut residuals: Vec<f64> = pairs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&(p, c), _)| (s * p + t - c).abs())
        .collect();
    let residual_median = if residuals.is_empty() {
        0.0
    } else {
        median(&mut residuals)
    };
    Ok(AffineDepthFit {
        scale: s,
        shift: t,
        inlier_count,
        inlier_fraction,
        residual_median,
    })
}

/// `s·D + t` per pixel; invalid pixels stay invalid.
pub fn apply_affine_depth(depth: &DepthMap, fit: &AffineDepthFit) -> DepthMap {
    depth.map(|&d| {
        if d.is_finite() {
            fit.apply(d)
        } else {
            f64::NAN
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(w: usize, h: usize) -> DepthMap {
        Plane::from_fn(w, h, |x, y| {
            1.0 + 0.05 * x as f64 + 0.03 * y as f64 + 0.001 * ((x * y) % 7) as f64
        })
    }

    fn all_valid(d: &DepthMap) -> Mask {
        d.map(|_| true)
    }

    #[test]
    fn identity_is_exact() {
        let d = ramp(32, 32);
        let fit =
            fit_affine_depth_ransac(&d, &d, &all_valid(&d), &RansacConfig::default()).unwrap();
        assert_eq!((fit.scale, fit.shift, fit.inlier_fraction), (1.0, 0.0, 1.0));
    }

    #[test]
    fn recovers_affine_with_outliers() {
        let pred = ramp(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = pred.map(|&p| {
            if rng.random::<f64>() < 0.3 {
                rng.random_range(0.0..10.0)
            } else {
                1.5 * p + 0.2
            }
        });
        let fit = fit_affine_depth_ransac(&pred, &ctx, &all_valid(&pred), &RansacConfig::default())
            .unwrap();
        assert!(
            (fit.scale - 1.5).abs() < 1e-3 && (fit.shift - 0.2).abs() < 1e-3,
            "{fit:?}"
        );
    }

    #[test]
    fn constant_prediction_is_degenerate() {
        let pred = Plane::filled(8, 8, 2.0);
        let ctx = ramp(8, 8);
        let err = fit_affine_depth_ransac(&pred, &ctx, &all_valid(&pred), &RansacConfig::default())
            .unwrap_err();
        assert_eq!(err.to_string(), "degenerate: zero depth variance");
    }

    #[test]
    fn too_few_pixels() {
        let pred = ramp(4, 4);
        let mut valid = Plane::filled(4, 4, false);
        *valid.get_mut(1, 1) = true;
        let err =
            fit_affine_depth_ransac(&pred, &pred, &valid, &RansacConfig::default()).unwrap_err();
        assert!(err.to_string().starts_with("insufficient correspondences"));
    }

    #[test]
    fn apply_is_pointwise() {
        let fit = AffineDepthFit {
            scale: 1.5,
            shift: 0.2,
            ..AffineDepthFit::identity()
        };
        let d = Plane::from_vec(2, 1, vec![2.0, f64::NAN]);
        let out = apply_affine_depth(&d, &fit);
        assert!((out.get(0, 0) - 3.2).abs() < 1e-15);
        assert!(out.get(1, 0).is_nan());
        assert_eq!(
            apply_affine_depth(&ramp(5, 5), &AffineDepthFit::identity()),
            ramp(5, 5)
        );
    }

    #[test]
    fn same_seed_same_fit() {
        let pred = ramp(40, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = pred.map(|&p| 0.8 * p - 0.1 + rng.random_range(-0.01..0.01));
        let cfg = RansacConfig::default();
        let a = fit_affine_depth_ransac(&pred, &ctx, &all_valid(&pred), &cfg).unwrap();
        let b = fit_affine_depth_ransac(&pred, &ctx, &all_valid(&pred), &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn composition_recovers_parameters(s in 0.5..2.0f64, t in -1.0..1.0f64) {
            let pred = ramp(24, 24);
            let ctx = apply_affine_depth(&pred, &AffineDepthFit { scale: s, shift: t, ..AffineDepthFit::identity() });
            let fit = fit_affine_depth_ransac(&pred, &ctx, &all_valid(&pred), &RansacConfig::default()).unwrap();
            prop_assert!((fit.scale - s).abs() < 1e-6 && (fit.shift - t).abs() < 1e-6);
        }

        #[test]
        fn robust_up_to_forty_percent(s in 0.5..2.0f64, t in -1.0..1.0f64, frac in 0.0..0.4f64, seed in 0u64..1000) {
            let pred = ramp(48, 48);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ctx = pred.map(|&p| if rng.random::<f64>() < frac { rng.random_range(0.0..12.0) } else { s * p + t });
            let fit = fit_affine_depth_ransac(&pred, &ctx, &all_valid(&pred), &RansacConfig::default()).unwrap();
            prop_assert!((fit.scale - s).abs() < 1e-2 && (fit.shift - t).abs() < 1e-2, "{:?}", fit);
        }
    }
}
