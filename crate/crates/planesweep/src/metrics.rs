//! Depth-map quality metrics against ground truth.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Error statistics over the valid pixels of one depth map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub mean_absolute_error: f64,
    pub rmse: f64,
    /// Fraction of pixels with |error| within 1x, 2x and 4x the reference
    /// spacing (the finest stage's plane spacing by convention).
    pub within_spacing: [f64; 3],
    pub valid_pixels: usize,
}

/// Finest-stage plane spacing for a depth span: the stage-4 hypothesis range
/// fraction over its plane count under the default cascade configuration.
pub fn default_final_spacing(depth_span: f64) -> f64 {
    0.04 * depth_span / 8.0
}

/// Compare an estimated depth grid to ground truth over a validity mask.
pub fn evaluate_depth(
    estimate: &Grid<f64>,
    ground_truth: &Grid<f64>,
    mask: &Grid<bool>,
    spacing: f64,
) -> Result<DepthMetrics> {
    if !estimate.same_shape(ground_truth) || !estimate.same_shape(mask) {
        return Err(Error::Shape(format!(
            "metric grids disagree: est {}x{}, gt {}x{}, mask {}x{}",
            estimate.height(),
            estimate.width(),
            ground_truth.height(),
            ground_truth.width(),
            mask.height(),
            mask.width()
        )));
    }
    if !(spacing > 0.0) {
        return Err(Error::Config("spacing must be positive".into()));
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut within = [0usize; 3];
    let mut n = 0usize;
    for ((&e, &g), &m) in estimate
        .data()
        .iter()
        .zip(ground_truth.data())
        .zip(mask.data())
    {
        if !m {
            continue;
        }
        let err = (e - g).abs();
        abs_sum += err;
        sq_sum += err * err;
        for (slot, mult) in within.iter_mut().zip([1.0, 2.0, 4.0]) {
            if err <= mult * spacing {
                *slot += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Numeric("no valid pixels to evaluate".into()));
    }
    Ok(DepthMetrics {
        mean_absolute_error: abs_sum / n as f64,
        rmse: (sq_sum / n as f64).sqrt(),
        within_spacing: [
            within[0] as f64 / n as f64,
            within[1] as f64 / n as f64,
            within[2] as f64 / n as f64,
        ],
        valid_pixels: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn perfect_estimate_scores_zero() {
        let gt = Grid::from_fn(4, 4, |y, x| 1.0 + (y * 4 + x) as f64);
        let mask = Grid::filled(4, 4, true);
        let m = evaluate_depth(&gt, &gt, &mask, 0.1).unwrap();
        assert_eq!(m.mean_absolute_error, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.within_spacing, [1.0, 1.0, 1.0]);
        assert_eq!(m.valid_pixels, 16);
    }

    #[test]
    fn constant_offset_gives_that_mae() {
        let gt = Grid::filled(3, 3, 5.0);
        let est = Grid::filled(3, 3, 5.25);
        let mask = Grid::filled(3, 3, true);
        let m = evaluate_depth(&est, &gt, &mask, 0.1).unwrap();
        assert!((m.mean_absolute_error - 0.25).abs() < 1e-15);
        assert!((m.rmse - 0.25).abs() < 1e-15);
        assert_eq!(m.within_spacing, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn random_case_matches_scalar_recomputation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let gt = Grid::from_fn(6, 5, |_, _| rng.gen_range(0.0..1.0));
        let est = Grid::from_fn(6, 5, |_, _| rng.gen_range(0.0..1.0));
        let mask = Grid::from_fn(6, 5, |_, _| rng.gen_bool(0.8));
        let spacing = 0.05;
        let m = evaluate_depth(&est, &gt, &mask, spacing).unwrap();

        // Straight-line scalar recomputation.
        let mut errs = Vec::new();
        for y in 0..6 {
            for x in 0..5 {
                if *mask.get(y, x) {
                    errs.push((est.at(y, x) - gt.at(y, x)).abs());
                }
            }
        }
        let mae = errs.iter().sum::<f64>() / errs.len() as f64;
        let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!((m.mean_absolute_error - mae).abs() < 1e-15);
        assert!((m.rmse - rmse).abs() < 1e-15);
        let frac1 = errs.iter().filter(|&&e| e <= spacing).count() as f64 / errs.len() as f64;
        assert_eq!(m.within_spacing[0], frac1);
    }

    #[test]
    fn empty_mask_is_a_numeric_error() {
        let g = Grid::filled(2, 2, 1.0);
        let mask = Grid::filled(2, 2, false);
        assert!(evaluate_depth(&g, &g, &mask, 0.1).is_err());
    }
}
