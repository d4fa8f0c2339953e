//! Per-pixel hypothesis-plane placement from a sampling distribution, and the
//! sample-cost score that grades how tightly the previous stage's planes
//! clustered around its depth estimate.

use crate::error::{Error, Result};
use crate::grid::{Grid, Volume};

/// Tolerance on per-pixel probability sums.
pub const DISTRIBUTION_SUM_TOL: f64 = 1e-6;

/// Per-pixel probability vector over the hypothesis planes of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    probs: Volume,
}

impl SamplingDistribution {
    /// Wraps a volume after checking non-negativity and per-pixel sums.
    pub fn new(probs: Volume) -> Result<Self> {
        for y in 0..probs.height() {
            for x in 0..probs.width() {
                let px = probs.pixel(y, x);
                let mut sum = 0.0;
                for &p in px {
                    if p < 0.0 || !p.is_finite() {
                        return Err(Error::Numeric(format!(
                            "distribution entry {p} at ({y}, {x}) is invalid"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOL {
                    return Err(Error::Numeric(format!(
                        "distribution at ({y}, {x}) sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(Self { probs })
    }

    /// The uniform distribution: every entry 1/D. D must be even and >= 2
    /// because plane placement centers on the middle pair of planes.
    pub fn uniform(height: usize, width: usize, plane_count: usize) -> Result<Self> {
        check_plane_count(plane_count)?;
        Ok(Self {
            probs: Volume::filled(height, width, plane_count, 1.0 / plane_count as f64),
        })
    }

    pub fn plane_count(&self) -> usize {
        self.probs.depth()
    }

    pub fn volume(&self) -> &Volume {
        &self.probs
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.probs.pixel(y, x)
    }
}

pub fn check_plane_count(plane_count: usize) -> Result<()> {
    if plane_count < 2 || plane_count % 2 != 0 {
        return Err(Error::Config(format!(
            "plane count must be even and >= 2, got {plane_count}"
        )));
    }
    Ok(())
}

/// Per-pixel depths of the D hypothesis planes of one stage.
#[derive(Debug, Clone)]
pub struct HypothesisPlanes {
    depths: Volume,
    /// Hypothesis range width of this stage in depth units.
    stage_range: f64,
    /// The stage's fraction of the full depth range.
    scale: f64,
}

impl HypothesisPlanes {
    pub fn depths(&self) -> &Volume {
        &self.depths
    }

    pub fn plane_count(&self) -> usize {
        self.depths.depth()
    }

    pub fn stage_range(&self) -> f64 {
        self.stage_range
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.depths.pixel(y, x)
    }

    /// Clamp all plane depths into the camera's usable range. Clamping can
    /// introduce ties at the range boundary; downstream code accepts them.
    pub fn clamp_to(&mut self, d_min: f64, d_max: f64) {
        for v in self.depths.data_mut() {
            *v = v.clamp(d_min, d_max);
        }
    }
}

/// Interval lengths between consecutive planes: each probability times the
/// stage's hypothesis range.
pub fn intervals_from_distribution(dist: &SamplingDistribution, stage_range: f64) -> Result<Volume> {
    if !(stage_range > 0.0 && stage_range.is_finite()) {
        return Err(Error::Config(format!(
            "stage hypothesis range must be positive, got {stage_range}"
        )));
    }
    let mut out = dist.volume().clone();
    for v in out.data_mut() {
        *v *= stage_range;
    }
    Ok(out)
}

/// Place plane depths around the previous estimate from interval lengths.
///
/// With inclusive prefix sums S[j] = sum of intervals 0..=j, the j-th plane
/// sits at prev - (S[D/2-1] + S[D/2]) / 2 + S[j]. The correction term puts
/// the previous depth exactly at the midpoint of the middle plane pair.
pub fn plane_depths(
    prev_depth: &Grid<f64>,
    intervals: &Volume,
    stage_range: f64,
    scale: f64,
) -> Result<HypothesisPlanes> {
    let d = intervals.depth();
    check_plane_count(d)?;
    if prev_depth.height() != intervals.height() || prev_depth.width() != intervals.width() {
        return Err(Error::Shape(format!(
            "depth grid {}x{} does not match interval volume {}x{}",
            prev_depth.height(),
            prev_depth.width(),
            intervals.height(),
            intervals.width()
        )));
    }
    let mut depths = Volume::zeros(intervals.height(), intervals.width(), d);
    for y in 0..intervals.height() {
        for x in 0..intervals.width() {
            let deltas = intervals.pixel(y, x);
            let prev = prev_depth.at(y, x);
            let out = depths.pixel_mut(y, x);
            let mut prefix = 0.0;
            for (j, &dd) in deltas.iter().enumerate() {
                debug_assert!(dd >= 0.0, "intervals must be non-negative");
                prefix += dd;
                out[j] = prefix;
            }
            let correction = (out[d / 2 - 1] + out[d / 2]) / 2.0;
            for v in out.iter_mut() {
                *v += prev - correction;
            }
        }
    }
    Ok(HypothesisPlanes {
        depths,
        stage_range,
        scale,
    })
}

/// Controls how plane deviations are scaled inside the sample-cost exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeviationNorm {
    /// Divide (L - L̂) by the stage's hypothesis range before squaring, so
    /// the exponent stays in [0, 1] regardless of depth units.
    #[default]
    Range,
    /// The literal form with raw depth differences. Only safe for small
    /// metric ranges; large ranges overflow the exponential.
    Literal,
}

/// Per-pixel, per-plane sampling-quality score of the previous stage.
///
/// Each plane's raw score is exp(sqrt((L_j - L̂)^2 * P_j)) and scores are
/// normalized to sum to one over planes (computed with max-subtraction).
/// A plane far from the estimate that still carried probability mass scores
/// high; when every plane sat on the estimate the result is exactly uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCost {
    scores: Volume,
}

impl SampleCost {
    pub fn volume(&self) -> &Volume {
        &self.scores
    }

    pub fn plane_count(&self) -> usize {
        self.scores.depth()
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.scores.pixel(y, x)
    }

    /// Wrap an externally produced score volume (used by inter-stage
    /// upsampling); entries must be positive and sum to one per pixel.
    pub fn from_volume(scores: Volume) -> Result<Self> {
        for y in 0..scores.height() {
            for x in 0..scores.width() {
                let px = scores.pixel(y, x);
                let sum: f64 = px.iter().sum();
                if px.iter().any(|&v| v <= 0.0 || !v.is_finite())
                    || (sum - 1.0).abs() > DISTRIBUTION_SUM_TOL
                {
                    return Err(Error::Numeric(format!(
                        "sample cost at ({y}, {x}) is not a positive unit-sum vector"
                    )));
                }
            }
        }
        Ok(Self { scores })
    }
}

/// Score the previous stage's sampling quality (see [`SampleCost`]).
pub fn sample_cost(
    planes_prev: &HypothesisPlanes,
    depth_prev: &Grid<f64>,
    prob_prev: &Volume,
    norm: DeviationNorm,
) -> Result<SampleCost> {
    if !planes_prev.depths().same_shape(prob_prev) {
        return Err(Error::Shape(
            "plane volume and probability volume shapes differ".into(),
        ));
    }
    if depth_prev.height() != prob_prev.height() || depth_prev.width() != prob_prev.width() {
        return Err(Error::Shape("depth grid does not match volumes".into()));
    }
    let scale = match norm {
        DeviationNorm::Range => planes_prev.stage_range(),
        DeviationNorm::Literal => 1.0,
    };
    if !(scale > 0.0) {
        return Err(Error::Config("deviation scale must be positive".into()));
    }
    let d = prob_prev.depth();
    let mut scores = Volume::zeros(prob_prev.height(), prob_prev.width(), d);
    let mut exponents = vec![0.0; d];
    for y in 0..prob_prev.height() {
        for x in 0..prob_prev.width() {
            let planes = planes_prev.pixel(y, x);
            let probs = prob_prev.pixel(y, x);
            let estimate = depth_prev.at(y, x);
            for j in 0..d {
                let dev = (planes[j] - estimate) / scale;
                exponents[j] = (dev * dev * probs[j]).sqrt();
            }
            let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = scores.pixel_mut(y, x);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (exponents[j] - max).exp();
                out[j] = e;
                sum += e;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
    }
    Ok(SampleCost { scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_pixel_dist(p: &[f64]) -> SamplingDistribution {
        SamplingDistribution::new(Volume::from_vec(1, 1, p.len(), p.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn uniform_distribution_by_definition() {
        let u = SamplingDistribution::uniform(2, 2, 4).unwrap();
        assert!(u.pixel(1, 1).iter().all(|&p| p == 0.25));
        let u48 = SamplingDistribution::uniform(1, 1, 48).unwrap();
        assert_eq!(u48.plane_count(), 48);
        assert!(u48.pixel(0, 0).iter().all(|&p| (p - 1.0 / 48.0).abs() < 1e-15));
    }

    #[test]
    fn odd_or_degenerate_plane_counts_rejected() {
        assert!(SamplingDistribution::uniform(1, 1, 3).is_err());
        assert!(SamplingDistribution::uniform(1, 1, 0).is_err());
        assert!(SamplingDistribution::uniform(1, 1, 1).is_err());
    }

    #[test]
    fn intervals_scale_probabilities() {
        let d = single_pixel_dist(&[0.25; 4]);
        let iv = intervals_from_distribution(&d, 8.0).unwrap();
        assert_eq!(iv.pixel(0, 0), &[2.0, 2.0, 2.0, 2.0]);

        let d = single_pixel_dist(&[0.7, 0.1, 0.1, 0.1]);
        let iv = intervals_from_distribution(&d, 10.0).unwrap();
        let expect = [7.0, 1.0, 1.0, 1.0];
        for (a, b) in iv.pixel(0, 0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(intervals_from_distribution(&d, 0.0).is_err());
        assert!(intervals_from_distribution(&d, -1.0).is_err());
    }

    #[test]
    fn interval_sums_equal_stage_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let d = 2 * rng.gen_range(1..12);
            let mut p: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= sum);
            let range = rng.gen_range(0.1..100.0);
            let iv = intervals_from_distribution(&single_pixel_dist(&p), range).unwrap();
            let total: f64 = iv.pixel(0, 0).iter().sum();
            assert!((total - range).abs() < 1e-6 * range.max(1.0));
        }
    }

    #[test]
    fn uniform_intervals_give_symmetric_planes() {
        let prev = Grid::filled(1, 1, 10.0);
        let iv = Volume::from_vec(1, 1, 4, vec![2.0; 4]).unwrap();
        let planes = plane_depths(&prev, &iv, 8.0, 1.0).unwrap();
        assert_eq!(planes.pixel(0, 0), &[7.0, 9.0, 11.0, 13.0]);
        let mid = (planes.pixel(0, 0)[1] + planes.pixel(0, 0)[2]) / 2.0;
        assert_eq!(mid, 10.0);
    }

    #[test]
    fn prefix_sum_hand_example() {
        // Intervals (1, 2, 3, 4) around prev = 10: prefix sums (1, 3, 6, 10),
        // correction (3 + 6) / 2 = 4.5, planes (6.5, 8.5, 11.5, 15.5).
        let prev = Grid::filled(1, 1, 10.0);
        let iv = Volume::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let planes = plane_depths(&prev, &iv, 10.0, 1.0).unwrap();
        let expect = [6.5, 8.5, 11.5, 15.5];
        for (a, b) in planes.pixel(0, 0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let d = [4usize, 8, 16, 48][rng.gen_range(0..4)];
            let iv: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..5.0)).collect();
            let prev_val = rng.gen_range(0.1..1000.0);
            let prev = Grid::filled(1, 1, prev_val);
            let vol = Volume::from_vec(1, 1, d, iv).unwrap();
            let planes = plane_depths(&prev, &vol, 10.0, 1.0).unwrap();
            let px = planes.pixel(0, 0);
            let mid = (px[d / 2 - 1] + px[d / 2]) / 2.0;
            assert!(
                (mid - prev_val).abs() <= 1e-12 * prev_val.abs().max(1.0),
                "centering violated: mid={mid}, prev={prev_val}"
            );
        }
    }

    #[test]
    fn strictly_positive_intervals_give_increasing_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let d = 2 * rng.gen_range(1..10);
            let iv: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..2.0)).collect();
            let prev = Grid::filled(1, 1, 5.0);
            let vol = Volume::from_vec(1, 1, d, iv).unwrap();
            let planes = plane_depths(&prev, &vol, 1.0, 1.0).unwrap();
            let px = planes.pixel(0, 0);
            for j in 1..d {
                assert!(px[j] > px[j - 1]);
            }
        }
    }

    #[test]
    fn plane_span_equals_range_minus_first_interval() {
        // Span = S[D-1] - S[0] = stage_range - intervals[0]; in particular
        // the span never exceeds the stage range.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let d = 8;
            let mut p: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= sum);
            let range = 12.0;
            let iv = intervals_from_distribution(&single_pixel_dist(&p), range).unwrap();
            let prev = Grid::filled(1, 1, 50.0);
            let planes = plane_depths(&prev, &iv, range, 1.0).unwrap();
            let px = planes.pixel(0, 0);
            let span = px[d - 1] - px[0];
            assert!((span - (range - iv.at(0, 0, 0))).abs() < 1e-9);
            assert!(span <= range + 1e-12);
        }
    }

    #[test]
    fn zero_deviation_yields_uniform_sample_cost() {
        let prev = Grid::filled(1, 1, 4.0);
        let iv = Volume::from_vec(1, 1, 4, vec![0.0; 4]).unwrap();
        let planes = plane_depths(&prev, &iv, 8.0, 1.0).unwrap();
        // All planes collapse onto the estimate.
        assert!(planes.pixel(0, 0).iter().all(|&l| (l - 4.0).abs() < 1e-12));
        let probs = Volume::filled(1, 1, 4, 0.25);
        let sc = sample_cost(&planes, &prev, &probs, DeviationNorm::Range).unwrap();
        assert!(sc.pixel(0, 0).iter().all(|&s| (s - 0.25).abs() < 1e-12));
    }

    #[test]
    fn sample_cost_matches_scalar_formula() {
        // One-hot probability on plane 0, planes at L̂ + (-3, -1, 1, 3),
        // range 8: exponents are (3/8, 0, 0, 0).
        let prev = Grid::filled(1, 1, 10.0);
        let iv = Volume::from_vec(1, 1, 4, vec![2.0; 4]).unwrap();
        let planes = plane_depths(&prev, &iv, 8.0, 1.0).unwrap();
        let probs = Volume::from_vec(1, 1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let sc = sample_cost(&planes, &prev, &probs, DeviationNorm::Range).unwrap();

        // Direct evaluation of the formula, no stabilization.
        let raw: Vec<f64> = [3.0f64 / 8.0, 0.0, 0.0, 0.0].iter().map(|&e| e.exp()).collect();
        let total: f64 = raw.iter().sum();
        for (got, want) in sc.pixel(0, 0).iter().zip(raw.iter().map(|r| r / total)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_cost_sums_to_one_and_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let d = 2 * rng.gen_range(1..10);
            let iv: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..3.0)).collect();
            let prev = Grid::filled(1, 1, rng.gen_range(1.0..9.0));
            let vol = Volume::from_vec(1, 1, d, iv).unwrap();
            let planes = plane_depths(&prev, &vol, 6.0, 1.0).unwrap();
            let mut p: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let probs = Volume::from_vec(1, 1, d, p).unwrap();
            let sc = sample_cost(&planes, &prev, &probs, DeviationNorm::Range).unwrap();
            let px = sc.pixel(0, 0);
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(px.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn doubling_deviations_spreads_sample_cost() {
        // Larger plane deviations push the score distribution further from
        // uniform: entropy strictly decreases.
        let entropy = |p: &[f64]| -> f64 {
            p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let d = 8usize;
            let prev_val = 5.0;
            let prev = Grid::filled(1, 1, prev_val);
            let mut p: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let probs = Volume::from_vec(1, 1, d, p).unwrap();

            let base: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let make_planes = |scale: f64| {
                let mut vol = Volume::zeros(1, 1, d);
                for (j, v) in vol.pixel_mut(0, 0).iter_mut().enumerate() {
                    *v = prev_val + scale * base[j];
                }
                HypothesisPlanes {
                    depths: vol,
                    stage_range: 8.0,
                    scale: 1.0,
                }
            };
            let sc1 = sample_cost(&make_planes(1.0), &prev, &probs, DeviationNorm::Range).unwrap();
            let sc2 = sample_cost(&make_planes(2.0), &prev, &probs, DeviationNorm::Range).unwrap();
            let h1 = entropy(sc1.pixel(0, 0));
            let h2 = entropy(sc2.pixel(0, 0));
            assert!(h2 < h1 + 1e-12, "doubling deviations should reduce entropy");
        }
    }

    #[test]
    fn literal_norm_uses_raw_depth_units() {
        let prev = Grid::filled(1, 1, 10.0);
        let iv = Volume::from_vec(1, 1, 4, vec![2.0; 4]).unwrap();
        let planes = plane_depths(&prev, &iv, 8.0, 1.0).unwrap();
        let probs = Volume::from_vec(1, 1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let sc = sample_cost(&planes, &prev, &probs, DeviationNorm::Literal).unwrap();
        let raw: Vec<f64> = [3.0f64, 0.0, 0.0, 0.0].iter().map(|&e| e.exp()).collect();
        let total: f64 = raw.iter().sum();
        for (got, want) in sc.pixel(0, 0).iter().zip(raw.iter().map(|r| r / total)) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
