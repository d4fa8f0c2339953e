//! The four-stage coarse-to-fine pipeline: uniform sweep at 1/8 resolution,
//! then three refinement stages that re-sample hypothesis planes around the
//! upsampled previous estimate with shrinking ranges, plus the multi-stage
//! training loss.

use crate::costvol::{build_cost_volume, depth_regression, regularize, CostMetric, DepthEstimate, RegularizerMode};
use crate::error::{Error, Result};
use crate::geometry::{CameraView, FeatureExtractor};
use crate::grid::Grid;
use crate::sampler::{DistributionProducer, SamplerInput};
use crate::sampling::{
    check_plane_count, intervals_from_distribution, plane_depths, sample_cost, DeviationNorm,
    SampleCost, SamplingDistribution,
};

/// Resolution divisors of the four stages, coarse to fine.
pub const STAGE_FACTORS: [usize; 4] = [8, 4, 2, 1];

/// Numeric knobs of the cascade. The plane counts, range scales and loss
/// weights default to (48, 16, 8, 8), (0.38, 0.16, 0.04) and
/// (0.25, 0.5, 1, 2); the first stage always sweeps the full depth range.
#[derive(Debug, Clone)]
pub struct CascadeConfig {
    pub plane_counts: [usize; 4],
    pub range_scales: [f64; 3],
    pub loss_weights: [f64; 4],
    pub cost_metric: CostMetric,
    pub deviation_norm: DeviationNorm,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            plane_counts: [48, 16, 8, 8],
            range_scales: [0.38, 0.16, 0.04],
            loss_weights: [0.25, 0.5, 1.0, 2.0],
            cost_metric: CostMetric::default(),
            deviation_norm: DeviationNorm::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        for &d in &self.plane_counts {
            check_plane_count(d)?;
        }
        for &r in &self.range_scales {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!(
                    "range scales must lie in (0, 1], got {r}"
                )));
            }
        }
        for &l in &self.loss_weights {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("loss weight {l} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Hypothesis range width of each stage for a full range `span`
    /// (stage 1 sweeps everything).
    pub fn stage_ranges(&self, span: f64) -> [f64; 4] {
        [
            span,
            self.range_scales[0] * span,
            self.range_scales[1] * span,
            self.range_scales[2] * span,
        ]
    }
}

/// Everything needed to run the pipeline: config plus the pluggable feature
/// extractor, distribution producer and cost regularizer.
pub struct CascadeEngine<'a> {
    pub config: CascadeConfig,
    pub extractor: FeatureExtractor,
    pub producer: &'a dyn DistributionProducer,
    pub regularizer: RegularizerMode,
}

impl<'a> CascadeEngine<'a> {
    /// Run all four stages for one reference view.
    ///
    /// `ref_view` and `sources` carry the raw single-channel images in their
    /// feature grids at full resolution; pyramids are extracted internally.
    /// Returns the four stage estimates, finest (full resolution) last.
    pub fn run(&self, ref_view: &CameraView, sources: &[CameraView]) -> Result<Vec<DepthEstimate>> {
        self.config.validate()?;
        if sources.is_empty() {
            return Err(Error::Config("cascade needs at least one source view".into()));
        }
        let (h, w, c) = ref_view.features.shape();
        if c != 1 {
            return Err(Error::Shape(
                "cascade input views must carry single-channel raw images".into(),
            ));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "image dimensions {h}x{w} must be divisible by 8"
            )));
        }
        let (d_min, d_max) = ref_view.camera.depth_range();
        for (i, src) in sources.iter().enumerate() {
            if src.features.shape() != (h, w, 1) {
                return Err(Error::Shape(format!("source {i} image dimensions differ")));
            }
            let (s_min, s_max) = src.camera.depth_range();
            if (s_min - d_min).abs() > 1e-9 || (s_max - d_max).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "source {i} depth range ({s_min}, {s_max}) differs from reference"
                )));
            }
        }
        let span = d_max - d_min;
        let stage_ranges = self.config.stage_ranges(span);

        // Image grids (luminance) and feature pyramids per view.
        let ref_image = image_of(ref_view);
        let ref_pyramid = self.extractor.extract(&ref_image)?;
        let src_pyramids = sources
            .iter()
            .map(|v| self.extractor.extract(&image_of(v)))
            .collect::<Result<Vec<_>>>()?;
        // Stage-resolution reference luminance for the sampler, in [0, 1].
        let lum_levels: [Grid<f64>; 4] = {
            let mut levels = Vec::with_capacity(4);
            for factor in STAGE_FACTORS {
                let mut lum = ref_image.downsample(factor)?;
                for v in lum.data_mut() {
                    *v /= 255.0;
                }
                levels.push(lum);
            }
            levels.try_into().expect("four levels")
        };

        let mut estimates: Vec<DepthEstimate> = Vec::with_capacity(4);
        let mut carried_cost: Option<SampleCost> = None;

        for stage in 0..4 {
            let factor = STAGE_FACTORS[stage];
            let scale = 1.0 / factor as f64;
            let plane_count = self.config.plane_counts[stage];
            let stage_range = stage_ranges[stage];
            let (sh, sw) = (h / factor, w / factor);

            let ref_stage = CameraView::new(
                ref_view.camera.scaled(scale),
                ref_pyramid.level(stage).clone(),
            );
            let src_stage: Vec<CameraView> = sources
                .iter()
                .zip(&src_pyramids)
                .map(|(v, pyr)| CameraView::new(v.camera.scaled(scale), pyr.level(stage).clone()))
                .collect();

            let (prev_depth, distribution) = if stage == 0 {
                // Uniform initialization over the full range, centered on it.
                let center = Grid::filled(sh, sw, (d_min + d_max) / 2.0);
                let dist = SamplingDistribution::uniform(sh, sw, plane_count)?;
                (center, dist)
            } else {
                let prev = estimates.last().expect("previous stage");
                let prev_depth = prev.depth.upsample_bilinear_2x();
                let cost_prev = carried_cost.take().expect("previous sample cost");
                let cost_up = SampleCost::from_volume(cost_prev.volume().upsample_nearest_2x())?;
                let mut depth_norm = prev_depth.clone();
                for v in depth_norm.data_mut() {
                    *v = ((*v - d_min) / span).clamp(0.0, 1.0);
                }
                let input = SamplerInput::new(&cost_up, &depth_norm, &lum_levels[stage])?;
                let dist = self.producer.produce(&input, plane_count)?;
                (prev_depth, dist)
            };

            let intervals = intervals_from_distribution(&distribution, stage_range)?;
            let mut planes = plane_depths(&prev_depth, &intervals, stage_range, scale_of(stage, &self.config))?;
            planes.clamp_to(d_min, d_max);

            let volume = build_cost_volume(&ref_stage, &src_stage, &planes, self.config.cost_metric)?;
            let logits = regularize(&volume, &self.regularizer);
            let estimate = depth_regression(&logits, &planes)?;

            let bad = estimate.depth.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFiniteDepth {
                    stage: stage + 1,
                    pixels: bad,
                });
            }

            if stage < 3 {
                carried_cost = Some(sample_cost(
                    &planes,
                    &estimate.depth,
                    &estimate.prob,
                    self.config.deviation_norm,
                )?);
            }
            estimates.push(estimate);
        }
        Ok(estimates)
    }
}

fn image_of(view: &CameraView) -> Grid<f64> {
    let (h, w, _) = view.features.shape();
    Grid::from_fn(h, w, |y, x| view.features.at(y, x, 0))
}

fn scale_of(stage: usize, cfg: &CascadeConfig) -> f64 {
    if stage == 0 {
        1.0
    } else {
        cfg.range_scales[stage - 1]
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// 0.5 x^2 inside the unit interval, |x| - 0.5 outside; continuous at 1.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Per-stage and total training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeLoss {
    pub total: f64,
    pub per_stage: [f64; 4],
    /// Stages that had no valid ground-truth pixel (contributed zero).
    pub empty_stages: [bool; 4],
}

/// Weighted sum over stages of the mean smooth-L1 depth error on valid
/// pixels. A stage with no valid pixels contributes zero and is flagged.
pub fn cascade_loss(
    estimates: &[DepthEstimate],
    ground_truth: &[Grid<f64>],
    valid_masks: &[Grid<bool>],
    weights: [f64; 4],
) -> Result<CascadeLoss> {
    if estimates.len() != 4 || ground_truth.len() != 4 || valid_masks.len() != 4 {
        return Err(Error::Shape("loss expects exactly four stages".into()));
    }
    let mut per_stage = [0.0; 4];
    let mut empty = [false; 4];
    let mut total = 0.0;
    for k in 0..4 {
        let est = &estimates[k].depth;
        let gt = &ground_truth[k];
        let mask = &valid_masks[k];
        if !est.same_shape(gt) || !est.same_shape(mask) {
            return Err(Error::Shape(format!("stage {} shapes disagree", k + 1)));
        }
        let mut acc = 0.0;
        let mut n = 0usize;
        for (i, &valid) in mask.data().iter().enumerate() {
            if valid {
                acc += smooth_l1(est.data()[i] - gt.data()[i]);
                n += 1;
            }
        }
        if n == 0 {
            empty[k] = true;
            continue;
        }
        per_stage[k] = acc / n as f64;
        total += weights[k] * per_stage[k];
    }
    Ok(CascadeLoss {
        total,
        per_stage,
        empty_stages: empty,
    })
}

/// Ground truth downsampled to the four stage resolutions by area averaging;
/// a coarse pixel is invalid when any contributing pixel is invalid.
pub fn ground_truth_pyramid(
    gt: &Grid<f64>,
    mask: &Grid<bool>,
) -> Result<[(Grid<f64>, Grid<bool>); 4]> {
    if !gt.same_shape(mask) {
        return Err(Error::Shape("ground truth and mask shapes differ".into()));
    }
    if gt.height() % 8 != 0 || gt.width() % 8 != 0 {
        return Err(Error::Shape("ground truth dimensions must be divisible by 8".into()));
    }
    let mut levels = Vec::with_capacity(4);
    for factor in STAGE_FACTORS {
        let (oh, ow) = (gt.height() / factor, gt.width() / factor);
        let mut level = Grid::zeros(oh, ow);
        let mut level_mask = Grid::filled(oh, ow, true);
        for y in 0..oh {
            for x in 0..ow {
                let mut sum = 0.0;
                let mut ok = true;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let (sy, sx) = (y * factor + dy, x * factor + dx);
                        if !*mask.get(sy, sx) {
                            ok = false;
                        }
                        sum += gt.at(sy, sx);
                    }
                }
                level_mask.set(y, x, ok);
                level.set(y, x, if ok { sum / (factor * factor) as f64 } else { 0.0 });
            }
        }
        levels.push((level, level_mask));
    }
    Ok(levels.try_into().expect("four levels"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costvol::FilterKernel;
    use crate::geometry::Camera;
    use crate::grid::Volume;
    use crate::sampler::UniformProducer;
    use nalgebra::{Matrix3, Matrix4};

    fn camera(f: f64, cx: f64, cy: f64, tx: f64, ty: f64, range: (f64, f64)) -> Camera {
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        let mut t = Matrix4::identity();
        t[(0, 3)] = tx;
        t[(1, 3)] = ty;
        Camera::new(k, t, range).unwrap()
    }

    fn render_view(cam: &Camera, h: usize, w: usize, depth: f64) -> CameraView {
        let mut img = Volume::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                let p = cam.lift_to_world(x as f64, y as f64, depth);
                let v = 128.0
                    + 55.0 * (2.1 * p.x).sin()
                    + 45.0 * (1.7 * p.y).cos()
                    + 25.0 * (3.3 * (p.x + 0.7 * p.y)).sin();
                img.set(y, x, 0, v);
            }
        }
        CameraView::new(cam.clone(), img)
    }

    fn plane_scene(h: usize, w: usize, depth: f64) -> (CameraView, Vec<CameraView>) {
        let range = (depth - 1.5, depth + 1.5);
        let f = w as f64 * 1.2;
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let ref_view = render_view(&camera(f, cx, cy, 0.0, 0.0, range), h, w, depth);
        let sources = vec![
            render_view(&camera(f, cx, cy, 0.6, 0.1, range), h, w, depth),
            render_view(&camera(f, cx, cy, -0.5, 0.4, range), h, w, depth),
        ];
        (ref_view, sources)
    }

    fn engine(cfg: CascadeConfig) -> CascadeEngine<'static> {
        CascadeEngine {
            config: cfg,
            extractor: FeatureExtractor::Photometric,
            producer: &UniformProducer,
            regularizer: RegularizerMode::Filter {
                radii: [1, 1, 1],
                kernel: FilterKernel::Box,
            },
        }
    }

    #[test]
    fn default_config_matches_published_settings() {
        let cfg = CascadeConfig::default();
        assert_eq!(cfg.plane_counts, [48, 16, 8, 8]);
        assert_eq!(cfg.range_scales, [0.38, 0.16, 0.04]);
        assert_eq!(cfg.loss_weights, [0.25, 0.5, 1.0, 2.0]);
        cfg.validate().unwrap();
        // Stage ranges shrink strictly.
        let ranges = cfg.stage_ranges(10.0);
        for k in 1..4 {
            assert!(ranges[k] < ranges[k - 1]);
        }
    }

    #[test]
    fn config_rejects_odd_planes_and_bad_scales() {
        let mut cfg = CascadeConfig::default();
        cfg.plane_counts[1] = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = CascadeConfig::default();
        cfg.range_scales[0] = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = CascadeConfig::default();
        cfg.range_scales[2] = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_volume_shapes_follow_config() {
        let (ref_view, sources) = plane_scene(64, 80, 5.0);
        let eng = engine(CascadeConfig::default());
        let estimates = eng.run(&ref_view, &sources).unwrap();
        let shapes: Vec<_> = estimates.iter().map(|e| e.prob.shape()).collect();
        assert_eq!(
            shapes,
            vec![(8, 10, 48), (16, 20, 16), (32, 40, 8), (64, 80, 8)]
        );
        // Final depth map matches the input resolution.
        assert_eq!(estimates[3].depth.height(), 64);
        assert_eq!(estimates[3].depth.width(), 80);
    }

    #[test]
    fn cascade_recovers_a_fronto_parallel_plane() {
        let scene = crate::synthetic::SyntheticScene::plane(1);
        let rendered = crate::synthetic::generate(&scene, 5, 64, 80).unwrap();
        let ref_view =
            CameraView::from_image(rendered.views[0].camera.clone(), &rendered.views[0].image);
        let sources: Vec<CameraView> = rendered.pairs[0]
            .1
            .iter()
            .map(|&s| {
                CameraView::from_image(rendered.views[s].camera.clone(), &rendered.views[s].image)
            })
            .collect();
        let eng = engine(CascadeConfig::default());
        let estimates = eng.run(&ref_view, &sources).unwrap();
        let final_est = &estimates[3];
        let gt = &rendered.gt_depths[0];
        let mae: f64 = final_est
            .depth
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&d, &g)| (d - g).abs())
            .sum::<f64>()
            / gt.data().len() as f64;
        // Stage-4 plane spacing: 0.04 * range / 8.
        let spacing = 0.04 * (6.4 - 1.6) / 8.0;
        assert!(
            mae < spacing,
            "cascade MAE {mae} should beat stage-4 spacing {spacing}"
        );
    }

    #[test]
    fn cascade_is_deterministic() {
        let (ref_view, sources) = plane_scene(16, 16, 4.5);
        let eng = engine(CascadeConfig::default());
        let a = eng.run(&ref_view, &sources).unwrap();
        let b = eng.run(&ref_view, &sources).unwrap();
        for (ea, eb) in a.iter().zip(&b) {
            assert_eq!(ea.depth.data(), eb.depth.data());
            assert_eq!(ea.prob.data(), eb.prob.data());
        }
    }

    #[test]
    fn cascade_rejects_bad_inputs() {
        let (ref_view, sources) = plane_scene(16, 16, 4.5);
        let eng = engine(CascadeConfig::default());
        // no sources
        assert!(eng.run(&ref_view, &[]).is_err());
        // non-divisible dims
        let cam = camera(20.0, 6.0, 6.0, 0.0, 0.0, (3.0, 6.0));
        let odd = CameraView::new(cam.clone(), Volume::zeros(12, 12, 1));
        assert!(eng.run(&odd, &sources).is_err());
        // mismatched depth range
        let mut bad_src = sources[0].clone();
        bad_src.camera = camera(20.0, 8.0, 8.0, 0.5, 0.0, (1.0, 9.0));
        assert!(eng.run(&ref_view, &[bad_src]).is_err());
    }

    #[test]
    fn smooth_l1_matches_formula() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        // Continuity at |x| = 1: both branches give 0.5.
        assert!((smooth_l1(1.0 - 1e-12) - 0.5).abs() < 1e-9);
        assert_eq!(smooth_l1(1.0), 0.5);
    }

    fn single_pixel_estimate(depth: f64) -> DepthEstimate {
        DepthEstimate {
            depth: Grid::filled(1, 1, depth),
            prob: Volume::filled(1, 1, 2, 0.5),
            confidence: Grid::filled(1, 1, 0.5),
        }
    }

    #[test]
    fn loss_hand_example() {
        // Errors of 0.5 at every stage with the default weights:
        // 0.125 * (0.25 + 0.5 + 1 + 2) = 0.46875.
        let estimates: Vec<_> = (0..4).map(|_| single_pixel_estimate(3.5)).collect();
        let gts: Vec<_> = (0..4).map(|_| Grid::filled(1, 1, 3.0)).collect();
        let masks: Vec<_> = (0..4).map(|_| Grid::filled(1, 1, true)).collect();
        let loss = cascade_loss(&estimates, &gts, &masks, [0.25, 0.5, 1.0, 2.0]).unwrap();
        assert!((loss.total - 0.46875).abs() < 1e-15);
        assert_eq!(loss.empty_stages, [false; 4]);
    }

    #[test]
    fn perfect_estimates_give_zero_loss() {
        let estimates: Vec<_> = (0..4).map(|_| single_pixel_estimate(3.0)).collect();
        let gts: Vec<_> = (0..4).map(|_| Grid::filled(1, 1, 3.0)).collect();
        let masks: Vec<_> = (0..4).map(|_| Grid::filled(1, 1, true)).collect();
        let loss = cascade_loss(&estimates, &gts, &masks, [0.25, 0.5, 1.0, 2.0]).unwrap();
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    fn empty_stage_contributes_zero_and_is_flagged() {
        let estimates: Vec<_> = (0..4).map(|_| single_pixel_estimate(9.0)).collect();
        let gts: Vec<_> = (0..4).map(|_| Grid::filled(1, 1, 3.0)).collect();
        let mut masks: Vec<_> = (0..4).map(|_| Grid::filled(1, 1, true)).collect();
        masks[2] = Grid::filled(1, 1, false);
        let loss = cascade_loss(&estimates, &gts, &masks, [0.25, 0.5, 1.0, 2.0]).unwrap();
        assert!(loss.empty_stages[2]);
        assert_eq!(loss.per_stage[2], 0.0);
        assert!(loss.total > 0.0);
    }

    #[test]
    fn gt_pyramid_averages_and_poisons_invalid() {
        let gt = Grid::from_fn(8, 8, |y, x| (y * 8 + x) as f64);
        let mut mask = Grid::filled(8, 8, true);
        mask.set(0, 0, false);
        let levels = ground_truth_pyramid(&gt, &mask).unwrap();
        // Coarsest level: 1x1; the invalid pixel poisons the whole block.
        assert!(!*levels[0].1.get(0, 0));
        // Finest level: untouched copy.
        assert_eq!(levels[3].0.at(3, 5), gt.at(3, 5));
        assert!(!*levels[3].1.get(0, 0));
        // Half resolution: block (1,1) averages pixels (2..4, 2..4).
        let expect = (18.0 + 19.0 + 26.0 + 27.0) / 4.0;
        assert_eq!(levels[2].0.at(1, 1), expect);
        assert!(*levels[2].1.get(1, 1));
    }
}
