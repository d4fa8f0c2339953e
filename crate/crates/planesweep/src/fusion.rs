//! Depth-map filtering by photometric confidence and cross-view geometric
//! consistency, and fusion of the survivors into a point cloud.

use crate::costvol::DepthEstimate;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::grid::Grid;
use crate::io::ply::PointCloud;

/// Filter thresholds. Defaults: confidence 0.3, reprojection 1 pixel,
/// relative depth 0.01, at least 2 consistent source views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Minimum photometric confidence (3-plane neighborhood probability).
    pub min_confidence: f64,
    /// Maximum forward-backward reprojection error in pixels.
    pub max_reprojection_px: f64,
    /// Maximum forward-backward relative depth error.
    pub max_depth_relative: f64,
    /// Minimum number of source views that must agree.
    pub min_consistent_views: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.3,
            max_reprojection_px: 1.0,
            max_depth_relative: 0.01,
            min_consistent_views: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::Config("confidence threshold must lie in [0, 1]".into()));
        }
        if !(self.max_reprojection_px > 0.0 && self.max_depth_relative > 0.0) {
            return Err(Error::Config("fusion thresholds must be positive".into()));
        }
        if self.min_consistent_views == 0 {
            return Err(Error::Config("fusion needs at least one consistent view".into()));
        }
        Ok(())
    }
}

/// Forward-backward reprojection result for one reference pixel.
struct Reprojection {
    world: [f64; 3],
    reproj_px: f64,
    depth_rel: f64,
}

/// Project a reference pixel's depth into the source view, read the source
/// depth there, and project back. Returns None when either projection
/// leaves a raster or lands behind a camera, or the source has no depth.
fn forward_backward(
    x: usize,
    y: usize,
    depth: f64,
    ref_cam: &Camera,
    src_depth: &Grid<f64>,
    src_cam: &Camera,
) -> Option<Reprojection> {
    if !(depth.is_finite() && depth > 0.0) {
        return None;
    }
    let world = ref_cam.lift_to_world(x as f64, y as f64, depth);
    let (sx, sy, sd) = src_cam.project_from_world(&world);
    if !(sd > 0.0 && sx.is_finite() && sy.is_finite()) {
        return None;
    }
    let sxi = sx.round();
    let syi = sy.round();
    if sxi < 0.0 || syi < 0.0 || sxi >= src_depth.width() as f64 || syi >= src_depth.height() as f64
    {
        return None;
    }
    let measured = src_depth.at(syi as usize, sxi as usize);
    if !(measured.is_finite() && measured > 0.0) {
        return None;
    }
    let src_world = src_cam.lift_to_world(sxi, syi, measured);
    let (bx, by, bd) = ref_cam.project_from_world(&src_world);
    if !(bd > 0.0 && bx.is_finite() && by.is_finite()) {
        return None;
    }
    let reproj_px = ((bx - x as f64).powi(2) + (by - y as f64).powi(2)).sqrt();
    Some(Reprojection {
        world: [src_world.x, src_world.y, src_world.z],
        reproj_px,
        depth_rel: (bd - depth).abs() / depth,
    })
}

/// Per-pixel cross-view agreement: a pixel passes when its depth, seen
/// through the source view and back, lands within the pixel and relative
/// depth thresholds. Off-raster projections fail the check.
pub fn geometric_consistency(
    ref_depth: &Grid<f64>,
    ref_cam: &Camera,
    src_depth: &Grid<f64>,
    src_cam: &Camera,
    max_reprojection_px: f64,
    max_depth_relative: f64,
) -> Grid<bool> {
    Grid::from_fn(ref_depth.height(), ref_depth.width(), |y, x| {
        match forward_backward(x, y, ref_depth.at(y, x), ref_cam, src_depth, src_cam) {
            Some(r) => r.reproj_px <= max_reprojection_px && r.depth_rel <= max_depth_relative,
            None => false,
        }
    })
}

/// One view entering fusion.
pub struct FusionView<'a> {
    pub camera: &'a Camera,
    pub estimate: &'a DepthEstimate,
    pub image: &'a Grid<f64>,
    pub color: Option<&'a Grid<[u8; 3]>>,
}

/// Bookkeeping from a fusion run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FusionStats {
    pub pixels: usize,
    pub confident: usize,
    pub consistent: usize,
}

impl FusionStats {
    pub fn is_empty(&self) -> bool {
        self.consistent == 0
    }
}

/// Fuse all views: every pixel that is confident in its reference view and
/// geometrically consistent with enough source views becomes one point,
/// averaged with its consistent correspondences and colored from the
/// reference image. An empty result is a warning, not an error.
pub fn fuse(views: &[FusionView], cfg: &FusionConfig) -> Result<(PointCloud, FusionStats)> {
    cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::Config("fusion needs at least two views".into()));
    }
    let confidences: Vec<Grid<f64>> = views
        .iter()
        .map(|v| v.estimate.neighborhood_confidence(1))
        .collect();
    let mut cloud = PointCloud::default();
    let mut stats = FusionStats::default();
    for (r, ref_view) in views.iter().enumerate() {
        let depth = &ref_view.estimate.depth;
        for y in 0..depth.height() {
            for x in 0..depth.width() {
                stats.pixels += 1;
                if confidences[r].at(y, x) < cfg.min_confidence {
                    continue;
                }
                stats.confident += 1;
                let d = depth.at(y, x);
                if !(d.is_finite() && d > 0.0) {
                    continue;
                }
                let anchor = ref_view.camera.lift_to_world(x as f64, y as f64, d);
                let mut acc = [anchor.x, anchor.y, anchor.z];
                let mut supporters = 0usize;
                for (s, src_view) in views.iter().enumerate() {
                    if s == r {
                        continue;
                    }
                    if let Some(rep) = forward_backward(
                        x,
                        y,
                        d,
                        ref_view.camera,
                        &src_view.estimate.depth,
                        src_view.camera,
                    ) {
                        if rep.reproj_px <= cfg.max_reprojection_px
                            && rep.depth_rel <= cfg.max_depth_relative
                        {
                            supporters += 1;
                            for (a, w) in acc.iter_mut().zip(rep.world) {
                                *a += w;
                            }
                        }
                    }
                }
                if supporters < cfg.min_consistent_views {
                    continue;
                }
                stats.consistent += 1;
                let n = (supporters + 1) as f64;
                let color = match ref_view.color {
                    Some(c) => *c.get(y, x),
                    None => {
                        let g = ref_view.image.at(y, x).round().clamp(0.0, 255.0) as u8;
                        [g, g, g]
                    }
                };
                cloud.push([acc[0] / n, acc[1] / n, acc[2] / n], color);
            }
        }
    }
    Ok((cloud, stats))
}
