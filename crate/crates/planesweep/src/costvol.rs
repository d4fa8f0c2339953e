//! Cost volume construction over per-pixel hypothesis planes, cost
//! regularization, and softmax depth regression.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, CameraView, ViewPair};
use crate::grid::{Grid, Volume};
use crate::io::params::ParamBlob;
use crate::sampling::HypothesisPlanes;

/// Finite stand-in cost for (pixel, plane) cells that no source view sees.
pub const SENTINEL_COST: f64 = 1e6;

/// How the warped per-view features are reduced to one matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostMetric {
    /// Mean over channels of the per-channel variance across valid views
    /// (reference included).
    #[default]
    Variance,
    /// Mean over valid source views of the squared difference to the
    /// reference feature, averaged over channels.
    SquaredDiffToRef,
}

/// Per-pixel, per-plane matching cost plus the number of source views that
/// contributed to each cell.
#[derive(Debug, Clone)]
pub struct CostVolume {
    cost: Volume,
    valid_sources: Vec<u32>,
}

impl CostVolume {
    pub fn cost(&self) -> &Volume {
        &self.cost
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.cost.shape()
    }

    pub fn valid_source_count(&self, y: usize, x: usize, plane: usize) -> u32 {
        let (_, w, d) = self.cost.shape();
        self.valid_sources[(y * w + x) * d + plane]
    }
}

/// Sweep all hypothesis planes: warp every source view onto each per-pixel
/// plane depth and aggregate the features into a matching cost.
///
/// Plane depths vary per pixel, so warping goes through the per-pixel
/// lift-transform-project mapping rather than one homography per plane.
/// Cells without any valid source view get [`SENTINEL_COST`] and count 0.
pub fn build_cost_volume(
    ref_view: &CameraView,
    sources: &[CameraView],
    planes: &HypothesisPlanes,
    metric: CostMetric,
) -> Result<CostVolume> {
    if sources.is_empty() {
        return Err(Error::Config("cost volume needs at least one source view".into()));
    }
    let (h, w, channels) = ref_view.features.shape();
    if planes.depths().height() != h || planes.depths().width() != w {
        return Err(Error::Shape(format!(
            "plane volume {}x{} does not match reference features {}x{}",
            planes.depths().height(),
            planes.depths().width(),
            h,
            w
        )));
    }
    for (i, src) in sources.iter().enumerate() {
        if src.features.depth() != channels {
            return Err(Error::Shape(format!(
                "source {i} has {} feature channels, reference has {channels}",
                src.features.depth()
            )));
        }
    }
    let pairs: Vec<ViewPair> = sources
        .iter()
        .map(|src| ViewPair::new(&ref_view.camera, &src.camera))
        .collect();

    let d = planes.plane_count();
    let mut cost = Volume::zeros(h, w, d);
    let mut valid = vec![0u32; h * w * d];

    let row_len = w * d;
    cost.data_mut()
        .par_chunks_mut(row_len)
        .zip(valid.par_chunks_mut(row_len))
        .enumerate()
        .for_each(|(y, (cost_row, valid_row))| {
            // (n_views, channels) scratch of warped features for one cell.
            let mut samples = vec![0.0; (sources.len() + 1) * channels];
            let mut sample_buf = vec![0.0; channels];
            for x in 0..w {
                let ref_feat = ref_view.features.pixel(y, x);
                let depths = planes.pixel(y, x);
                for (j, &depth) in depths.iter().enumerate() {
                    samples[..channels].copy_from_slice(ref_feat);
                    let mut n_valid = 0usize;
                    for (pair, src) in pairs.iter().zip(sources) {
                        let mapped = pair.map_pixel(x as f64, y as f64, depth);
                        let ok = match mapped {
                            Some((sx, sy)) => {
                                bilinear_sample(&src.features, sy, sx, &mut sample_buf)
                            }
                            None => false,
                        };
                        if ok {
                            n_valid += 1;
                            samples[n_valid * channels..(n_valid + 1) * channels]
                                .copy_from_slice(&sample_buf);
                        }
                    }
                    let cell = x * d + j;
                    valid_row[cell] = n_valid as u32;
                    if n_valid == 0 {
                        cost_row[cell] = SENTINEL_COST;
                        continue;
                    }
                    cost_row[cell] = match metric {
                        CostMetric::Variance => {
                            let n = n_valid + 1;
                            let mut acc = 0.0;
                            for c in 0..channels {
                                let mut mean = 0.0;
                                for v in 0..n {
                                    mean += samples[v * channels + c];
                                }
                                mean /= n as f64;
                                let mut var = 0.0;
                                for v in 0..n {
                                    let dev = samples[v * channels + c] - mean;
                                    var += dev * dev;
                                }
                                acc += var / n as f64;
                            }
                            acc / channels as f64
                        }
                        CostMetric::SquaredDiffToRef => {
                            let mut acc = 0.0;
                            for v in 1..=n_valid {
                                for c in 0..channels {
                                    let dev = samples[v * channels + c] - samples[c];
                                    acc += dev * dev;
                                }
                            }
                            acc / (n_valid * channels) as f64
                        }
                    };
                }
            }
        });

    Ok(CostVolume {
        cost,
        valid_sources: valid,
    })
}

// ---------------------------------------------------------------------------
// Regularization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKernel {
    Box,
    Gaussian,
}

/// Cost-volume regularizer choice.
#[derive(Debug, Clone)]
pub enum RegularizerMode {
    /// Separable smoothing over (x, y, plane) with per-axis radii, window
    /// truncated and renormalized at volume borders.
    Filter {
        radii: [usize; 3],
        kernel: FilterKernel,
    },
    /// Two 3D convolutions with a residual connection, weights from file.
    Tiny3d(Tiny3dParams),
}

impl Default for RegularizerMode {
    fn default() -> Self {
        RegularizerMode::Filter {
            radii: [1, 1, 1],
            kernel: FilterKernel::Box,
        }
    }
}

/// Smooth the cost volume and negate it into per-plane logits, so that the
/// softmax over planes favors low cost.
///
/// Smoothing windows skip cells that no source view observed; their sentinel
/// cost would otherwise bleed into valid neighbors and dominate the softmax.
/// Unobserved cells keep the sentinel and lose the vote on their own.
pub fn regularize(vol: &CostVolume, mode: &RegularizerMode) -> Volume {
    let smoothed = match mode {
        RegularizerMode::Filter { radii, kernel } => {
            let mut v = vol.cost.clone();
            let mut mask: Vec<bool> = vol.valid_sources.iter().map(|&c| c > 0).collect();
            (v, mask) = smooth_axis(&v, &mask, Axis::X, radii[0], *kernel);
            (v, mask) = smooth_axis(&v, &mask, Axis::Y, radii[1], *kernel);
            (v, _) = smooth_axis(&v, &mask, Axis::Plane, radii[2], *kernel);
            v
        }
        RegularizerMode::Tiny3d(params) => params.apply(&vol.cost),
    };
    let mut logits = smoothed;
    for v in logits.data_mut() {
        *v = -*v;
    }
    logits
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
    Plane,
}

fn kernel_weights(radius: usize, kernel: FilterKernel) -> Vec<f64> {
    match kernel {
        FilterKernel::Box => vec![1.0; 2 * radius + 1],
        FilterKernel::Gaussian => {
            let sigma = radius.max(1) as f64 / 1.5;
            (0..=2 * radius)
                .map(|i| {
                    let o = i as f64 - radius as f64;
                    (-o * o / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        }
    }
}

/// One separable smoothing pass; windows are truncated at the volume borders
/// and renormalized over the in-bounds, observed taps. Returns the smoothed
/// values plus the updated observed mask (a cell becomes observed when any
/// tap in its window was).
fn smooth_axis(
    vol: &Volume,
    mask: &[bool],
    axis: Axis,
    radius: usize,
    kernel: FilterKernel,
) -> (Volume, Vec<bool>) {
    if radius == 0 {
        return (vol.clone(), mask.to_vec());
    }
    let (h, w, d) = vol.shape();
    let weights = kernel_weights(radius, kernel);
    let mut out = Volume::zeros(h, w, d);
    let mut out_mask = vec![false; h * w * d];
    let extent = match axis {
        Axis::X => w,
        Axis::Y => h,
        Axis::Plane => d,
    } as isize;
    let index = |y: usize, x: usize, j: usize| (y * w + x) * d + j;
    for y in 0..h {
        for x in 0..w {
            for j in 0..d {
                let center = match axis {
                    Axis::X => x as isize,
                    Axis::Y => y as isize,
                    Axis::Plane => j as isize,
                };
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (t, &wt) in weights.iter().enumerate() {
                    let p = center + t as isize - radius as isize;
                    if p < 0 || p >= extent {
                        continue;
                    }
                    let (vy, vx, vj) = match axis {
                        Axis::X => (y, p as usize, j),
                        Axis::Y => (p as usize, x, j),
                        Axis::Plane => (y, x, p as usize),
                    };
                    if !mask[index(vy, vx, vj)] {
                        continue;
                    }
                    acc += wt * vol.at(vy, vx, vj);
                    norm += wt;
                }
                if norm > 0.0 {
                    out.set(y, x, j, acc / norm);
                    out_mask[index(y, x, j)] = true;
                } else {
                    out.set(y, x, j, vol.at(y, x, j));
                }
            }
        }
    }
    (out, out_mask)
}

/// Weights of the small 3D convolutional regularizer: 3x3x3 convs taking the
/// single-channel volume to 8 channels and back, plus a residual connection.
#[derive(Debug, Clone)]
pub struct Tiny3dParams {
    blob: ParamBlob,
}

const T3D_WIDTH: usize = 8;

impl Tiny3dParams {
    pub fn seeded(seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut blob = ParamBlob::new();
        let mut conv = |name: &str, c_out: usize, c_in: usize| {
            let bound = (1.0 / (c_in * 27) as f64).sqrt();
            let w: Vec<f64> = (0..c_out * c_in * 27)
                .map(|_| (rng.gen_range(-bound..bound) as f32) as f64)
                .collect();
            blob.push(&format!("{name}_w"), &[c_out, c_in, 3, 3, 3], w);
            blob.push(&format!("{name}_b"), &[c_out], vec![0.0; c_out]);
        };
        conv("t3d1", T3D_WIDTH, 1);
        conv("t3d2", 1, T3D_WIDTH);
        Self { blob }
    }

    pub fn from_blob(blob: ParamBlob) -> Result<Self> {
        blob.expect("t3d1_w", &[T3D_WIDTH, 1, 3, 3, 3])?;
        blob.expect("t3d1_b", &[T3D_WIDTH])?;
        blob.expect("t3d2_w", &[1, T3D_WIDTH, 3, 3, 3])?;
        blob.expect("t3d2_b", &[1])?;
        Ok(Self { blob })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.blob.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_blob(ParamBlob::load(path)?)
    }

    /// out = conv2(relu(conv1(vol))) + vol, shape preserved.
    fn apply(&self, vol: &Volume) -> Volume {
        let w1 = &self.blob.get("t3d1_w").expect("validated").values;
        let b1 = &self.blob.get("t3d1_b").expect("validated").values;
        let w2 = &self.blob.get("t3d2_w").expect("validated").values;
        let b2 = &self.blob.get("t3d2_b").expect("validated").values;
        let (h, w, d) = vol.shape();

        // conv1 (1 -> T3D_WIDTH channels) with ReLU; cell channels innermost.
        let mut hidden = vec![0.0; h * w * d * T3D_WIDTH];
        for y in 0..h {
            for x in 0..w {
                for j in 0..d {
                    let dst = &mut hidden[((y * w + x) * d + j) * T3D_WIDTH..][..T3D_WIDTH];
                    dst.copy_from_slice(b1);
                    for (tap, ny, nx, nj) in taps27(y, x, j, h, w, d) {
                        let v = vol.at(ny, nx, nj);
                        for (co, dv) in dst.iter_mut().enumerate() {
                            *dv += w1[co * 27 + tap] * v;
                        }
                    }
                    for dv in dst.iter_mut() {
                        if *dv < 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
            }
        }

        // conv2 (T3D_WIDTH -> 1) plus residual.
        let mut out = vol.clone();
        for y in 0..h {
            for x in 0..w {
                for j in 0..d {
                    let mut acc = b2[0];
                    for (tap, ny, nx, nj) in taps27(y, x, j, h, w, d) {
                        let cell = &hidden[((ny * w + nx) * d + nj) * T3D_WIDTH..][..T3D_WIDTH];
                        for (ci, &v) in cell.iter().enumerate() {
                            acc += w2[ci * 27 + tap] * v;
                        }
                    }
                    out.set(y, x, j, out.at(y, x, j) + acc);
                }
            }
        }
        out
    }
}

/// In-bounds taps of a 3x3x3 window centered on (y, x, j).
fn taps27(
    y: usize,
    x: usize,
    j: usize,
    h: usize,
    w: usize,
    d: usize,
) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..27usize).filter_map(move |t| {
        let ny = y as isize + (t / 9) as isize - 1;
        let nx = x as isize + ((t / 3) % 3) as isize - 1;
        let nj = j as isize + (t % 3) as isize - 1;
        if ny < 0 || nx < 0 || nj < 0 {
            return None;
        }
        let (ny, nx, nj) = (ny as usize, nx as usize, nj as usize);
        if ny >= h || nx >= w || nj >= d {
            return None;
        }
        Some((t, ny, nx, nj))
    })
}

// ---------------------------------------------------------------------------
// Depth regression
// ---------------------------------------------------------------------------

/// Regressed depth with the per-plane probability volume and a per-pixel
/// confidence (the winning plane's probability).
#[derive(Debug, Clone)]
pub struct DepthEstimate {
    pub depth: Grid<f64>,
    pub prob: Volume,
    pub confidence: Grid<f64>,
}

impl DepthEstimate {
    /// Confidence as the probability mass on the winning plane and its
    /// immediate neighbors (radius planes on each side, clipped).
    pub fn neighborhood_confidence(&self, radius: usize) -> Grid<f64> {
        let (h, w, d) = self.prob.shape();
        Grid::from_fn(h, w, |y, x| {
            let p = self.prob.pixel(y, x);
            let mut best = 0usize;
            for j in 1..d {
                if p[j] > p[best] {
                    best = j;
                }
            }
            let lo = best.saturating_sub(radius);
            let hi = (best + radius).min(d - 1);
            p[lo..=hi].iter().sum()
        })
    }
}

/// Softmax over planes (max-subtracted) followed by probability-weighted
/// averaging of the plane depths. The estimate is a convex combination, so
/// it always lies inside the per-pixel plane span.
pub fn depth_regression(logits: &Volume, planes: &HypothesisPlanes) -> Result<DepthEstimate> {
    if !logits.same_shape(planes.depths()) {
        return Err(Error::Shape(format!(
            "logits {:?} do not match planes {:?}",
            logits.shape(),
            planes.depths().shape()
        )));
    }
    let (h, w, d) = logits.shape();
    let mut depth = Grid::zeros(h, w);
    let mut prob = Volume::zeros(h, w, d);
    let mut confidence = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let l = logits.pixel(y, x);
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = prob.pixel_mut(y, x);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (l[j] - max).exp();
                p[j] = e;
                sum += e;
            }
            let mut est = 0.0;
            let mut best = 0.0f64;
            let depths = planes.pixel(y, x);
            for j in 0..d {
                p[j] /= sum;
                est += p[j] * depths[j];
                best = best.max(p[j]);
            }
            depth.set(y, x, est);
            confidence.set(y, x, best);
        }
    }
    Ok(DepthEstimate {
        depth,
        prob,
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Camera;
    use crate::grid::Grid;
    use crate::sampling::{intervals_from_distribution, plane_depths, SamplingDistribution};
    use nalgebra::{Matrix3, Matrix4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(f: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
    }

    fn translated(tx: f64, ty: f64, tz: f64) -> Matrix4<f64> {
        let mut t = Matrix4::identity();
        t[(0, 3)] = tx;
        t[(1, 3)] = ty;
        t[(2, 3)] = tz;
        t
    }

    /// Render a fronto-parallel plane at depth d* seen from a camera with
    /// identity rotation and translation (tx, ty, 0): each feature channel is
    /// a smooth function of the world point the pixel ray hits.
    fn render_plane_view(
        cam: &Camera,
        h: usize,
        w: usize,
        plane_depth: f64,
        tex: impl Fn(f64, f64) -> [f64; 3],
    ) -> Volume {
        let mut img = Volume::zeros(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                let world = cam.lift_to_world(x as f64, y as f64, plane_depth);
                img.pixel_mut(y, x).copy_from_slice(&tex(world.x, world.y));
            }
        }
        img
    }

    /// Three independent smooth channels; multi-channel matching avoids the
    /// false minima a single periodic intensity would produce.
    fn smooth_texture(u: f64, v: f64) -> [f64; 3] {
        [
            128.0 + 60.0 * (2.1 * u).sin() + 40.0 * (1.7 * v).cos(),
            128.0 + 50.0 * (3.7 * u - 2.9 * v).sin() + 25.0 * (1.1 * v).sin(),
            128.0 + 45.0 * (2.3 * u + 3.1 * v).cos() + 30.0 * (1.3 * u).cos(),
        ]
    }

    fn uniform_planes(h: usize, w: usize, d: usize, center: f64, range: f64) -> HypothesisPlanes {
        let dist = SamplingDistribution::uniform(h, w, d).unwrap();
        let iv = intervals_from_distribution(&dist, range).unwrap();
        plane_depths(&Grid::filled(h, w, center), &iv, range, 1.0).unwrap()
    }

    #[test]
    fn duplicated_reference_gives_zero_cost() {
        let cam = Camera::new(k(40.0, 8.0, 8.0), Matrix4::identity(), (1.0, 10.0)).unwrap();
        let img = render_plane_view(&cam, 16, 16, 4.0, smooth_texture);
        let ref_view = CameraView::new(cam.clone(), img.clone());
        let src_view = CameraView::new(cam, img);
        let planes = uniform_planes(16, 16, 4, 4.0, 2.0);
        let vol = build_cost_volume(&ref_view, &[src_view], &planes, CostMetric::Variance).unwrap();
        for &c in vol.cost().data() {
            assert_eq!(c, 0.0, "identical views must have zero variance");
        }
    }

    #[test]
    fn empty_source_list_is_a_config_error() {
        let cam = Camera::new(k(40.0, 8.0, 8.0), Matrix4::identity(), (1.0, 10.0)).unwrap();
        let ref_view = CameraView::new(cam, Volume::zeros(8, 8, 1));
        let planes = uniform_planes(8, 8, 4, 4.0, 2.0);
        assert!(build_cost_volume(&ref_view, &[], &planes, CostMetric::Variance).is_err());
    }

    #[test]
    fn unseen_cells_get_sentinel_cost() {
        let cam = Camera::new(k(40.0, 8.0, 8.0), Matrix4::identity(), (1.0, 10.0)).unwrap();
        // Source translated far sideways: nothing projects into its raster.
        let far = Camera::new(k(40.0, 8.0, 8.0), translated(1000.0, 0.0, 0.0), (1.0, 10.0)).unwrap();
        let img = render_plane_view(&cam, 8, 8, 4.0, smooth_texture);
        let ref_view = CameraView::new(cam, img.clone());
        let src_view = CameraView::new(far, img);
        let planes = uniform_planes(8, 8, 4, 4.0, 2.0);
        let vol = build_cost_volume(&ref_view, &[src_view], &planes, CostMetric::Variance).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for j in 0..4 {
                    assert_eq!(vol.cost().at(y, x, j), SENTINEL_COST);
                    assert_eq!(vol.valid_source_count(y, x, j), 0);
                }
            }
        }
    }

    #[test]
    fn cost_is_minimized_at_the_true_depth_plane() {
        let true_depth = 5.0;
        let ref_cam = Camera::new(k(40.0, 16.0, 12.0), Matrix4::identity(), (2.0, 9.0)).unwrap();
        let src_cam =
            Camera::new(k(40.0, 16.0, 12.0), translated(-0.8, 0.3, 0.0), (2.0, 9.0)).unwrap();
        let (h, w) = (24, 32);
        let ref_view = CameraView::new(
            ref_cam.clone(),
            render_plane_view(&ref_cam, h, w, true_depth, smooth_texture),
        );
        let src_view = CameraView::new(
            src_cam.clone(),
            render_plane_view(&src_cam, h, w, true_depth, smooth_texture),
        );
        // Center 4.75 with spacing 0.5 puts plane index 4 exactly at the
        // true depth 5.0; every other plane is at least 0.5 away.
        let planes = uniform_planes(h, w, 8, 4.75, 4.0);
        let vol =
            build_cost_volume(&ref_view, &[src_view], &planes, CostMetric::Variance).unwrap();
        let mut wins = 0usize;
        let mut counted = 0usize;
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                if (0..8).any(|j| vol.valid_source_count(y, x, j) == 0) {
                    continue;
                }
                let costs = vol.cost().pixel(y, x);
                let argmin = (0..8).min_by(|&a, &b| costs[a].total_cmp(&costs[b])).unwrap();
                let depths = planes.pixel(y, x);
                let nearest = (0..8)
                    .min_by(|&a, &b| {
                        (depths[a] - true_depth)
                            .abs()
                            .total_cmp(&(depths[b] - true_depth).abs())
                    })
                    .unwrap();
                counted += 1;
                if argmin == nearest {
                    wins += 1;
                }
            }
        }
        assert!(counted > 100);
        assert!(
            wins as f64 >= 0.95 * counted as f64,
            "only {wins}/{counted} interior pixels pick the true plane"
        );
    }

    #[test]
    fn duplicate_source_never_raises_cost_at_true_depth() {
        // On an affine texture, bilinear interpolation is exact, so the cost
        // at the true plane is zero with and without the duplicate.
        let true_depth = 4.0;
        let affine =
            |u: f64, v: f64| [30.0 + 12.0 * u - 7.0 * v, 5.0 + 3.0 * u, 9.0 - 2.0 * v];
        let ref_cam = Camera::new(k(40.0, 16.0, 12.0), Matrix4::identity(), (2.0, 8.0)).unwrap();
        let src_cam =
            Camera::new(k(40.0, 16.0, 12.0), translated(-0.5, 0.2, 0.0), (2.0, 8.0)).unwrap();
        let (h, w) = (16, 24);
        let ref_view = CameraView::new(
            ref_cam.clone(),
            render_plane_view(&ref_cam, h, w, true_depth, affine),
        );
        let src_view = CameraView::new(
            src_cam.clone(),
            render_plane_view(&src_cam, h, w, true_depth, affine),
        );
        // A single plane exactly at the true depth.
        let planes = uniform_planes(h, w, 2, true_depth, 1e-9);
        let single = build_cost_volume(&ref_view, &[src_view.clone()], &planes, CostMetric::Variance)
            .unwrap();
        let doubled = build_cost_volume(
            &ref_view,
            &[src_view.clone(), src_view],
            &planes,
            CostMetric::Variance,
        )
        .unwrap();
        for y in 0..h {
            for x in 0..w {
                for j in 0..2 {
                    if single.valid_source_count(y, x, j) == 1
                        && doubled.valid_source_count(y, x, j) == 2
                    {
                        assert!(single.cost().at(y, x, j) < 1e-16);
                        assert!(doubled.cost().at(y, x, j) <= single.cost().at(y, x, j) + 1e-16);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_radius_filter_is_negated_cost() {
        let cam = Camera::new(k(40.0, 8.0, 8.0), Matrix4::identity(), (1.0, 10.0)).unwrap();
        let img = render_plane_view(&cam, 8, 8, 4.0, smooth_texture);
        let ref_view = CameraView::new(cam.clone(), img.clone());
        let src_cam = Camera::new(k(40.0, 8.0, 8.0), translated(0.3, 0.0, 0.0), (1.0, 10.0)).unwrap();
        let src_view = CameraView::new(src_cam.clone(), render_plane_view(&src_cam, 8, 8, 4.0, smooth_texture));
        let planes = uniform_planes(8, 8, 4, 4.0, 2.0);
        let vol = build_cost_volume(&ref_view, &[src_view], &planes, CostMetric::Variance).unwrap();
        let logits = regularize(
            &vol,
            &RegularizerMode::Filter {
                radii: [0, 0, 0],
                kernel: FilterKernel::Box,
            },
        );
        for (l, c) in logits.data().iter().zip(vol.cost().data()) {
            assert_eq!(*l, -*c);
        }
    }

    #[test]
    fn smoothing_preserves_constant_volumes() {
        let vol = CostVolume {
            cost: Volume::filled(5, 6, 4, 3.25),
            valid_sources: vec![1; 5 * 6 * 4],
        };
        for kernel in [FilterKernel::Box, FilterKernel::Gaussian] {
            let logits = regularize(
                &vol,
                &RegularizerMode::Filter {
                    radii: [1, 2, 1],
                    kernel,
                },
            );
            for &l in logits.data() {
                assert!((l + 3.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_box_filter_matches_direct_convolution() {
        // 5x5x5 impulse at the center, radius-1 box: compare the separable
        // implementation against a direct truncated-window 3D average.
        let mut cost = Volume::zeros(5, 5, 5);
        cost.set(2, 2, 2, 1.0);
        let vol = CostVolume {
            valid_sources: vec![1; 125],
            cost: cost.clone(),
        };
        let logits = regularize(
            &vol,
            &RegularizerMode::Filter {
                radii: [1, 1, 1],
                kernel: FilterKernel::Box,
            },
        );
        for y in 0..5usize {
            for x in 0..5usize {
                for j in 0..5usize {
                    let mut acc = 0.0;
                    let mut n = 0usize;
                    for (_, ny, nx, nj) in taps27(y, x, j, 5, 5, 5) {
                        acc += cost.at(ny, nx, nj);
                        n += 1;
                    }
                    let direct = acc / n as f64;
                    assert!(
                        (logits.at(y, x, j) + direct).abs() < 1e-12,
                        "mismatch at ({y},{x},{j}): {} vs {}",
                        logits.at(y, x, j),
                        -direct
                    );
                }
            }
        }
        // The interior neighbors of the impulse see exactly 1/27.
        assert!((logits.at(1, 1, 1) + 1.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn tiny3d_preserves_shape_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t3d.params");
        let params = Tiny3dParams::seeded(3);
        params.save(&path).unwrap();
        let reloaded = Tiny3dParams::load(&path).unwrap();
        let mut cost = Volume::zeros(4, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in cost.data_mut() {
            *v = rng.gen_range(0.0..2.0);
        }
        let vol = CostVolume {
            valid_sources: vec![1; 4 * 6 * 4],
            cost,
        };
        let a = regularize(&vol, &RegularizerMode::Tiny3d(params));
        let b = regularize(&vol, &RegularizerMode::Tiny3d(reloaded));
        assert_eq!(a.shape(), (4, 6, 4));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn one_hot_logits_return_the_winning_plane_depth() {
        let planes = uniform_planes(1, 1, 4, 10.0, 8.0);
        let mut logits = Volume::zeros(1, 1, 4);
        logits.pixel_mut(0, 0).copy_from_slice(&[0.0, 1000.0, 0.0, 0.0]);
        let est = depth_regression(&logits, &planes).unwrap();
        assert_eq!(est.depth.at(0, 0), planes.pixel(0, 0)[1]);
        assert!((est.confidence.at(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_return_the_plane_mean() {
        // Planes from the interval hand-example: (6.5, 8.5, 11.5, 15.5).
        let prev = Grid::filled(1, 1, 10.0);
        let iv = Volume::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let planes = plane_depths(&prev, &iv, 10.0, 1.0).unwrap();
        let logits = Volume::filled(1, 1, 4, 0.7);
        let est = depth_regression(&logits, &planes).unwrap();
        assert!((est.depth.at(0, 0) - 10.5).abs() < 1e-12);
    }

    #[test]
    fn regression_stays_in_the_plane_span_and_ignores_logit_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let d = 8usize;
            let planes = uniform_planes(1, 1, d, rng.gen_range(3.0..7.0), rng.gen_range(0.5..4.0));
            let mut logits = Volume::zeros(1, 1, d);
            for v in logits.data_mut() {
                *v = rng.gen_range(-5.0..5.0);
            }
            let est = depth_regression(&logits, &planes).unwrap();
            let px = planes.pixel(0, 0);
            let (lo, hi) = (px[0], px[d - 1]);
            let depth = est.depth.at(0, 0);
            assert!(depth >= lo - 1e-12 && depth <= hi + 1e-12);

            let mut shifted = logits.clone();
            for v in shifted.data_mut() {
                *v += 123.456;
            }
            let est2 = depth_regression(&shifted, &planes).unwrap();
            assert!((est2.depth.at(0, 0) - depth).abs() < 1e-9);
            for j in 0..d {
                assert!((est2.prob.at(0, 0, j) - est.prob.at(0, 0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn neighborhood_confidence_sums_adjacent_planes() {
        let planes = uniform_planes(1, 1, 4, 5.0, 2.0);
        let mut logits = Volume::zeros(1, 1, 4);
        logits.pixel_mut(0, 0).copy_from_slice(&[1.0, 3.0, 2.0, 0.5]);
        let est = depth_regression(&logits, &planes).unwrap();
        let conf = est.neighborhood_confidence(1);
        let p = est.prob.pixel(0, 0);
        assert!((conf.at(0, 0) - (p[0] + p[1] + p[2])).abs() < 1e-12);
    }
}
