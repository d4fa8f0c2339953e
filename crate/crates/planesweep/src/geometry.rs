//! Pinhole cameras, plane-induced homographies and differentiable warping.
//!
//! Conventions used everywhere in this crate:
//! - extrinsics map world to camera coordinates, depth is the camera-frame z;
//! - pixel (x, y) covers the continuous coordinate (x + 0.5, y + 0.5);
//! - hypothesis planes are fronto-parallel in the reference camera frame.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::grid::{Grid, Volume};
use crate::io::params::ParamBlob;
use crate::nn;

/// Homogeneous w below this marks a pixel as behind the camera / at infinity.
pub const MIN_HOMOGENEOUS_W: f64 = 1e-12;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// A calibrated pinhole camera with its usable depth range.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    t: Matrix4<f64>,
    t_inv: Matrix4<f64>,
    depth_range: (f64, f64),
}

impl Camera {
    /// Validates intrinsics (upper-triangular, positive focals), extrinsics
    /// (rigid: orthonormal rotation with determinant +1, affine bottom row)
    /// and the depth range (0 < d_min < d_max).
    pub fn new(k: Matrix3<f64>, t: Matrix4<f64>, depth_range: (f64, f64)) -> Result<Self> {
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0) {
            return Err(Error::InvalidCamera(
                "intrinsic diagonal must be strictly positive".into(),
            ));
        }
        if k[(1, 0)].abs() > 1e-12 || k[(2, 0)].abs() > 1e-12 || k[(2, 1)].abs() > 1e-12 {
            return Err(Error::InvalidCamera(
                "intrinsic matrix must be upper-triangular".into(),
            ));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::InvalidCamera("singular intrinsic matrix".into()))?;

        let r = t.fixed_view::<3, 3>(0, 0).into_owned();
        let rtr = r.transpose() * r;
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((rtr[(i, j)] - target).abs());
            }
        }
        if max_dev > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation block not orthonormal (deviation {max_dev:.2e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(
                "rotation block must have determinant +1".into(),
            ));
        }
        let bottom = t.row(3);
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() > 1e-9)
            || (bottom[3] - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidCamera(
                "extrinsic bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        let t_inv = t
            .try_inverse()
            .ok_or_else(|| Error::InvalidCamera("singular extrinsic matrix".into()))?;

        let (d_min, d_max) = depth_range;
        if !(d_min.is_finite() && d_max.is_finite() && d_min > 0.0 && d_min < d_max) {
            return Err(Error::InvalidCamera(format!(
                "depth range ({d_min}, {d_max}) must satisfy 0 < d_min < d_max"
            )));
        }

        Ok(Self {
            k,
            k_inv,
            t,
            t_inv,
            depth_range,
        })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.t
    }

    pub fn depth_range(&self) -> (f64, f64) {
        self.depth_range
    }

    pub fn d_min(&self) -> f64 {
        self.depth_range.0
    }

    pub fn d_max(&self) -> f64 {
        self.depth_range.1
    }

    /// Width of the usable depth range.
    pub fn range_span(&self) -> f64 {
        self.depth_range.1 - self.depth_range.0
    }

    /// Camera for a raster scaled by `factor` (e.g. 0.125 for the 1/8 level).
    /// Exact under the half-pixel center convention: a point projecting to
    /// continuous coordinate u at full resolution projects to factor * u.
    pub fn scaled(&self, factor: f64) -> Camera {
        let mut k = self.k;
        for col in 0..3 {
            k[(0, col)] *= factor;
            k[(1, col)] *= factor;
        }
        Camera::new(k, self.t, self.depth_range).expect("scaling preserves validity")
    }

    /// Back-project pixel (x, y) at camera depth `depth` to world coordinates.
    pub fn lift_to_world(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        let dir = self.k_inv * Vector3::new(x + 0.5, y + 0.5, 1.0);
        let cam = dir * (depth / dir.z);
        let w = self.t_inv * Vector4::new(cam.x, cam.y, cam.z, 1.0);
        Vector3::new(w.x, w.y, w.z)
    }

    /// Project a world point; returns pixel coordinates and camera depth.
    /// The pixel coordinates are meaningful only when depth > 0.
    pub fn project_from_world(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let cam = self.t * Vector4::new(p.x, p.y, p.z, 1.0);
        let proj = self.k * Vector3::new(cam.x, cam.y, cam.z);
        if proj.z.abs() < MIN_HOMOGENEOUS_W {
            return (f64::NAN, f64::NAN, cam.z);
        }
        (proj.x / proj.z - 0.5, proj.y / proj.z - 0.5, cam.z)
    }
}

/// One view: a camera plus its feature grid (channels innermost).
#[derive(Debug, Clone)]
pub struct CameraView {
    pub camera: Camera,
    pub features: Volume,
}

impl CameraView {
    pub fn new(camera: Camera, features: Volume) -> Self {
        Self { camera, features }
    }

    /// Wrap a raw single-channel image as a view (the cascade input form).
    pub fn from_image(camera: Camera, image: &Grid<f64>) -> Self {
        let mut features = Volume::zeros(image.height(), image.width(), 1);
        features.data_mut().copy_from_slice(image.data());
        Self { camera, features }
    }
}

/// Homography mapping reference continuous pixel coordinates to source
/// continuous pixel coordinates through the fronto-parallel plane at depth
/// `d` in the reference frame: K_src (R + t nᵀ / d) K_ref⁻¹ with n = (0,0,1).
pub fn homography_for_depth(ref_cam: &Camera, src_cam: &Camera, d: f64) -> Result<Matrix3<f64>> {
    if !(d > 0.0) {
        return Err(Error::Config(format!("plane depth must be positive, got {d}")));
    }
    let rel = src_cam.t * ref_cam.t_inv;
    let r = rel.fixed_view::<3, 3>(0, 0).into_owned();
    let t = Vector3::new(rel[(0, 3)], rel[(1, 3)], rel[(2, 3)]);
    let mut plane = r;
    // R + t * nᵀ / d adds t/d to the z column.
    plane[(0, 2)] += t.x / d;
    plane[(1, 2)] += t.y / d;
    plane[(2, 2)] += t.z / d;
    Ok(src_cam.k * plane * ref_cam.k_inv)
}

/// Precomputed relative mapping between a reference and a source camera,
/// used for per-pixel plane depths where one global homography is invalid.
#[derive(Debug, Clone)]
pub struct ViewPair {
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
    combined: Matrix3<f64>, // K_src * R * K_ref⁻¹
    k_src_t: Vector3<f64>,  // K_src * t
}

impl ViewPair {
    pub fn new(ref_cam: &Camera, src_cam: &Camera) -> Self {
        let rel = src_cam.t * ref_cam.t_inv;
        let rot = rel.fixed_view::<3, 3>(0, 0).into_owned();
        let trans = Vector3::new(rel[(0, 3)], rel[(1, 3)], rel[(2, 3)]);
        Self {
            rot,
            trans,
            combined: src_cam.k * rot * ref_cam.k_inv,
            k_src_t: src_cam.k * trans,
        }
    }

    /// Map reference pixel (x, y) at hypothesis depth `d` into source pixel
    /// coordinates. Returns None when the point lands behind the source
    /// camera (homogeneous w below the cutoff).
    ///
    /// Algebraically identical to applying `homography_for_depth` for this
    /// pixel's depth; factored so the per-pixel sweep costs one mat-vec.
    #[inline]
    pub fn map_pixel(&self, x: f64, y: f64, d: f64) -> Option<(f64, f64)> {
        let p = Vector3::new(x + 0.5, y + 0.5, 1.0);
        let v = self.combined * (p * d) + self.k_src_t;
        if v.z < MIN_HOMOGENEOUS_W {
            return None;
        }
        Some((v.x / v.z - 0.5, v.y / v.z - 0.5))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rot
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.trans
    }
}

/// Bilinear sample of all channels at pixel-space (y, x); false when the
/// sample point leaves the raster (out receives zeros).
#[inline]
pub fn bilinear_sample(vol: &Volume, y: f64, x: f64, out: &mut [f64]) -> bool {
    let (h, w, _) = vol.shape();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        out.fill(0.0);
        return false;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = vol.pixel(y0, x0);
    let p01 = vol.pixel(y0, x1);
    let p10 = vol.pixel(y1, x0);
    let p11 = vol.pixel(y1, x1);
    for c in 0..out.len() {
        out[c] = (1.0 - fy) * ((1.0 - fx) * p00[c] + fx * p01[c])
            + fy * ((1.0 - fx) * p10[c] + fx * p11[c]);
    }
    true
}

/// Warp a source feature grid through a homography: for each output pixel,
/// apply H to its continuous coordinate, normalize, and bilinearly sample the
/// source. Out-of-raster or behind-camera pixels get zero features and an
/// invalid mask entry.
pub fn warp_grid(src_features: &Volume, h: &Matrix3<f64>) -> Result<(Volume, Grid<bool>)> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("homography contains non-finite entries".into()));
    }
    let (rows, cols, channels) = src_features.shape();
    let mut out = Volume::zeros(rows, cols, channels);
    let mut mask = Grid::filled(rows, cols, false);
    for y in 0..rows {
        for x in 0..cols {
            let p = h * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            if p.z < MIN_HOMOGENEOUS_W {
                continue;
            }
            let sx = p.x / p.z - 0.5;
            let sy = p.y / p.z - 0.5;
            let valid = bilinear_sample(src_features, sy, sx, out.pixel_mut(y, x));
            mask.set(y, x, valid);
        }
    }
    Ok((out, mask))
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Four feature grids at 1/8, 1/4, 1/2 and full resolution (coarse first).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: [Volume; 4],
}

impl FeaturePyramid {
    pub fn new(levels: [Volume; 4]) -> Result<Self> {
        for i in 1..4 {
            if levels[i].height() != levels[i - 1].height() * 2
                || levels[i].width() != levels[i - 1].width() * 2
            {
                return Err(Error::Shape(
                    "pyramid levels must grow by exactly 2x per axis".into(),
                ));
            }
        }
        Ok(Self { levels })
    }

    /// Level 0 is the coarsest (1/8 resolution).
    pub fn level(&self, i: usize) -> &Volume {
        &self.levels[i]
    }
}

/// Feature extractor choice: plain photometric channels or a small random /
/// saved convolutional encoder-decoder.
#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    /// Area-averaged intensity plus x/y gradient channels per level.
    Photometric,
    TinyConv(TinyConvParams),
}

impl FeatureExtractor {
    pub fn extract(&self, image: &Grid<f64>) -> Result<FeaturePyramid> {
        if image.height() % 8 != 0 || image.width() % 8 != 0 {
            return Err(Error::Shape(format!(
                "image dimensions {}x{} must be divisible by 8",
                image.height(),
                image.width()
            )));
        }
        match self {
            FeatureExtractor::Photometric => photometric_pyramid(image),
            FeatureExtractor::TinyConv(params) => params.extract(image),
        }
    }
}

fn photometric_pyramid(image: &Grid<f64>) -> Result<FeaturePyramid> {
    // Full-resolution gradient energy, area-pooled into every level so the
    // coarse stages still see where fine texture lives.
    let (gx, gy) = gradients(image);
    let energy = Grid::from_fn(image.height(), image.width(), |y, x| {
        (gx.at(y, x) * gx.at(y, x) + gy.at(y, x) * gy.at(y, x)).sqrt()
    });
    let mut levels = Vec::with_capacity(4);
    for factor in [8usize, 4, 2, 1] {
        let lum = image.downsample(factor)?;
        let pooled = energy.downsample(factor)?;
        levels.push(photometric_channels(&lum, &pooled));
    }
    let levels: [Volume; 4] = levels.try_into().expect("four levels");
    FeaturePyramid::new(levels)
}

/// Central differences, one-sided at borders.
fn gradients(lum: &Grid<f64>) -> (Grid<f64>, Grid<f64>) {
    let (h, w) = (lum.height(), lum.width());
    let mut gx = Grid::zeros(h, w);
    let mut gy = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            gx.set(y, x, (lum.at(y, xp) - lum.at(y, xm)) / (xp - xm).max(1) as f64);
            gy.set(y, x, (lum.at(yp, x) - lum.at(ym, x)) / (yp - ym).max(1) as f64);
        }
    }
    (gx, gy)
}

/// Channels: intensity, level-scale gradients, pooled full-res energy.
fn photometric_channels(lum: &Grid<f64>, energy: &Grid<f64>) -> Volume {
    let (h, w) = (lum.height(), lum.width());
    let (gx, gy) = gradients(lum);
    let mut out = Volume::zeros(h, w, 4);
    for y in 0..h {
        for x in 0..w {
            let px = out.pixel_mut(y, x);
            px[0] = lum.at(y, x);
            px[1] = gx.at(y, x);
            px[2] = gy.at(y, x);
            px[3] = energy.at(y, x);
        }
    }
    out
}

/// Weights of the tiny convolutional encoder-decoder. Encoder widths are
/// fixed at (8, 16, 32, 64); the per-level output channels are configurable.
#[derive(Debug, Clone)]
pub struct TinyConvParams {
    channels: [usize; 4],
    blob: ParamBlob,
}

const ENC_WIDTHS: [usize; 4] = [8, 16, 32, 64];

impl TinyConvParams {
    /// Deterministic random initialization (values quantized to f32 so that
    /// save/load round-trips exactly).
    pub fn seeded(seed: u64, channels: [usize; 4]) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut blob = ParamBlob::new();
        let mut conv = |name: &str, c_out: usize, c_in: usize, taps: usize| {
            let fan_in = (c_in * taps) as f64;
            let bound = (3.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..c_out * c_in * taps)
                .map(|_| (rng.gen_range(-bound..bound) as f32) as f64)
                .collect();
            if taps == 9 {
                blob.push(&format!("{name}_w"), &[c_out, c_in, 3, 3], w);
            } else {
                blob.push(&format!("{name}_w"), &[c_out, c_in], w);
            }
            blob.push(&format!("{name}_b"), &[c_out], vec![(0.01f32) as f64; c_out]);
        };
        conv("enc1", ENC_WIDTHS[0], 1, 9);
        conv("enc2", ENC_WIDTHS[1], ENC_WIDTHS[0], 9);
        conv("enc3", ENC_WIDTHS[2], ENC_WIDTHS[1], 9);
        conv("enc4", ENC_WIDTHS[3], ENC_WIDTHS[2], 9);
        conv("dec3", ENC_WIDTHS[2], ENC_WIDTHS[3] + ENC_WIDTHS[2], 9);
        conv("dec2", ENC_WIDTHS[1], ENC_WIDTHS[2] + ENC_WIDTHS[1], 9);
        conv("dec1", ENC_WIDTHS[0], ENC_WIDTHS[1] + ENC_WIDTHS[0], 9);
        conv("head1", channels[0], ENC_WIDTHS[3], 1);
        conv("head2", channels[1], ENC_WIDTHS[2], 1);
        conv("head3", channels[2], ENC_WIDTHS[1], 1);
        conv("head4", channels[3], ENC_WIDTHS[0], 1);
        Self { channels, blob }
    }

    pub fn from_blob(blob: ParamBlob) -> Result<Self> {
        let mut channels = [0usize; 4];
        for (i, ch) in channels.iter_mut().enumerate() {
            let head = blob
                .get(&format!("head{}_b", i + 1))
                .ok_or_else(|| Error::Structure(format!("head{}_b missing", i + 1)))?;
            *ch = head.values.len();
        }
        let params = Self { channels, blob };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        self.blob.expect("enc1_w", &[ENC_WIDTHS[0], 1, 3, 3])?;
        self.blob.expect("enc2_w", &[ENC_WIDTHS[1], ENC_WIDTHS[0], 3, 3])?;
        self.blob.expect("enc3_w", &[ENC_WIDTHS[2], ENC_WIDTHS[1], 3, 3])?;
        self.blob.expect("enc4_w", &[ENC_WIDTHS[3], ENC_WIDTHS[2], 3, 3])?;
        self.blob
            .expect("dec3_w", &[ENC_WIDTHS[2], ENC_WIDTHS[3] + ENC_WIDTHS[2], 3, 3])?;
        self.blob
            .expect("dec2_w", &[ENC_WIDTHS[1], ENC_WIDTHS[2] + ENC_WIDTHS[1], 3, 3])?;
        self.blob
            .expect("dec1_w", &[ENC_WIDTHS[0], ENC_WIDTHS[1] + ENC_WIDTHS[0], 3, 3])?;
        for (i, &c) in self.channels.iter().enumerate() {
            let c_in = match i {
                0 => ENC_WIDTHS[3],
                1 => ENC_WIDTHS[2],
                2 => ENC_WIDTHS[1],
                _ => ENC_WIDTHS[0],
            };
            self.blob.expect(&format!("head{}_w", i + 1), &[c, c_in])?;
            self.blob.expect(&format!("head{}_b", i + 1), &[c])?;
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn blob(&self) -> &ParamBlob {
        &self.blob
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.blob.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_blob(ParamBlob::load(path)?)
    }

    fn tensor(&self, name: &str) -> &[f64] {
        &self.blob.get(name).expect("validated").values
    }

    fn extract(&self, image: &Grid<f64>) -> Result<FeaturePyramid> {
        let (h, w) = (image.height(), image.width());
        let mut input = Volume::zeros(h, w, 1);
        input.data_mut().copy_from_slice(image.data());

        let mut e1 = nn::conv3x3(&input, self.tensor("enc1_w"), self.tensor("enc1_b"), 1);
        nn::relu_inplace(&mut e1);
        let mut e2 = nn::conv3x3(&e1, self.tensor("enc2_w"), self.tensor("enc2_b"), 2);
        nn::relu_inplace(&mut e2);
        let mut e3 = nn::conv3x3(&e2, self.tensor("enc3_w"), self.tensor("enc3_b"), 2);
        nn::relu_inplace(&mut e3);
        let mut e4 = nn::conv3x3(&e3, self.tensor("enc4_w"), self.tensor("enc4_b"), 2);
        nn::relu_inplace(&mut e4);

        let out1 = nn::conv1x1(&e4, self.tensor("head1_w"), self.tensor("head1_b"));

        let cat3 = nn::concat_channels(&e4.upsample_nearest_2x(), &e3);
        let mut d3 = nn::conv3x3(&cat3, self.tensor("dec3_w"), self.tensor("dec3_b"), 1);
        nn::relu_inplace(&mut d3);
        let out2 = nn::conv1x1(&d3, self.tensor("head2_w"), self.tensor("head2_b"));

        let cat2 = nn::concat_channels(&d3.upsample_nearest_2x(), &e2);
        let mut d2 = nn::conv3x3(&cat2, self.tensor("dec2_w"), self.tensor("dec2_b"), 1);
        nn::relu_inplace(&mut d2);
        let out3 = nn::conv1x1(&d2, self.tensor("head3_w"), self.tensor("head3_b"));

        let cat1 = nn::concat_channels(&d2.upsample_nearest_2x(), &e1);
        let mut d1 = nn::conv3x3(&cat1, self.tensor("dec1_w"), self.tensor("dec1_b"), 1);
        nn::relu_inplace(&mut d1);
        let out4 = nn::conv1x1(&d1, self.tensor("head4_w"), self.tensor("head4_b"));

        FeaturePyramid::new([out1, out2, out3, out4])
    }
}
