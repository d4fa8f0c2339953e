//! Synthetic verification scenes rendered by exact ray evaluation: every
//! pixel's ground-truth depth is the analytic intersection of its ray with
//! the scene surface, and its intensity is a procedural texture evaluated at
//! the 3D hit point, so multi-view images are exactly consistent.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::grid::Grid;
use crate::io::scene::SceneView;

/// Scene surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneKind {
    /// Fronto-parallel plane at world z = depth (cameras sit near z = 0
    /// looking along +z, so per-view depth is constant).
    Plane { depth: f64 },
    /// Sphere of the given radius at the origin, viewed from a camera ring,
    /// in front of a backdrop plane at world z = backdrop (None for empty
    /// background with invalid depth).
    Sphere { radius: f64, backdrop: Option<f64> },
    /// Two fronto-parallel half-planes split at world x = 0, joined by a
    /// vertical wall.
    TwoPlaneStep { near_depth: f64, far_depth: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TextureKind {
    /// Smooth two-octave value noise over world coordinates.
    Noise { cell: f64 },
    /// Hard 3D checkerboard.
    Checker { cell: f64 },
}

/// Full parameterization of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub texture: TextureKind,
    pub seed: u64,
    /// Distance from the camera array center to the scene center.
    pub standoff: f64,
    /// Lateral half-extent of the camera array (chord length for the ring).
    pub spread: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub depth_range: (f64, f64),
}

impl SyntheticScene {
    pub fn plane(seed: u64) -> Self {
        Self {
            kind: SceneKind::Plane { depth: 4.0 },
            texture: TextureKind::Noise { cell: 0.6 },
            seed,
            standoff: 4.0,
            spread: 1.2,
            focal_factor: 1.25,
            depth_range: (1.6, 6.4),
        }
    }

    pub fn sphere(seed: u64) -> Self {
        Self {
            kind: SceneKind::Sphere {
                radius: 1.0,
                backdrop: None,
            },
            texture: TextureKind::Noise { cell: 0.6 },
            seed,
            standoff: 4.2,
            spread: 1.2,
            focal_factor: 1.25,
            depth_range: (1.6, 6.4),
        }
    }

    pub fn step(seed: u64) -> Self {
        Self {
            kind: SceneKind::TwoPlaneStep {
                near_depth: 3.4,
                far_depth: 4.6,
            },
            texture: TextureKind::Noise { cell: 0.6 },
            seed,
            standoff: 4.0,
            spread: 1.2,
            focal_factor: 1.25,
            depth_range: (1.6, 6.4),
        }
    }
}

/// Views with analytic ground truth; view 0 is the most central camera.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub views: Vec<SceneView>,
    pub pairs: Vec<(usize, Vec<usize>)>,
    pub gt_depths: Vec<Grid<f64>>,
    pub gt_masks: Vec<Grid<bool>>,
}

pub fn generate(
    scene: &SyntheticScene,
    n_views: usize,
    height: usize,
    width: usize,
) -> Result<RenderedScene> {
    if height % 8 != 0 || width % 8 != 0 {
        return Err(Error::Shape(format!(
            "synthetic resolution {height}x{width} must be divisible by 8"
        )));
    }
    if n_views < 2 {
        return Err(Error::Config("need at least two views".into()));
    }
    if !(scene.spread > 0.0) {
        return Err(Error::Config("degenerate camera ring: spread must be positive".into()));
    }
    let (d_min, d_max) = scene.depth_range;
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(Error::Config("bad depth range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let focal = scene.focal_factor * width as f64;
    let k = Matrix3::new(
        focal,
        0.0,
        width as f64 / 2.0,
        0.0,
        focal,
        height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );

    // Lateral offsets ordered center-out so view 0 is the reference of choice.
    let mut offsets: Vec<f64> = (0..n_views)
        .map(|i| {
            if n_views == 1 {
                0.0
            } else {
                scene.spread * (2.0 * i as f64 / (n_views - 1) as f64 - 1.0)
            }
        })
        .collect();
    offsets.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // The reference view (index 0) stays exactly on the array axis; the
    // others get a small vertical jitter for two-dimensional baselines.
    let mut jitter: Vec<f64> = (0..n_views)
        .map(|_| rng.gen_range(-0.15..0.15) * scene.spread)
        .collect();
    jitter[0] = 0.0;

    let cameras: Vec<Camera> = match scene.kind {
        SceneKind::Plane { .. } | SceneKind::TwoPlaneStep { .. } => offsets
            .iter()
            .zip(&jitter)
            .map(|(&dx, &dy)| {
                let mut t = Matrix4::identity();
                // world -> camera for a camera centered at (dx, dy, 0).
                t[(0, 3)] = -dx;
                t[(1, 3)] = -dy;
                Camera::new(k, t, scene.depth_range)
            })
            .collect::<Result<_>>()?,
        SceneKind::Sphere { .. } => offsets
            .iter()
            .zip(&jitter)
            .map(|(&chord, &dy)| {
                let theta = chord / scene.standoff;
                let eye = Vector3::new(
                    scene.standoff * theta.sin(),
                    dy,
                    -scene.standoff * theta.cos(),
                );
                Camera::new(k, look_at(&eye, &Vector3::zeros()), scene.depth_range)
            })
            .collect::<Result<_>>()?,
    };

    let texture = Texture::new(scene.texture, scene.seed);
    let mut views = Vec::with_capacity(n_views);
    let mut gt_depths = Vec::with_capacity(n_views);
    let mut gt_masks = Vec::with_capacity(n_views);
    for cam in &cameras {
        let (image, depth, mask) = render(cam, height, width, &scene.kind, &texture);
        views.push(SceneView {
            camera: cam.clone(),
            image,
            color: None,
        });
        gt_depths.push(depth);
        gt_masks.push(mask);
    }

    // Rank sources per reference by camera-center distance.
    let centers: Vec<Vector3<f64>> = cameras.iter().map(camera_center).collect();
    let pairs: Vec<(usize, Vec<usize>)> = (0..n_views)
        .map(|r| {
            let mut others: Vec<usize> = (0..n_views).filter(|&s| s != r).collect();
            others.sort_by(|&a, &b| {
                (centers[a] - centers[r])
                    .norm()
                    .total_cmp(&(centers[b] - centers[r]).norm())
            });
            (r, others)
        })
        .collect();

    Ok(RenderedScene {
        views,
        pairs,
        gt_depths,
        gt_masks,
    })
}

fn camera_center(cam: &Camera) -> Vector3<f64> {
    let t_inv = cam
        .extrinsics()
        .try_inverse()
        .expect("validated extrinsics are invertible");
    Vector3::new(t_inv[(0, 3)], t_inv[(1, 3)], t_inv[(2, 3)])
}

/// World-to-camera rigid transform for an eye looking at a target,
/// world +y up (mapped to image-down rows per the projection convention).
fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Matrix4<f64> {
    let z = (target - eye).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let mut t = Matrix4::identity();
    for c in 0..3 {
        t[(0, c)] = x[c];
        t[(1, c)] = y[c];
        t[(2, c)] = z[c];
    }
    t[(0, 3)] = -x.dot(eye);
    t[(1, 3)] = -y.dot(eye);
    t[(2, 3)] = -z.dot(eye);
    t
}

const BACKGROUND_INTENSITY: f64 = 16.0;

fn render(
    cam: &Camera,
    height: usize,
    width: usize,
    kind: &SceneKind,
    texture: &Texture,
) -> (Grid<f64>, Grid<f64>, Grid<bool>) {
    let k_inv = cam.intrinsics().try_inverse().expect("validated");
    let t_inv = cam.extrinsics().try_inverse().expect("validated");
    let rot_t = t_inv.fixed_view::<3, 3>(0, 0).into_owned();
    let eye = Vector3::new(t_inv[(0, 3)], t_inv[(1, 3)], t_inv[(2, 3)]);

    let mut image = Grid::zeros(height, width);
    let mut depth = Grid::zeros(height, width);
    let mut mask = Grid::filled(height, width, false);
    for y in 0..height {
        for x in 0..width {
            // dir_cam has z = 1, so the ray parameter t is the camera depth.
            let dir_cam = k_inv * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            let dir = rot_t * dir_cam;
            match intersect(kind, &eye, &dir) {
                Some(t) => {
                    let hit = eye + dir * t;
                    image.set(y, x, texture.sample(&hit));
                    depth.set(y, x, t);
                    mask.set(y, x, true);
                }
                None => {
                    image.set(y, x, BACKGROUND_INTENSITY);
                    depth.set(y, x, 0.0);
                }
            }
        }
    }
    (image, depth, mask)
}

/// Smallest positive ray parameter hitting the surface; the parameter equals
/// camera depth because ray directions are normalized to unit camera z.
fn intersect(kind: &SceneKind, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    match *kind {
        SceneKind::Plane { depth } => plane_hit(origin, dir, depth),
        SceneKind::Sphere { radius, backdrop } => {
            let a = dir.dot(dir);
            let b = 2.0 * origin.dot(dir);
            let c = origin.dot(origin) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t > 1e-9 {
                    return Some(t);
                }
            }
            backdrop.and_then(|z| plane_hit(origin, dir, z))
        }
        SceneKind::TwoPlaneStep {
            near_depth,
            far_depth,
        } => {
            let mut best: Option<f64> = None;
            if let Some(t) = plane_hit(origin, dir, near_depth) {
                if origin.x + t * dir.x < 0.0 {
                    best = merge_min(best, t);
                }
            }
            if let Some(t) = plane_hit(origin, dir, far_depth) {
                if origin.x + t * dir.x >= 0.0 {
                    best = merge_min(best, t);
                }
            }
            if dir.x.abs() > 1e-12 {
                let t = -origin.x / dir.x;
                if t > 1e-9 {
                    let z = origin.z + t * dir.z;
                    if z >= near_depth && z <= far_depth {
                        best = merge_min(best, t);
                    }
                }
            }
            best
        }
    }
}

fn plane_hit(origin: &Vector3<f64>, dir: &Vector3<f64>, plane_z: f64) -> Option<f64> {
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let t = (plane_z - origin.z) / dir.z;
    (t > 1e-9).then_some(t)
}

fn merge_min(best: Option<f64>, t: f64) -> Option<f64> {
    Some(match best {
        Some(b) => b.min(t),
        None => t,
    })
}

// ---------------------------------------------------------------------------
// Procedural textures
// ---------------------------------------------------------------------------

struct Texture {
    kind: TextureKind,
    seed: u64,
}

impl Texture {
    fn new(kind: TextureKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    fn sample(&self, p: &Vector3<f64>) -> f64 {
        match self.kind {
            TextureKind::Noise { cell } => {
                // Two octaves a factor four apart: the coarse one survives
                // the 1/8-resolution stage, the fine one carries the
                // full-resolution subpixel signal.
                let n1 = value_noise(p / cell, self.seed);
                let n2 = value_noise(p / (cell * 0.25), self.seed ^ 0x9E37_79B9_7F4A_7C15);
                let n = 0.6 * n1 + 0.4 * n2;
                20.0 + 215.0 * n
            }
            TextureKind::Checker { cell } => {
                let parity = (p.x / cell).floor() as i64
                    + (p.y / cell).floor() as i64
                    + (p.z / cell).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    60.0
                } else {
                    200.0
                }
            }
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice_value(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed;
    h = splitmix64(h ^ (ix as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    h = splitmix64(h ^ (iy as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25));
    h = splitmix64(h ^ (iz as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise in [0, 1] with smoothstep-eased weights.
fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (
        smoothstep(p.x - fx),
        smoothstep(p.y - fy),
        smoothstep(p.z - fz),
    );
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                acc += wx * wy * wz * lattice_value(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}
