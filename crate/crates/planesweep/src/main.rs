//! Command-line entry points: generate synthetic scenes, sweep scenes into
//! depth maps and a fused point cloud, evaluate depth maps, and run a quick
//! self-test of the numeric core.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use planesweep::cascade::CascadeEngine;
use planesweep::error::{Error, Result};
use planesweep::fusion::{fuse, FusionView};
use planesweep::geometry::CameraView;
use planesweep::grid::Grid;
use planesweep::io::config::RunConfig;
use planesweep::io::scene::{read_scene, write_scene, SceneBundle};
use planesweep::io::{pfm, ply};
use planesweep::metrics::{default_final_spacing, evaluate_depth};
use planesweep::synthetic::{self, SceneKind, SyntheticScene, TextureKind};

#[derive(Parser)]
#[command(name = "planesweep", version, about = "Plane-sweep multi-view stereo with non-uniform depth sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark scene with analytic ground truth.
    Synth(SynthArgs),
    /// Estimate depth for every view of a scene and fuse a point cloud.
    Sweep(SweepArgs),
    /// Compare an estimated depth map against ground truth.
    Eval(EvalArgs),
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

#[derive(Args)]
struct SynthArgs {
    /// plane | sphere | step
    #[arg(long, default_value = "plane")]
    kind: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    views: usize,
    #[arg(long, default_value_t = 80)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// noise | checker
    #[arg(long, default_value = "noise")]
    texture: String,
    /// Texture cell size in world units.
    #[arg(long)]
    cell: Option<f64>,
    /// Lateral camera spread in world units.
    #[arg(long)]
    spread: Option<f64>,
    /// Backdrop plane z for the sphere scene.
    #[arg(long)]
    backdrop: Option<f64>,
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Scene directory (images/, cams/, pair.txt).
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for depth maps, confidence maps and the cloud.
    #[arg(long)]
    out: PathBuf,
    /// Optional config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any `key=value` configuration overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    planes: Option<String>,
    #[arg(long)]
    range_scales: Option<String>,
    /// uniform | heuristic | patchnet
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// photometric | tiny-conv
    #[arg(long)]
    feature_mode: Option<String>,
    /// filter | tiny-3d
    #[arg(long)]
    regularizer: Option<String>,
    /// Number of input views per reference (paper default 5).
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Skip fusion and write only depth maps.
    #[arg(long, default_value_t = false)]
    no_fusion: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated depth map (.pfm).
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth depth map (.pfm); zeros mark invalid pixels.
    #[arg(long)]
    gt: PathBuf,
    /// Reference spacing for the inlier fractions; defaults to the final
    /// stage's plane spacing of the default synthetic depth range.
    #[arg(long)]
    spacing: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Eval(args) => run_eval(args),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut scene = match args.kind.as_str() {
        "plane" => SyntheticScene::plane(args.seed),
        "sphere" => SyntheticScene::sphere(args.seed),
        "step" => SyntheticScene::step(args.seed),
        other => return Err(Error::Config(format!("unknown scene kind '{other}'"))),
    };
    if let Some(spread) = args.spread {
        scene.spread = spread;
    }
    if let Some(z) = args.backdrop {
        if let SceneKind::Sphere { radius, .. } = scene.kind {
            scene.kind = SceneKind::Sphere {
                radius,
                backdrop: Some(z),
            };
        }
    }
    let cell = args.cell.unwrap_or(0.6);
    scene.texture = match args.texture.as_str() {
        "noise" => TextureKind::Noise { cell },
        "checker" => TextureKind::Checker { cell },
        other => return Err(Error::Config(format!("unknown texture '{other}'"))),
    };
    let rendered = synthetic::generate(&scene, args.views, args.height, args.width)?;
    // Invalid ground truth is encoded as depth 0 in the written maps.
    write_scene(
        &args.out,
        &rendered.views,
        &rendered.pairs,
        Some(&rendered.gt_depths),
    )?;
    println!(
        "wrote {} views of a {} scene to {}",
        rendered.views.len(),
        args.kind,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn apply_overrides(cfg: &mut RunConfig, args: &SweepArgs) -> Result<()> {
    for set in &args.sets {
        let (k, v) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set wants KEY=VALUE, got '{set}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = &args.planes {
        cfg.set("planes", v)?;
    }
    if let Some(v) = &args.range_scales {
        cfg.set("range_scales", v)?;
    }
    if let Some(v) = &args.sampler {
        cfg.set("sampler", v)?;
    }
    if let Some(v) = args.beta {
        cfg.set("beta", &v.to_string())?;
    }
    if let Some(v) = &args.feature_mode {
        cfg.set("feature_mode", v)?;
    }
    if let Some(v) = &args.regularizer {
        cfg.set("regularizer", v)?;
    }
    if let Some(v) = args.views {
        cfg.set("views", &v.to_string())?;
    }
    if let Some(v) = args.threads {
        cfg.set("threads", &v.to_string())?;
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    apply_overrides(&mut cfg, &args)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    let bundle = read_scene(&args.scene)?;
    std::fs::create_dir_all(&args.out)?;
    let producer = cfg.producer()?;
    let engine = CascadeEngine {
        config: cfg.cascade_config(),
        extractor: cfg.feature_extractor()?,
        producer: producer.as_ref(),
        regularizer: cfg.regularizer_mode()?,
    };

    let start = Instant::now();
    let mut estimates = Vec::with_capacity(bundle.view_count());
    for r in 0..bundle.view_count() {
        let sources = bundle.sources_for(r, cfg.views)?;
        if sources.is_empty() {
            return Err(Error::Structure(format!("view {r} has no source views")));
        }
        let ref_view = to_camera_view(&bundle, r);
        let src_views: Vec<CameraView> = sources.iter().map(|&s| to_camera_view(&bundle, s)).collect();
        let stages = engine.run(&ref_view, &src_views)?;
        let finest = stages.into_iter().next_back().expect("four stages");
        pfm::write_depth(&finest.depth, &args.out.join(format!("depth_{r:08}.pfm")))?;
        pfm::write_depth(
            &finest.neighborhood_confidence(1),
            &args.out.join(format!("confidence_{r:08}.pfm")),
        )?;
        println!(
            "view {r}: depth in [{:.3}, {:.3}]",
            finest.depth.data().iter().cloned().fold(f64::INFINITY, f64::min),
            finest.depth.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        );
        estimates.push(finest);
    }
    println!("swept {} views in {:.2?}", bundle.view_count(), start.elapsed());

    if !args.no_fusion {
        let views: Vec<FusionView> = bundle
            .views
            .iter()
            .zip(&estimates)
            .map(|(v, e)| FusionView {
                camera: &v.camera,
                estimate: e,
                image: &v.image,
                color: v.color.as_ref(),
            })
            .collect();
        let (cloud, stats) = fuse(&views, &cfg.fusion)?;
        if stats.is_empty() {
            eprintln!("warning: no pixel survived the fusion filters; the cloud is empty");
        }
        let cloud_path = args.out.join("fused.ply");
        ply::write_ply(&cloud, &cloud_path)?;
        println!(
            "fused {} points ({} confident / {} consistent of {} pixels) -> {}",
            cloud.len(),
            stats.confident,
            stats.consistent,
            stats.pixels,
            cloud_path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn to_camera_view(bundle: &SceneBundle, index: usize) -> CameraView {
    CameraView::from_image(bundle.views[index].camera.clone(), &bundle.views[index].image)
}

fn run_eval(args: EvalArgs) -> Result<ExitCode> {
    let est = pfm::read_depth(&args.est)?;
    let gt = pfm::read_depth(&args.gt)?;
    let mask = Grid::from_fn(gt.height(), gt.width(), |y, x| gt.at(y, x) > 0.0);
    let spacing = args.spacing.unwrap_or_else(|| default_final_spacing(4.8));
    let m = evaluate_depth(&est, &gt, &mask, spacing)?;
    println!("valid pixels: {}", m.valid_pixels);
    println!("mae:  {:.6}", m.mean_absolute_error);
    println!("rmse: {:.6}", m.rmse);
    println!(
        "within 1x/2x/4x spacing ({:.4}): {:.3} / {:.3} / {:.3}",
        spacing, m.within_spacing[0], m.within_spacing[1], m.within_spacing[2]
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// Self-test
// ---------------------------------------------------------------------------

fn run_selftest() -> Result<ExitCode> {
    let mut all_ok = true;
    let mut check = |name: &str, ok: bool| {
        println!("[{}] {name}", if ok { "PASS" } else { "FAIL" });
        all_ok &= ok;
    };

    check("homography agrees with lift-transform-project", selftest_homography());
    check("plane placement centers on the previous estimate", selftest_centering());
    check("sample cost and intervals normalize", selftest_normalization());
    check("depth regression stays inside the plane span", selftest_regression());
    check("patch network gradient matches finite differences", selftest_gradient());
    check("fronto-parallel scene end-to-end", selftest_end_to_end());

    if all_ok {
        println!("selftest: all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numeric("selftest failed".into()))
    }
}

fn selftest_homography() -> bool {
    use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
    use planesweep::geometry::{homography_for_depth, Camera};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
    let mut camera = |rng: &mut rand_chacha::ChaCha8Rng| {
        let f = rng.gen_range(50.0..150.0);
        let k = Matrix3::new(f, 0.0, 40.0, 0.0, f, 30.0, 0.0, 0.0, 1.0);
        let rot = Rotation3::from_euler_angles(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        );
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        t[(0, 3)] = rng.gen_range(-1.0..1.0);
        t[(1, 3)] = rng.gen_range(-1.0..1.0);
        Camera::new(k, t, (1.0, 10.0)).unwrap()
    };
    for _ in 0..100 {
        let ref_cam = camera(&mut rng);
        let src_cam = camera(&mut rng);
        let d = rng.gen_range(2.0..9.0);
        let h = match homography_for_depth(&ref_cam, &src_cam, d) {
            Ok(h) => h,
            Err(_) => return false,
        };
        let px = rng.gen_range(0.0..80.0);
        let py = rng.gen_range(0.0..60.0);
        let v = h * Vector3::new(px, py, 1.0);
        let world = ref_cam.lift_to_world(px - 0.5, py - 0.5, d);
        let (ox, oy, od) = src_cam.project_from_world(&world);
        if od <= 0.0 {
            continue;
        }
        let err = ((v.x / v.z - 0.5) - ox).abs() + ((v.y / v.z - 0.5) - oy).abs();
        if err > 1e-9 * ox.abs().max(oy.abs()).max(1.0) {
            return false;
        }
    }
    true
}

fn selftest_centering() -> bool {
    use planesweep::grid::Volume;
    use planesweep::sampling::plane_depths;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(101);
    for _ in 0..1000 {
        let d = [4usize, 8, 16, 48][rng.gen_range(0..4)];
        let iv: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..2.0)).collect();
        let prev = rng.gen_range(0.5..100.0);
        let vol = Volume::from_vec(1, 1, d, iv).unwrap();
        let planes = plane_depths(&Grid::filled(1, 1, prev), &vol, 5.0, 1.0).unwrap();
        let px = planes.pixel(0, 0);
        if ((px[d / 2 - 1] + px[d / 2]) / 2.0 - prev).abs() > 1e-12 * prev.max(1.0) {
            return false;
        }
    }
    true
}

fn selftest_normalization() -> bool {
    use planesweep::grid::Volume;
    use planesweep::sampling::{
        intervals_from_distribution, plane_depths, sample_cost, DeviationNorm,
        SamplingDistribution,
    };
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(102);
    for _ in 0..200 {
        let d = 8usize;
        let mut p: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        let dist =
            SamplingDistribution::new(Volume::from_vec(1, 1, d, p).unwrap()).unwrap();
        let range = rng.gen_range(0.5..20.0);
        let iv = intervals_from_distribution(&dist, range).unwrap();
        if (iv.pixel(0, 0).iter().sum::<f64>() - range).abs() > 1e-6 * range {
            return false;
        }
        let prev = Grid::filled(1, 1, 5.0);
        let planes = plane_depths(&prev, &iv, range, 1.0).unwrap();
        let probs = Volume::filled(1, 1, d, 1.0 / d as f64);
        let sc = sample_cost(&planes, &prev, &probs, DeviationNorm::Range).unwrap();
        if (sc.pixel(0, 0).iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return false;
        }
    }
    true
}

fn selftest_regression() -> bool {
    use planesweep::costvol::depth_regression;
    use planesweep::grid::Volume;
    use planesweep::sampling::{intervals_from_distribution, plane_depths, SamplingDistribution};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(103);
    for _ in 0..500 {
        let d = 8usize;
        let dist = SamplingDistribution::uniform(1, 1, d).unwrap();
        let range = rng.gen_range(0.5..4.0);
        let iv = intervals_from_distribution(&dist, range).unwrap();
        let planes = plane_depths(&Grid::filled(1, 1, 5.0), &iv, range, 1.0).unwrap();
        let mut logits = Volume::zeros(1, 1, d);
        for v in logits.data_mut() {
            *v = rng.gen_range(-10.0..10.0);
        }
        let est = depth_regression(&logits, &planes).unwrap();
        let px = planes.pixel(0, 0);
        let depth = est.depth.at(0, 0);
        if depth < px[0] - 1e-12 || depth > px[d - 1] + 1e-12 {
            return false;
        }
    }
    true
}

fn selftest_gradient() -> bool {
    use planesweep::grid::Volume;
    use planesweep::sampler::{patchnet_forward, patchnet_gradient, PatchNetParams, SamplerInput};
    use planesweep::sampling::SampleCost;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(104);
    let params = PatchNetParams::seeded(104, 4, 4).unwrap();
    let mut sc = Volume::zeros(8, 8, 4);
    for y in 0..8 {
        for x in 0..8 {
            let px = sc.pixel_mut(y, x);
            let mut sum = 0.0;
            for v in px.iter_mut() {
                *v = rng.gen_range(0.05..1.0);
                sum += *v;
            }
            px.iter_mut().for_each(|v| *v /= sum);
        }
    }
    let sc = SampleCost::from_volume(sc).unwrap();
    let depth = Grid::filled(8, 8, 0.4);
    let lum = Grid::filled(8, 8, 0.6);
    let input = match SamplerInput::new(&sc, &depth, &lum) {
        Ok(i) => i,
        Err(_) => return false,
    };
    let mut up = Volume::zeros(8, 8, 4);
    for v in up.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let analytic = match patchnet_gradient(&input, &params, &up) {
        Ok(g) => g,
        Err(_) => return false,
    };
    let loss = |p: &PatchNetParams| -> f64 {
        patchnet_forward(&input, p)
            .unwrap()
            .volume()
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let eps = 1e-5;
    let total = params.flat_len();
    for k in 0..50 {
        let i = (k * 7919) % total;
        let mut plus = params.clone();
        plus.set_flat(i, plus.get_flat(i) + eps);
        let mut minus = params.clone();
        minus.set_flat(i, minus.get_flat(i) - eps);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let a = analytic.get_flat(i);
        if (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6) > 1e-4 {
            return false;
        }
    }
    true
}

fn selftest_end_to_end() -> bool {
    use planesweep::costvol::{FilterKernel, RegularizerMode};
    use planesweep::geometry::FeatureExtractor;
    use planesweep::sampler::UniformProducer;
    let scene = SyntheticScene::plane(1);
    let rendered = match synthetic::generate(&scene, 5, 32, 40) {
        Ok(r) => r,
        Err(_) => return false,
    };
    let ref_view = to_view(&rendered, 0);
    let sources: Vec<CameraView> = rendered.pairs[0].1.iter().map(|&s| to_view(&rendered, s)).collect();
    let engine = CascadeEngine {
        config: planesweep::cascade::CascadeConfig::default(),
        extractor: FeatureExtractor::Photometric,
        producer: &UniformProducer,
        regularizer: RegularizerMode::Filter {
            radii: [1, 1, 1],
            kernel: FilterKernel::Box,
        },
    };
    let estimates = match engine.run(&ref_view, &sources) {
        Ok(e) => e,
        Err(_) => return false,
    };
    let gt = &rendered.gt_depths[0];
    let final_est = &estimates[3];
    let mae: f64 = final_est
        .depth
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f64>()
        / gt.data().len() as f64;
    mae < default_final_spacing(4.8) * 2.0
}

fn to_view(rendered: &synthetic::RenderedScene, i: usize) -> CameraView {
    CameraView::from_image(rendered.views[i].camera.clone(), &rendered.views[i].image)
}
