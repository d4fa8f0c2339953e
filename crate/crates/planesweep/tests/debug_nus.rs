use planesweep::cascade::*;
use planesweep::costvol::*;
use planesweep::geometry::*;
use planesweep::sampler::{DistributionProducer, HeuristicProducer, UniformProducer};
use planesweep::synthetic::*;

fn mae_final(scene: &SyntheticScene, producer: &dyn DistributionProducer) -> f64 {
    let (h, w) = (64usize, 80usize);
    let rendered = generate(scene, 5, h, w).unwrap();
    let ref_view = CameraView::from_image(rendered.views[0].camera.clone(), &rendered.views[0].image);
    let sources: Vec<CameraView> = rendered.pairs[0].1
        .iter()
        .map(|&s| CameraView::from_image(rendered.views[s].camera.clone(), &rendered.views[s].image))
        .collect();
    let eng = CascadeEngine {
        config: CascadeConfig::default(),
        extractor: FeatureExtractor::Photometric,
        producer,
        regularizer: RegularizerMode::Filter { radii: [1, 1, 1], kernel: FilterKernel::Box },
    };
    let estimates = eng.run(&ref_view, &sources).unwrap();
    let gt = &rendered.gt_depths[0];
    let mask = &rendered.gt_masks[0];
    let e = &estimates[3];
    let (mut s, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if *mask.get(y, x) {
                s += (e.depth.at(y, x) - gt.at(y, x)).abs();
                n += 1;
            }
        }
    }
    s / n as f64
}

#[test]
fn nus_vs_us() {
    for backdrop in [None, Some(0.2)] {
        for beta in [2.0, 8.0, 20.0, 50.0] {
            let mut wins = 0;
            let mut deltas = Vec::new();
            for seed in 0..8u64 {
                let mut scene = SyntheticScene::sphere(seed);
                scene.kind = SceneKind::Sphere { radius: 1.0, backdrop };
                scene.texture = TextureKind::Noise { cell: 0.6 };
                let us = mae_final(&scene, &UniformProducer);
                let nus = mae_final(&scene, &HeuristicProducer { sharpness: beta });
                if nus <= us { wins += 1; }
                deltas.push(format!("{:+.5}", nus - us));
            }
            eprintln!("backdrop={backdrop:?} beta={beta}: NUS wins {wins}/8, deltas {deltas:?}");
        }
    }
}
