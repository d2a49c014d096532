//! Scratch probe: score curves at failing pixels of one plane scene.

use mvs_core::geometry::inverse_depth_hypotheses;
use mvs_core::pipeline::{
    build_cost_volume_plain, ce_depth_targets, downsample_nearest, fully_swept_mask,
    HypothesisVolume,
};
use mvs_core::scenes::{generate_scene, ideal_features, scene_seeds, GeometryKind, SceneConfig, SceneSample};
use mvs_core::tensor::Tensor;

fn main() {
    let cfg = SceneConfig {
        height: 128,
        width: 384,
        arc_degrees: 8.0,
        focal_factor: 5.0,
        texture_cell_mm: 96.0,
        octaves: 3,
        geometry: GeometryKind::Plane,
        ..SceneConfig::default()
    };
    let seed = scene_seeds(606, 1)[0];
    let sample: SceneSample<f64> = generate_scene(seed, &cfg).unwrap();
    let feats: Vec<Tensor<f64>> =
        sample.images.iter().map(|im| ideal_features(im, 8, 8).unwrap()).collect();
    let cams: Vec<_> = sample.cameras.iter().map(|c| c.scaled(1.0 / 8.0).unwrap()).collect();
    let ladder =
        inverse_depth_hypotheses(cams[0].d_near, cams[0].d_far, 16, 0, None, None).unwrap();
    let (h, w) = (cfg.height / 8, cfg.width / 8);
    let vol = HypothesisVolume::broadcast(&ladder, h, w).unwrap();
    let srcs: Vec<&Tensor<f64>> = feats[1..].iter().collect();
    let cost = build_cost_volume_plain(&feats[0], &srcs, &cams, &vol, 8).unwrap();
    let sup = fully_swept_mask(&cost.valid).unwrap();
    let gt = downsample_nearest(&sample.gt_depth, 3).unwrap();
    let targets = ce_depth_targets(&vol, &gt, &sup).unwrap();
    let hw = h * w;

    let depth = gt.data()[hw / 2];
    let i0 = 1.0 / 400.0;
    let step = (1.0 / 400.0 - 1.0 / 1000.0) / 15.0;
    let fbin = (i0 - 1.0 / depth) / step;
    println!("scene depth {depth:.3}  continuous bin {fbin:.3}");

    let mut shown_wrong = 0;
    let mut shown_right = 0;
    for (p, &t) in targets.iter().enumerate() {
        if t < 0 {
            continue;
        }
        let curve: Vec<f64> = (0..16)
            .map(|k| (0..8).map(|g| cost.scores.data()[(g * 16 + k) * hw + p]).sum::<f64>() / 8.0)
            .collect();
        let bk = curve
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let wrong = bk != t as usize;
        if (wrong && shown_wrong < 4) || (!wrong && shown_right < 2) {
            let (i, j) = (p / w, p % w);
            println!(
                "pix ({i:2},{j:3}) target {t:2} argmax {bk:2} curve {}",
                curve.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>().join(" ")
            );
            if wrong {
                shown_wrong += 1;
            } else {
                shown_right += 1;
            }
        }
    }
    let _ = sup;
}
