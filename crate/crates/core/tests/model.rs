mod common;

use common::max_abs_diff;
use nalgebra::Vector3;
use prfusion_core::backbone::ImageBackbone;
use prfusion_core::geometry::{ExtrinsicCalibration, Pose};
use prfusion_core::image::Image;
use prfusion_core::model::{Model, ModelConfig, SceneFrame, Variant};
use prfusion_core::params::Parameterized;
use prfusion_core::synth::{generate_world, render_frame, WorldConfig};
use prfusion_core::Error;
use prfusion_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_world() -> WorldConfig {
    WorldConfig {
        n_places: 4,
        height: 32,
        width: 48,
        focal: 30.0,
        points_per_frame: 96,
        ..WorldConfig::default()
    }
}

fn frames(n: usize) -> Vec<SceneFrame> {
    let world = generate_world(5, tiny_world()).unwrap();
    world.visits.iter().take(n).map(|v| render_frame(&world, &v.pose).unwrap()).collect()
}

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        c: 8,
        variant,
        n2d: 6,
        n3d: 6,
        knn: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn descriptor_length_is_three_c() {
    let f = &frames(1)[0];
    for variant in [Variant::PrFusion, Variant::PrFusionPlusPlus] {
        let m = Model::new(config(variant)).unwrap();
        assert_eq!(m.describe(f).unwrap().f.len(), 24);
        assert_eq!(m.config.descriptor_len(), 24);
    }
}

#[test]
fn same_config_same_descriptor() {
    let f = &frames(1)[0];
    let a = Model::new(config(Variant::PrFusionPlusPlus)).unwrap();
    let b = Model::new(config(Variant::PrFusionPlusPlus)).unwrap();
    let da = a.describe(f).unwrap();
    assert_eq!(da, b.describe(f).unwrap());
    assert_eq!(da, a.describe(f).unwrap());
}

fn readout_grads(model: &Model, frame: &SceneFrame) -> Vec<(String, Vec<f64>)> {
    let d = model.forward(frame).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r: Vec<f64> = (0..d.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    d.mul(&Tensor::vector(r)).unwrap().sum().backward().unwrap();
    model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.grad().unwrap_or_default()))
        .collect()
}

#[test]
fn every_parameter_receives_gradient() {
    let f = &frames(1)[0];
    let mut cases = vec![config(Variant::PrFusion), config(Variant::PrFusionPlusPlus)];
    for edit in [
        |c: &mut ModelConfig| c.use_gfm = false,
        |c: &mut ModelConfig| c.use_ndm = false,
        |c: &mut ModelConfig| c.use_lfm = false,
    ] {
        let mut c = config(Variant::PrFusionPlusPlus);
        edit(&mut c);
        cases.push(c);
    }
    for cfg in cases {
        let m = Model::new(cfg.clone()).unwrap();
        for (name, g) in readout_grads(&m, f) {
            assert!(g.iter().any(|&v| v != 0.0), "{name} is dead in {cfg:?}");
        }
    }
}

#[test]
fn prfusion_ignores_the_calibration() {
    let f = &frames(2)[1];
    let mut shifted = f.clone();
    let cal = f.cal.unwrap();
    shifted.cal = Some(ExtrinsicCalibration {
        cam_from_lidar: Pose::new(*cal.cam_from_lidar.rotation(), Vector3::new(0.3, -0.2, 0.5)).unwrap(),
    });
    let mut missing = f.clone();
    missing.cal = None;

    let flat = Model::new(config(Variant::PrFusion)).unwrap();
    let d = flat.describe(f).unwrap();
    assert_eq!(d, flat.describe(&shifted).unwrap());
    assert_eq!(d, flat.describe(&missing).unwrap());

    let full = Model::new(config(Variant::PrFusionPlusPlus)).unwrap();
    assert_ne!(full.describe(f).unwrap(), full.describe(&shifted).unwrap());
    assert!(matches!(full.describe(&missing), Err(Error::Config(_))));
}

#[test]
fn wrong_channel_count_is_a_data_error() {
    let mut f = frames(1).remove(0);
    f.image = Image::filled(f.image.height(), f.image.width(), 1, 0.5).unwrap();
    let m = Model::new(config(Variant::PrFusion)).unwrap();
    assert!(matches!(m.describe(&f), Err(Error::Data(_))));
}

/// With every point projecting behind the camera, each 1×1 window holds a
/// single image node, so an identity value projection makes the local layer
/// a no-op and the two variants must agree.
#[test]
fn isolated_windows_with_identity_values_reduce_to_prfusion() {
    let mut f = frames(1).remove(0);
    let cal = f.cal.unwrap();
    f.cal = Some(ExtrinsicCalibration {
        cam_from_lidar: Pose::new(*cal.cam_from_lidar.rotation(), Vector3::new(0.0, 0.0, -1000.0)).unwrap(),
    });

    let mut full = Model::new(config(Variant::PrFusionPlusPlus)).unwrap();
    let c = full.config.c;
    full.lfm.as_mut().unwrap().attention.params.w_v = Tensor::eye(c);
    let weights: std::collections::HashMap<String, Tensor> = full.named_params().into_iter().collect();

    let mut flat = Model::new(config(Variant::PrFusion)).unwrap();
    flat.visit_mut("", &mut |name, t| {
        *t = weights[name.trim_start_matches('.')].clone();
    });

    let a = full.describe(&f).unwrap();
    let b = flat.describe(&f).unwrap();
    assert!(max_abs_diff(&a.f, &b.f) <= 1e-12);

    // a different value projection breaks the equivalence
    let mut other = full.clone();
    other.lfm.as_mut().unwrap().attention.params.w_v = Tensor::eye(c).scale(0.5);
    assert!(max_abs_diff(&other.describe(&f).unwrap().f, &b.f) > 1e-3);
}

#[test]
fn image_features_shift_with_the_input() {
    let (h, w, shift) = (24, 64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<f64> = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let pixel = |r: usize, c: usize, k: usize| data[(r * w + c) * 3 + k];
    let moved: Vec<f64> = (0..h)
        .flat_map(|r| (0..w).flat_map(move |c| (0..3).map(move |k| (r, c, k))))
        .map(|(r, c, k)| if c + shift < w { pixel(r, c + shift, k) } else { 0.25 })
        .collect();
    let bb = ImageBackbone::init(3, 4, &mut rng).unwrap();
    let a = bb.forward(&Image::new(h, w, 3, data.clone()).unwrap()).unwrap();
    let b = bb.forward(&Image::new(h, w, 3, moved).unwrap()).unwrap();
    let (fh, fw) = a.extent;
    assert_eq!((fh, fw), (3, 8));
    for r in 0..fh {
        for col in 2..=5 {
            let x = a.features.row(r * fw + col + 1);
            let y = b.features.row(r * fw + col);
            assert!(max_abs_diff(x, y) <= 1e-12, "row {r} col {col}");
        }
    }
}
