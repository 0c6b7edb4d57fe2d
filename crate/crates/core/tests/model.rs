use figconv::autodiff::Tensor;
use figconv::dataio::{Flow, SurfaceSample};
use figconv::unet::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> SurfaceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| [rng.random_range(0.0..1.3), rng.random_range(-0.25..0.25), rng.random_range(0.0..0.45)])
        .collect();
    let normals = (0..n)
        .map(|_| {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            [v[0] / l, v[1] / l, v[2] / l]
        })
        .collect();
    SurfaceSample {
        points,
        normals,
        areas: vec![0.01; n],
        pressure: vec![0.0; n],
        raw_pressure: vec![0.0; n],
        drag: 0.7,
        velocity: Some(25.0),
        flow: Flow {
            direction: [1.0, 0.0, 0.0],
            dynamic_pressure: 245.0,
            area: 0.1,
        },
        stats: None,
    }
}

#[test]
fn default_config_forward_on_thousand_points() {
    let model = Model::<f32>::new(ModelConfig::default()).unwrap();
    let pred = model.predict(&cloud(1000, 1)).unwrap();
    assert_eq!(pred.pressure.len(), 1000);
    assert!(pred.drag.is_finite());
    assert!(pred.pressure.iter().all(|p| p.is_finite()));
}

#[test]
fn batch_members_are_independent() {
    let model = Model::<f32>::new(ModelConfig::tiny()).unwrap();
    let a = model.prepare(&cloud(150, 2)).unwrap();
    let b = model.prepare(&cloud(90, 3)).unwrap();
    let c = model.prepare(&cloud(40, 4)).unwrap();
    let ab = model.forward_batch(&[a.clone(), b.clone()]).unwrap();
    let cb = model.forward_batch(&[c, b.clone()]).unwrap();
    assert_eq!(ab[0], model.forward(&a).unwrap());
    assert_eq!(ab[1], model.forward(&b).unwrap());
    assert_eq!(ab[1], cb[1]);
}

#[test]
fn zero_features_give_finite_output() {
    let model = Model::<f64>::new(ModelConfig::tiny()).unwrap();
    let mut s = cloud(64, 5);
    s.normals = vec![[0.0; 3]; 64];
    let pred = model.predict(&s).unwrap();
    assert!(pred.drag.is_finite());
    assert!(pred.pressure.iter().all(|p| p.is_finite()));
}

#[test]
fn single_point_cloud_runs() {
    let model = Model::<f64>::new(ModelConfig::minimal()).unwrap();
    let pred = model.predict(&cloud(1, 6)).unwrap();
    assert_eq!(pred.pressure.len(), 1);
}

#[test]
fn point_order_permutes_pressure_only() {
    let model = Model::<f64>::new(ModelConfig::minimal()).unwrap();
    let s = cloud(80, 7);
    let mut r = s.clone();
    r.points.reverse();
    r.normals.reverse();
    let a = model.predict(&s).unwrap();
    let b = model.predict(&r).unwrap();
    assert!((a.drag - b.drag).abs() < 1e-12);
    for i in 0..80 {
        assert!((a.pressure[i] - b.pressure[79 - i]).abs() < 1e-12);
    }
}

fn bottleneck(model: &Model<f64>, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = *model.config.hidden_channels.last().unwrap();
    model
        .arch
        .geometries
        .last()
        .unwrap()
        .iter()
        .map(|g| Tensor::from_fn(&[c, g.num_voxels()], |_| rng.random_range(-1.0..1.0)))
        .collect()
}

#[test]
fn drag_head_pools_over_voxels() {
    let model = Model::<f64>::new(ModelConfig::tiny()).unwrap();
    let grids = bottleneck(&model, 8);
    let shuffled: Vec<Tensor<f64>> = grids
        .iter()
        .map(|t| {
            let (c, v) = (t.shape()[0], t.shape()[1]);
            Tensor::from_fn(&[c, v], |i| t.data()[(i / v) * v + (v - 1 - i % v)])
        })
        .collect();
    let a = model.drag_head(&grids, None).unwrap();
    let b = model.drag_head(&shuffled, None).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(model.drag_head(&grids[..1], None).is_err());
}

#[test]
fn drag_head_uses_velocity_when_conditioned() {
    let config = ModelConfig {
        velocity_conditioning: true,
        ..ModelConfig::tiny()
    };
    let model = Model::<f64>::new(config).unwrap();
    let grids = bottleneck(&model, 9);
    let slow = model.drag_head(&grids, Some(10.0)).unwrap();
    let fast = model.drag_head(&grids, Some(30.0)).unwrap();
    assert!(slow != fast);
    assert!(model.drag_head(&grids, None).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = Model::<f32>::new(ModelConfig::tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = Model::<f32>::load(ModelConfig::tiny(), &path).unwrap();
    let s = cloud(100, 10);
    assert_eq!(model.predict(&s).unwrap(), back.predict(&s).unwrap());
    let other = ModelConfig {
        hidden_channels: vec![4, 16],
        ..ModelConfig::tiny()
    };
    assert!(Model::<f32>::load(other, &path).is_err());
}

#[test]
fn precisions_agree() {
    let single = Model::<f32>::new(ModelConfig::tiny()).unwrap();
    let double = single.cast::<f64>();
    let s = cloud(120, 11);
    let a = single.predict(&s).unwrap();
    let b = double.predict(&s).unwrap();
    assert!((a.drag - b.drag).abs() < 1e-4);
    let worst = a.pressure.iter().zip(&b.pressure).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{}", worst);
}
