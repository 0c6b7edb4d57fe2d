//! Random gradient-check instances, one function per differentiable op.
//! Each returns the worst relative error for instance `seed`.

use std::sync::Arc;

use figconv::autodiff::{gradient_check, gradient_check_subset, Graph, Tensor, Var};
use figconv::dataio::{gen_synthetic, SynthConfig};
use figconv::figconv::fig_conv_graph;
use figconv::grid::{decode_graph, fuse_graph, Aabb, CombineMode, DecodePlan, FusionPlan, GridGeometry, PositionalEncoding};
use figconv::nn::{Ctx, Linear, ParamStore};
use figconv::pointconv::{default_covariance, point_to_grid_graph, EdgeEncoding, PointConvParams, PointGridEdges};
use figconv::spatial::Point3;
use figconv::train::{joint_loss_graph, Example};
use figconv::unet::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Large enough that round-off in `f(x ± h)` stays far below the gradients
/// being measured; the stencil truncation term is `O(h⁴)`.
const STEP: f64 = 3e-4;

fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar read-out `Σ y ⊙ P` with a fixed random projection, so every
/// output element carries a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> figconv::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let p = rt(&mut rng, g.shape(y));
    let p = g.leaf(p);
    let m = g.mul(y, p)?;
    Ok(g.sum_all(m))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect()
}

fn unit() -> Aabb {
    Aabb::new([0.0; 3], [1.0; 3]).unwrap()
}

fn store_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.tensors().to_vec()
}

fn bind_all(ctx: &mut Ctx<'_, f64>, vars: &[Var]) {
    let ids: Vec<_> = ctx.store().ids().collect();
    for (id, &v) in ids.into_iter().zip(vars) {
        ctx.bind(id, v);
    }
}

pub fn conv2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = [rng.random_range(1..=3), rng.random_range(1..=3)];
    let stride = [rng.random_range(1..=2), rng.random_range(1..=2)];
    let pad = [rng.random_range(0..=1), rng.random_range(0..=1)];
    let xs = [rng.random_range(1..=2), ci, rng.random_range(3..=6), rng.random_range(3..=6)];
    let x = rt(&mut rng, &xs);
    let w = rt(&mut rng, &[co, ci, k[0], k[1]]);
    gradient_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], pad, stride)?;
            project(g, y, seed)
        },
        &[x, w],
        STEP,
    )
    .unwrap()
}

pub fn conv3d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (ci, co) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let k = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
    let stride = [rng.random_range(1..=2), 1, rng.random_range(1..=2)];
    let pad = [rng.random_range(0..=1), rng.random_range(0..=1), rng.random_range(0..=1)];
    let xs = [1, ci, rng.random_range(3..=4), rng.random_range(3..=4), rng.random_range(3..=4)];
    let x = rt(&mut rng, &xs);
    let w = rt(&mut rng, &[co, ci, k[0], k[1], k[2]]);
    gradient_check(
        |g, v| {
            let y = g.conv3d(v[0], v[1], pad, stride)?;
            project(g, y, seed)
        },
        &[x, w],
        STEP,
    )
    .unwrap()
}

pub fn fig_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let r = rng.random_range(1..=3usize);
    let k = if rng.random_bool(0.5) { 2 * r - 1 } else { 2 * r + 1 };
    let axis = rng.random_range(0..3usize);
    let mut res = [rng.random_range(2..=4usize), rng.random_range(2..=4), rng.random_range(2..=4)];
    res[axis] = r;
    let stride = rng.random_range(1..=2);
    let x = rt(&mut rng, &[1, 2, res[0], res[1], res[2]]);
    let w = rt(&mut rng, &[2, 2, k, k, k]);
    gradient_check(
        |g, v| {
            let y = fig_conv_graph(g, v[0], v[1], axis, stride)?;
            project(g, y, seed)
        },
        &[x, w],
        STEP,
    )
    .unwrap()
}

pub fn trilinear_sampling(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let res = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
    let geom = GridGeometry::new(res, unit()).unwrap();
    let n = rng.random_range(1..=12);
    let pts = random_points(&mut rng, n);
    let map = Arc::new(geom.sampling_map::<f64>(&pts));
    let c = rng.random_range(1..=3);
    let x = rt(&mut rng, &[c, geom.num_voxels()]);
    gradient_check(
        |g, v| {
            let y = g.sparse(v[0], map.clone())?;
            let y = g.square(y);
            Ok(g.sum_all(y))
        },
        &[x],
        STEP,
    )
    .unwrap()
}

pub fn layer_norm_and_gelu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
    let c = rng.random_range(2..=5);
    let v = rng.random_range(1..=6);
    let x = rt(&mut rng, &[c, v]);
    let (gamma, beta) = (rt(&mut rng, &[c]), rt(&mut rng, &[c]));
    gradient_check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y = g.gelu(y);
            project(g, y, seed)
        },
        &[x, gamma, beta],
        STEP,
    )
    .unwrap()
}

pub fn point_to_grid(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let res = [rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(1..=3)];
    let geom = GridGeometry::new(res, unit()).unwrap();
    let edge = if seed % 2 == 0 { EdgeEncoding::Offset } else { EdgeEncoding::Raw };
    let cin = rng.random_range(1..=3);
    let mut store = ParamStore::<f64>::new();
    let params = PointConvParams::new(&mut store, "pc", cin, 4, 3, default_covariance(&geom), edge, &mut rng);
    let n = rng.random_range(5..=30);
    let pts = random_points(&mut rng, n);
    let edges = PointGridEdges::<f64>::search(&pts, &geom, &params).unwrap();
    let mut inputs = store_inputs(&store);
    let np = inputs.len();
    inputs.push(rt(&mut rng, &[cin, pts.len()]));
    gradient_check(
        |g, v| {
            let mut ctx = Ctx::new(g, &store);
            bind_all(&mut ctx, &v[..np]);
            let y = point_to_grid_graph(&mut ctx, v[np], &edges, &params)?;
            project(g, y, seed)
        },
        &inputs,
        STEP,
    )
    .unwrap()
}

pub fn fusion(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
    let r = rng.random_range(1..=2);
    let n = rng.random_range(2..=4);
    let geoms: Vec<GridGeometry> = [[r, n, n], [n, r, n], [n, n, r]]
        .iter()
        .map(|&res| GridGeometry::new(res, unit()).unwrap())
        .collect();
    let c = rng.random_range(1..=3);
    let mut store = ParamStore::<f64>::new();
    let layers: Vec<Option<Linear>> = (0..3)
        .map(|m| Some(Linear::new(&mut store, &format!("f{}", m), c, c, true, &mut rng)))
        .collect();
    let plan = FusionPlan::<f64>::new(&geoms);
    let mut inputs = store_inputs(&store);
    let np = inputs.len();
    for g in &geoms {
        inputs.push(rt(&mut rng, &[c, g.num_voxels()]));
    }
    gradient_check(
        |g, v| {
            let mut ctx = Ctx::new(g, &store);
            bind_all(&mut ctx, &v[..np]);
            let out = fuse_graph(&mut ctx, &v[np..], &plan, &layers)?;
            let flat: Vec<Var> = out
                .iter()
                .map(|&y| {
                    let n = ctx.graph.shape(y).iter().product();
                    ctx.graph.reshape(y, &[1, n])
                })
                .collect::<figconv::Result<_>>()?;
            let cat = ctx.graph.concat(&flat, 1)?;
            project(g, cat, seed)
        },
        &inputs,
        STEP,
    )
    .unwrap()
}

fn head_model(seed: u64, velocity: bool) -> Model<f64> {
    let config = ModelConfig {
        seed,
        velocity_conditioning: velocity,
        ..ModelConfig::minimal()
    };
    Model::new(config).unwrap()
}

fn checked_prefix(model: &Model<f64>, prefixes: &[&str]) -> Vec<usize> {
    model
        .store
        .ids()
        .filter(|&id| prefixes.iter().any(|p| model.store.name(id).starts_with(p)))
        .map(|id| id.index())
        .collect()
}

pub fn drag_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
    let velocity = (seed % 2 == 1).then(|| rng.random_range(10.0..30.0));
    let model = head_model(seed, velocity.is_some());
    let c = *model.config.hidden_channels.last().unwrap();
    let last = model.arch.geometries.last().unwrap();
    let mut inputs = store_inputs(&model.store);
    let np = inputs.len();
    for g in last {
        inputs.push(rt(&mut rng, &[c, g.num_voxels()]));
    }
    let mut checked = checked_prefix(&model, &["drag_head"]);
    checked.extend(np..inputs.len());
    gradient_check_subset(
        |g, v| {
            let mut ctx = Ctx::new(g, &model.store);
            bind_all(&mut ctx, &v[..np]);
            let d = model.drag_head_graph(&mut ctx, &v[np..], velocity)?;
            Ok(ctx.graph.sum_all(d))
        },
        &inputs,
        &checked,
        STEP,
        None,
        seed,
    )
    .unwrap()
}

pub fn pressure_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
    let model = head_model(seed, false);
    let c = model.config.hidden_channels[0];
    let geoms = &model.arch.geometries[0];
    let b = &model.config.bounds;
    let n = rng.random_range(1..=8);
    let pts: Vec<Point3> = (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = rng.random_range(b.min[a]..b.max[a]);
            }
            p
        })
        .collect();
    let combine = if seed % 2 == 0 { CombineMode::Sum } else { CombineMode::Product };
    let plan = DecodePlan::<f64>::new(geoms, &pts, &PositionalEncoding::default()).unwrap();
    let f = model.config.point_features();
    let mut inputs = store_inputs(&model.store);
    if combine == CombineMode::Product {
        // Centre every decoder output on 1 so the product of 8·M factors
        // neither vanishes nor explodes.
        for id in model.store.ids() {
            let name = model.store.name(id);
            if name.starts_with("decoder") && name.ends_with(".1.bias") {
                inputs[id.index()].data_mut().iter_mut().for_each(|b| *b += 1.0);
            }
        }
    }
    let np = inputs.len();
    for g in geoms {
        inputs.push(rt(&mut rng, &[c, g.num_voxels()]));
    }
    inputs.push(rt(&mut rng, &[f, n]));
    let mut checked = checked_prefix(&model, &["decoder", "pressure_head"]);
    checked.extend(np..inputs.len());
    let m = geoms.len();
    gradient_check_subset(
        |g, v| {
            let mut ctx = Ctx::new(g, &model.store);
            bind_all(&mut ctx, &v[..np]);
            let dec = decode_graph(&mut ctx, &v[np..np + m], &plan, &model.arch.decoders, combine)?;
            let x = ctx.graph.concat(&[dec, v[np + m]], 0)?;
            let y = model.arch.pressure_head.forward(&mut ctx, x)?;
            project(g, y, seed)
        },
        &inputs,
        &checked,
        STEP,
        None,
        seed,
    )
    .unwrap()
}

pub fn joint_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
    let n = rng.random_range(1..=20);
    let truth = rt(&mut rng, &[1, n]);
    let td = rng.random_range(0.3..1.0);
    let pd = rt(&mut rng, &[1, 1]);
    let pp = rt(&mut rng, &[1, n]);
    gradient_check(|g, v| joint_loss_graph(g, v[0], td, v[1], &truth), &[pd, pp], STEP).unwrap()
}

/// Whole network plus loss, on two sampled elements of every parameter.
pub fn end_to_end(seed: u64) -> f64 {
    let set = gen_synthetic(
        &SynthConfig {
            count: 1,
            seed,
            edge_length: 0.2,
            ..SynthConfig::default()
        },
        None,
    )
    .unwrap();
    let model = Model::<f64>::new(ModelConfig::minimal()).unwrap();
    let ex = Example::new(&model, &set.samples[0]).unwrap();
    let inputs = store_inputs(&model.store);
    let all: Vec<usize> = (0..inputs.len()).collect();
    gradient_check_subset(
        |g, v| {
            let mut ctx = Ctx::new(g, &model.store);
            bind_all(&mut ctx, v);
            let out = model.forward_graph(&mut ctx, &ex.input)?;
            joint_loss_graph(ctx.graph, out.drag, ex.drag, out.pressure, &ex.pressure)
        },
        &inputs,
        &all,
        STEP,
        Some(2),
        seed,
    )
    .unwrap()
}

pub type Check = fn(u64) -> f64;

/// Per-op checks, each run on instances `0..10`.
pub const OPS: [(&str, Check); 10] = [
    ("conv2d", conv2d),
    ("conv3d", conv3d),
    ("fig_conv", fig_conv),
    ("trilinear", trilinear_sampling),
    ("layer_norm_gelu", layer_norm_and_gelu),
    ("point_to_grid", point_to_grid),
    ("fusion", fusion),
    ("drag_head", drag_head),
    ("pressure_head", pressure_head),
    ("joint_loss", joint_loss),
];
