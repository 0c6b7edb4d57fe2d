//! Self-check suite: every check compares a fast path against an
//! independent oracle.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv3d_direct_macs, gradient_check, Scalar, Tensor};
use crate::error::Result;
use crate::figconv::{
    band_index, fig_conv_folded, fig_conv_graph, fig_conv_macs, fig_conv_naive, hankel_index, hankel_kernel_2d,
    hankel_reparam_1d, high_res_axes,
};
use crate::grid::{Aabb, GridGeometry};
use crate::spatial::{brute_force_radius, neighbors, NeighborSpec, Point3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Add an offset to one entry of every folded Hankel kernel; the
    /// equivalence checks must then fail.
    pub perturb_hankel: bool,
    /// Random instances per randomized check.
    pub instances: usize,
    pub seed: u64,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

/// Random FIG instance: `(x shape, kernel shape, rank axis)`, `K ∈ {2r−1, 2r+1}`.
pub fn random_fig_instance(rng: &mut ChaCha8Rng, max_res: usize, max_c: usize) -> ([usize; 5], [usize; 5], usize) {
    let r = rng.random_range(1..=4usize);
    let k = if rng.random_bool(0.5) { 2 * r - 1 } else { 2 * r + 1 };
    let axis = rng.random_range(0..3usize);
    let [a, b] = high_res_axes(axis);
    let mut res = [0usize; 3];
    res[axis] = r;
    res[a] = rng.random_range(1..=max_res);
    res[b] = rng.random_range(1..=max_res);
    let ci = rng.random_range(1..=max_c);
    let co = rng.random_range(1..=max_c);
    let b_ = rng.random_range(1..=2usize);
    ([b_, ci, res[0], res[1], res[2]], [co, ci, k, k, k], axis)
}

/// Worst deviation between the folded Hankel path and the direct 3D
/// convolution. Inputs are `U(−1, 1)`; kernels too when `fan_in_scale` is
/// off, otherwise `U(±1/√(Ci·K³))` as at model initialization.
fn reparam_deviation<T: Scalar>(opts: &VerifyOptions, salt: u64, fan_in_scale: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.instances {
        let (xs, ks, axis) = random_fig_instance(&mut rng, 12, 4);
        let x = rand_tensor::<T>(&mut rng, &xs);
        let mut w = rand_tensor::<T>(&mut rng, &ks);
        if fan_in_scale {
            let s = 1.0 / ((ks[1] * ks[2] * ks[3] * ks[4]) as f64).sqrt();
            w = w.scale(T::from_f64_lossy(s));
        }
        let r = xs[2 + axis];
        let mut k2 = hankel_kernel_2d(&w, r, axis)?;
        if opts.perturb_hankel {
            // Central tap of the first block: always inside the input.
            let k = ks[2];
            let p = (k - 1) / 2;
            k2.data_mut()[p * k + p] += T::from_f64_lossy(0.5);
        }
        let fast = fig_conv_folded(&x, &k2, axis, 1)?;
        let slow = fig_conv_naive(&x, &w, axis, 1)?;
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    Ok(worst)
}

fn hankel_checks(opts: &VerifyOptions) -> Result<(bool, String)> {
    let h = hankel_reparam_1d(&[1.0, 0.0, -1.0], 2)?;
    let y: Vec<f64> = h.iter().map(|row| row[0] * 1.0 + row[1] * 2.0).collect();
    let symbolic = hankel_reparam_1d(&["w0", "w1", "w2"], 2)? == vec![vec!["w0", "w1"], vec!["w1", "w2"]];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4a);
    let mut mismatches = 0;
    for _ in 0..opts.instances {
        let r = rng.random_range(1..=4usize);
        let k = 2 * r - 1;
        let axis = rng.random_range(0..3usize);
        let shape = [rng.random_range(1..=3usize), rng.random_range(1..=3usize), k, k, k];
        if hankel_index(&shape, r, axis)? != band_index(&shape, r, axis) {
            mismatches += 1;
        }
    }
    let ok = symbolic && y == vec![1.0, -2.0] && mismatches == 0;
    Ok((ok, format!("y = {:?}, {} index mismatches", y, mismatches)))
}

fn radius_check(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5b);
    let mut failures = 0;
    for i in 0..opts.instances {
        let n = rng.random_range(0..=2000usize);
        let q = rng.random_range(1..=200usize);
        let pts: Vec<Point3> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let qs: Vec<Point3> = (0..q).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let spec = if i % 2 == 0 {
            NeighborSpec::sphere(rng.random_range(0.02..0.2))?
        } else {
            NeighborSpec::axis_aligned([
                rng.random_range(0.02..0.2),
                rng.random_range(0.02..0.2),
                rng.random_range(0.02..0.2),
            ])?
        };
        if neighbors(&pts, &qs, &spec)?.sorted() != brute_force_radius(&pts, &qs, &spec).sorted() {
            failures += 1;
        }
    }
    Ok((failures == 0, format!("{} of {} instances differ", failures, opts.instances)))
}

/// Finite-difference step for the five-point stencil.
const FD_STEP: f64 = 3e-4;

fn gradient_checks(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6c);
    let mut worst: f64 = 0.0;
    let mut rt = |shape: &[usize]| rand_tensor::<f64>(&mut rng, shape);
    let conv2d = gradient_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], [1, 1], [1, 1])?;
            let y = g.square(y);
            Ok(g.sum_all(y))
        },
        &[rt(&[1, 2, 4, 5]), rt(&[2, 2, 3, 3])],
        FD_STEP,
    )?;
    let conv3d = gradient_check(
        |g, v| {
            let y = g.conv3d(v[0], v[1], [1, 1, 1], [1, 1, 1])?;
            let y = g.square(y);
            Ok(g.sum_all(y))
        },
        &[rt(&[1, 2, 3, 4, 3]), rt(&[2, 2, 3, 3, 3])],
        FD_STEP,
    )?;
    let fig = gradient_check(
        |g, v| {
            let y = fig_conv_graph(g, v[0], v[1], 0, 1)?;
            let y = g.square(y);
            Ok(g.sum_all(y))
        },
        &[rt(&[1, 2, 2, 4, 3]), rt(&[2, 2, 3, 3, 3])],
        FD_STEP,
    )?;
    let geom = GridGeometry::new([3, 4, 2], Aabb::new([0.0; 3], [1.0; 3])?)?;
    let pts: Vec<Point3> = (0..7).map(|i| [0.13 * i as f64, 0.9 - 0.11 * i as f64, 0.07 * i as f64]).collect();
    let map = Arc::new(geom.sampling_map::<f64>(&pts));
    let trilinear = gradient_check(
        |g, v| {
            let y = g.sparse(v[0], map.clone())?;
            let y = g.square(y);
            Ok(g.sum_all(y))
        },
        &[rt(&[2, 24])],
        FD_STEP,
    )?;
    let norm = gradient_check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y = g.gelu(y);
            let y = g.square(y);
            Ok(g.sum_all(y))
        },
        &[rt(&[4, 6]), rt(&[4]), rt(&[4])],
        FD_STEP,
    )?;
    let parts = [
        ("conv2d", conv2d),
        ("conv3d", conv3d),
        ("fig_conv", fig),
        ("trilinear", trilinear),
        ("layer_norm", norm),
    ];
    let detail = parts
        .iter()
        .map(|(n, e)| {
            worst = worst.max(*e);
            format!("{} {:.1e}", n, e)
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok((worst < 1e-5, detail))
}

/// FIG and explicit 3D MAC ratios when the high-resolution axes (FIG) or
/// all axes (explicit) double.
pub fn flop_ratios() -> Result<(f64, f64)> {
    let k = [8, 8, 3, 3, 3];
    let fig_small = fig_conv_macs(&[1, 8, 4, 32, 32], &k, 0, 1)?;
    let fig_big = fig_conv_macs(&[1, 8, 4, 64, 64], &k, 0, 1)?;
    let d_small = conv3d_direct_macs(&[1, 8, 16, 16, 16], &k, [1, 1, 1])?;
    let d_big = conv3d_direct_macs(&[1, 8, 32, 32, 32], &k, [1, 1, 1])?;
    Ok((fig_big as f64 / fig_small as f64, d_big as f64 / d_small as f64))
}

pub fn run_verify(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let d64 = reparam_deviation::<f64>(opts, 0x1, false)?;
    out.push(check("reparam_equivalence_f64", d64 < 1e-10, format!("max deviation {:.2e}", d64)));
    let d32 = reparam_deviation::<f32>(opts, 0x2, true)?;
    out.push(check("reparam_equivalence_f32", d32 < 1e-5, format!("max deviation {:.2e}", d32)));
    let (ok, detail) = hankel_checks(opts)?;
    out.push(check("hankel_identity", ok, detail));
    let (ok, detail) = radius_check(opts)?;
    out.push(check("radius_search_oracle", ok, detail));
    let (ok, detail) = gradient_checks(opts)?;
    out.push(check("gradient_checks", ok, detail));
    let (fig, direct) = flop_ratios()?;
    out.push(check(
        "flop_scaling",
        fig == 4.0 && direct == 8.0,
        format!("FIG ratio {:.1}, explicit ratio {:.1}", fig, direct),
    ));
    Ok(out)
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    checks
        .iter()
        .map(|c| format!("{:<w$}  {}  {}\n", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail, w = width))
        .collect()
}
