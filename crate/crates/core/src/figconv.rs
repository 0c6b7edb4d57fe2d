//! Factorized implicit global convolution.
//!
//! Each grid is convolved with its own 3D kernel. Instead of a 3D
//! convolution, the low-resolution rank axis is folded into channels and the
//! work is done by a 2D convolution over the two high-resolution axes.
//!
//! Volumes are `[B, C, X, Y, Z]` and kernels `[Co, Ci, K, K, K]` with odd `K`.
//! Every axis is zero-padded by `p = (K − 1) / 2`, so the rank axis keeps its
//! extent `r`; strides apply only to the high-resolution axes.
//!
//! Folding puts the rank index outside the channel index: 2D channel
//! `k·C + c` holds rank slice `k` of channel `c`. The 2D kernel is
//!
//! ```text
//! W2[i·Co + o, k·Ci + c, u, v] = w[o, c, t = k − i + p, u, v]   if 0 ≤ t < K, else 0
//! ```
//!
//! with `t` on the rank axis and `(u, v)` on the high-resolution axes. When
//! `K ≥ 2r − 1` every pair `(i, k)` has a tap, so every output slice sees every
//! input slice. The `r × r` block for fixed `(o, c, u, v)` is then a Hankel
//! matrix of the central `2r − 1` taps with its rows reversed.

use std::sync::Arc;

use crate::autodiff::{conv3d_direct_strided, Conv2dGeom, GatherMap, Graph, Scalar, Tensor, Var, GATHER_ZERO};
use crate::error::{Error, Result};

/// `H[i][k] = w[i + k]` for `i, k < r`. Requires `w.len() ≥ 2r − 1`.
///
/// Generic over the element so that it can build index maps as well as
/// numeric matrices.
pub fn hankel_reparam_1d<T: Copy>(w: &[T], r: usize) -> Result<Vec<Vec<T>>> {
    if r == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    if w.len() < 2 * r - 1 {
        return Err(Error::invalid(format!(
            "kernel size {} is below 2r - 1 = {}; use the zero-padded rank-axis path",
            w.len(),
            2 * r - 1
        )));
    }
    Ok((0..r).map(|i| (0..r).map(|k| w[i + k]).collect()).collect())
}

/// The two high-resolution axes of a grid whose rank axis is `rank_axis`.
pub fn high_res_axes(rank_axis: usize) -> [usize; 2] {
    match rank_axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

/// Per-grid convolution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FigKernel<T: Scalar> {
    /// `[Co, Ci, K, K, K]`.
    pub weight: Tensor<T>,
    reparam: Option<(usize, usize, Tensor<T>)>,
}

impl<T: Scalar> FigKernel<T> {
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        check_kernel(weight.shape())?;
        Ok(Self { weight, reparam: None })
    }

    pub fn size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// The folded 2D kernel for rank `r` along `rank_axis`, computed once.
    pub fn reparameterized(&mut self, r: usize, rank_axis: usize) -> &Tensor<T> {
        let stale = !matches!(&self.reparam, Some((rr, a, _)) if *rr == r && *a == rank_axis);
        if stale {
            let k2 = band_kernel_2d(&self.weight, r, rank_axis).expect("kernel validated at construction");
            self.reparam = Some((r, rank_axis, k2));
        }
        &self.reparam.as_ref().unwrap().2
    }
}

fn check_kernel(shape: &[usize]) -> Result<()> {
    if shape.len() != 5 || shape[2] != shape[3] || shape[3] != shape[4] {
        return Err(Error::shape(format!("FIG kernel must be [Co,Ci,K,K,K], got {:?}", shape)));
    }
    if shape[2] % 2 == 0 {
        return Err(Error::invalid(format!(
            "FIG kernel size must be odd for same padding, got {}",
            shape[2]
        )));
    }
    Ok(())
}

fn check_pair(x: &[usize], kernel: &[usize], rank_axis: usize) -> Result<()> {
    check_kernel(kernel)?;
    if x.len() != 5 {
        return Err(Error::shape(format!("FIG input must be [B,C,X,Y,Z], got {:?}", x)));
    }
    if x[1] != kernel[1] {
        return Err(Error::shape(format!(
            "channel axis: grid has {} channels but kernel expects {}",
            x[1], kernel[1]
        )));
    }
    if rank_axis > 2 {
        return Err(Error::invalid(format!("rank axis {} out of range", rank_axis)));
    }
    Ok(())
}

/// Number of `(i, k)` rank-axis pairs joined by a kernel tap.
pub fn rank_tap_count(r: usize, k: usize) -> usize {
    let p = (k - 1) / 2;
    (0..r)
        .map(|i| (0..r).filter(|&kk| kk + p >= i && kk + p - i < k).count())
        .sum()
}

/// Multiply-accumulates of a FIG convolution, counting only taps that land
/// on existing rank-axis slices (the high-resolution axes are counted
/// densely, padding included). The naive and folded paths perform exactly
/// this work.
pub fn fig_conv_macs(x: &[usize], kernel: &[usize], rank_axis: usize, stride: usize) -> Result<u64> {
    check_pair(x, kernel, rank_axis)?;
    let k = kernel[2];
    let p = (k - 1) / 2;
    let [a, b] = high_res_axes(rank_axis);
    let out = |n: usize| (n + 2 * p - k) / stride + 1;
    let r = x[2 + rank_axis];
    Ok((x[0] * kernel[0] * kernel[1] * out(x[2 + a]) * out(x[2 + b]) * k * k * rank_tap_count(r, k)) as u64)
}

fn strides3(rank_axis: usize, stride: usize) -> [usize; 3] {
    let mut s = [stride; 3];
    s[rank_axis] = 1;
    s
}

/// Reference path: direct 3D convolution with same padding on every axis.
pub fn fig_conv_naive<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, rank_axis: usize, stride: usize) -> Result<Tensor<T>> {
    check_pair(x.shape(), kernel.shape(), rank_axis)?;
    let p = (kernel.shape()[2] - 1) / 2;
    conv3d_direct_strided(x, kernel, [p; 3], strides3(rank_axis, stride))
}

/// Axis order taking `[B, C, X, Y, Z]` to `[B, r, C, H, W]`.
fn fold_axes(rank_axis: usize) -> [usize; 5] {
    let [a, b] = high_res_axes(rank_axis);
    [0, 2 + rank_axis, 1, 2 + a, 2 + b]
}

fn inverse(perm: &[usize; 5]) -> [usize; 5] {
    let mut inv = [0; 5];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Fold the rank axis of `[B, C, X, Y, Z]` into channels: `[B, r·C, H, W]`.
pub fn flatten_input<T: Scalar>(x: &Tensor<T>, rank_axis: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let [a, b] = high_res_axes(rank_axis);
    x.permute(&fold_axes(rank_axis))?
        .reshape(&[s[0], s[2 + rank_axis] * s[1], s[2 + a], s[2 + b]])
}

/// Undo [`flatten_input`] on a `[B, r·C, H, W]` result.
pub fn unflatten_output<T: Scalar>(y: &Tensor<T>, r: usize, rank_axis: usize) -> Result<Tensor<T>> {
    let s = y.shape();
    if s.len() != 4 || s[1] % r != 0 {
        return Err(Error::shape(format!("cannot unfold {:?} with rank {}", s, r)));
    }
    let folded = y.clone().reshape(&[s[0], r, s[1] / r, s[2], s[3]])?;
    folded.permute(&inverse(&fold_axes(rank_axis)))
}

/// Shape of the folded 2D kernel.
pub fn kernel_2d_shape(kernel: &[usize], r: usize) -> [usize; 4] {
    [r * kernel[0], r * kernel[1], kernel[2], kernel[2]]
}

fn weight_index(kernel: &[usize], o: usize, c: usize, taps: [usize; 3]) -> u32 {
    let k = kernel[2];
    ((((o * kernel[1] + c) * k + taps[0]) * k + taps[1]) * k + taps[2]) as u32
}

fn taps(rank_axis: usize, t: usize, u: usize, v: usize) -> [usize; 3] {
    let [a, b] = high_res_axes(rank_axis);
    let mut out = [0; 3];
    out[rank_axis] = t;
    out[a] = u;
    out[b] = v;
    out
}

/// Source index into the flat 3D kernel for every folded 2D kernel entry,
/// from the banded construction (any `K`, zeros off the band).
pub fn band_index(kernel: &[usize], r: usize, rank_axis: usize) -> Vec<u32> {
    let (co, ci, k) = (kernel[0], kernel[1], kernel[2]);
    let p = (k - 1) / 2;
    let mut index = Vec::with_capacity(r * co * r * ci * k * k);
    for i in 0..r {
        for o in 0..co {
            for kk in 0..r {
                for c in 0..ci {
                    for u in 0..k {
                        for v in 0..k {
                            let t = (kk + p).checked_sub(i).filter(|&t| t < k);
                            index.push(match t {
                                Some(t) => weight_index(kernel, o, c, taps(rank_axis, t, u, v)),
                                None => GATHER_ZERO,
                            });
                        }
                    }
                }
            }
        }
    }
    index
}

/// Same index map as [`band_index`], built from [`hankel_reparam_1d`] over
/// the central `2r − 1` rank taps. Fails when `K < 2r − 1`.
pub fn hankel_index(kernel: &[usize], r: usize, rank_axis: usize) -> Result<Vec<u32>> {
    let (co, ci, k) = (kernel[0], kernel[1], kernel[2]);
    if k < 2 * r - 1 {
        return Err(Error::invalid(format!(
            "global rank-axis kernel needs K >= 2r - 1, got K = {} and r = {}",
            k, r
        )));
    }
    let off = (k - (2 * r - 1)) / 2;
    let mut blocks = vec![Vec::new(); co * ci * k * k];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..k {
                for v in 0..k {
                    let line: Vec<u32> = (off..off + 2 * r - 1)
                        .map(|t| weight_index(kernel, o, c, taps(rank_axis, t, u, v)))
                        .collect();
                    blocks[((o * ci + c) * k + u) * k + v] = hankel_reparam_1d(&line, r)?;
                }
            }
        }
    }
    let mut index = Vec::with_capacity(r * co * r * ci * k * k);
    for i in 0..r {
        for o in 0..co {
            for kk in 0..r {
                for c in 0..ci {
                    for u in 0..k {
                        for v in 0..k {
                            index.push(blocks[((o * ci + c) * k + u) * k + v][r - 1 - i][kk]);
                        }
                    }
                }
            }
        }
    }
    Ok(index)
}

fn gather_kernel<T: Scalar>(kernel: &Tensor<T>, r: usize, index: Vec<u32>) -> Tensor<T> {
    let map = GatherMap::new(kernel.len(), kernel_2d_shape(kernel.shape(), r).to_vec(), index).expect("index in range");
    Tensor::new(map.shape.clone(), map.apply(kernel.data())).expect("kernel size")
}

pub fn band_kernel_2d<T: Scalar>(kernel: &Tensor<T>, r: usize, rank_axis: usize) -> Result<Tensor<T>> {
    check_kernel(kernel.shape())?;
    Ok(gather_kernel(kernel, r, band_index(kernel.shape(), r, rank_axis)))
}

pub fn hankel_kernel_2d<T: Scalar>(kernel: &Tensor<T>, r: usize, rank_axis: usize) -> Result<Tensor<T>> {
    check_kernel(kernel.shape())?;
    Ok(gather_kernel(kernel, r, hankel_index(kernel.shape(), r, rank_axis)?))
}

/// Recover the 3D kernel from a folded one. Taps that never join two rank
/// slices (only possible when `K > 2r − 1`) come back as zero.
pub fn kernel_from_2d<T: Scalar>(k2: &Tensor<T>, co: usize, ci: usize, r: usize, rank_axis: usize) -> Result<Tensor<T>> {
    let k = k2.shape()[2];
    let shape = [co, ci, k, k, k];
    if k2.shape() != kernel_2d_shape(&shape, r) {
        return Err(Error::shape(format!("folded kernel {:?} does not match rank {}", k2.shape(), r)));
    }
    let mut w = Tensor::zeros(&shape);
    for (dst, &src) in band_index(&shape, r, rank_axis).iter().enumerate() {
        if src != GATHER_ZERO {
            w.data_mut()[src as usize] = k2.data()[dst];
        }
    }
    Ok(w)
}

/// Fold an input and kernel so that a 2D convolution reproduces the 3D one.
pub fn reparam_flatten<T: Scalar>(x: &Tensor<T>, kernel: &FigKernel<T>, rank_axis: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(x.shape(), kernel.weight.shape(), rank_axis)?;
    let r = x.shape()[2 + rank_axis];
    Ok((flatten_input(x, rank_axis)?, band_kernel_2d(&kernel.weight, r, rank_axis)?))
}

/// 2D convolution of a folded input with a folded kernel, unfolded again.
pub fn fig_conv_folded<T: Scalar>(
    x: &Tensor<T>,
    kernel_2d: &Tensor<T>,
    rank_axis: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let r = x.shape()[2 + rank_axis];
    let k = kernel_2d.shape()[2];
    let p = (k - 1) / 2;
    let flat = flatten_input(x, rank_axis)?;
    let geom = Conv2dGeom::new(flat.shape(), kernel_2d.shape(), [p, p], [stride, stride])?;
    let y = crate::autodiff::kernels::conv2d_forward(&flat, kernel_2d, &geom);
    unflatten_output(&y, r, rank_axis)
}

/// Folded path with the Hankel rank-axis kernel; requires `K ≥ 2r − 1`.
pub fn fig_conv_global<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, rank_axis: usize, stride: usize) -> Result<Tensor<T>> {
    check_pair(x.shape(), kernel.shape(), rank_axis)?;
    let r = x.shape()[2 + rank_axis];
    let k2 = hankel_kernel_2d(kernel, r, rank_axis)?;
    fig_conv_folded(x, &k2, rank_axis, stride)
}

/// Folded path for any `K`: Hankel kernel in the global regime, banded
/// kernel otherwise.
pub fn fig_conv<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, rank_axis: usize, stride: usize) -> Result<Tensor<T>> {
    check_pair(x.shape(), kernel.shape(), rank_axis)?;
    let r = x.shape()[2 + rank_axis];
    let k2 = if kernel.shape()[2] + 1 >= 2 * r {
        hankel_kernel_2d(kernel, r, rank_axis)?
    } else {
        band_kernel_2d(kernel, r, rank_axis)?
    };
    fig_conv_folded(x, &k2, rank_axis, stride)
}

/// Differentiable FIG convolution: `x` is `[B, C, X, Y, Z]`, `w` is
/// `[Co, Ci, K, K, K]`. The folded kernel is a gather of `w`, so gradients
/// flow back to the 3D weights.
pub fn fig_conv_graph<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, rank_axis: usize, stride: usize) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    check_pair(&xs, &ws, rank_axis)?;
    let r = xs[2 + rank_axis];
    let k = ws[2];
    let p = (k - 1) / 2;
    let index = if k + 1 >= 2 * r {
        hankel_index(&ws, r, rank_axis)?
    } else {
        band_index(&ws, r, rank_axis)
    };
    let map = GatherMap::new(ws.iter().product(), kernel_2d_shape(&ws, r).to_vec(), index)?;
    let k2 = g.gather(w, Arc::new(map))?;

    let [a, b] = high_res_axes(rank_axis);
    let folded = g.permute(x, &fold_axes(rank_axis))?;
    let flat = g.reshape(folded, &[xs[0], r * xs[1], xs[2 + a], xs[2 + b]])?;
    let geom = Conv2dGeom::new(g.shape(flat), g.shape(k2), [p, p], [stride, stride])?;
    let macs = fig_conv_macs(&xs, &ws, rank_axis, stride)?;
    let y = g.conv2d_counted(flat, k2, geom, macs)?;
    let ys = g.shape(y).to_vec();
    let unfolded = g.reshape(y, &[ys[0], r, ys[1] / r, ys[2], ys[3]])?;
    g.permute(unfolded, &inverse(&fold_axes(rank_axis)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{conv3d_direct, conv3d_direct_macs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn volume(rank_axis: usize, r: usize, h: usize, w: usize) -> [usize; 3] {
        let mut s = [h, h, h];
        let [a, b] = high_res_axes(rank_axis);
        s[rank_axis] = r;
        s[a] = h;
        s[b] = w;
        s
    }

    #[test]
    fn hankel_small_example() {
        let h = hankel_reparam_1d(&["w0", "w1", "w2"], 2).unwrap();
        assert_eq!(h, vec![vec!["w0", "w1"], vec!["w1", "w2"]]);
        let h = hankel_reparam_1d(&[1.0, 0.0, -1.0], 2).unwrap();
        let x = [1.0, 2.0];
        let y: Vec<f64> = h.iter().map(|row| row[0] * x[0] + row[1] * x[1]).collect();
        assert_eq!(y, vec![1.0, -2.0]);
        assert_eq!(hankel_reparam_1d(&[3.5], 1).unwrap(), vec![vec![3.5]]);
        assert!(hankel_reparam_1d(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn delta_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[1, 2, 2, 6, 5]);
        let mut delta = Tensor::<f64>::zeros(&[2, 2, 3, 3, 3]);
        for c in 0..2 {
            delta.data_mut()[weight_index(&[2, 2, 3, 3, 3], c, c, [1, 1, 1]) as usize] = 1.0;
        }
        assert!(fig_conv_naive(&x, &delta, 0, 1).unwrap().max_abs_diff(&x) < 1e-15);
        assert!(fig_conv_global(&x, &delta, 0, 1).unwrap().max_abs_diff(&x) < 1e-15);
        let z = fig_conv(&x, &Tensor::zeros(&[3, 2, 3, 3, 3]), 0, 1).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_matches_conv3d_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[1, 1, 3, 8, 8]);
        let w = rand_t(&mut rng, &[1, 1, 3, 3, 3]);
        let a = fig_conv_naive(&x, &w, 0, 1).unwrap();
        let b = conv3d_direct(&x, &w, [1, 1, 1]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn rank_one_flatten_is_a_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[2, 3, 4, 1, 5]);
        let f = flatten_input(&x, 1).unwrap();
        assert_eq!(f.shape(), &[2, 3, 4, 5]);
        assert_eq!(f.data(), x.data());
    }

    #[test]
    fn folded_round_trip_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for axis in 0..3 {
            let x = rand_t(&mut rng, &[2, 2].iter().copied().chain(volume(axis, 3, 4, 4)).collect::<Vec<_>>());
            let w = FigKernel::new(rand_t(&mut rng, &[3, 2, 3, 3, 3])).unwrap();
            let (flat, k2) = reparam_flatten(&x, &w, axis).unwrap();
            let y = crate::autodiff::conv2d(&flat, &k2, [1, 1]).unwrap();
            let y = unflatten_output(&y, 3, axis).unwrap();
            let naive = fig_conv_naive(&x, &w.weight, axis, 1).unwrap();
            assert!(y.max_abs_diff(&naive) < 1e-12, "axis {}", axis);
        }
    }

    #[test]
    fn hankel_index_equals_band_index_in_global_regime() {
        for r in 1..=4 {
            for k in [2 * r - 1, 2 * r + 1, 2 * r + 3] {
                for axis in 0..3 {
                    let shape = [2, 3, k, k, k];
                    assert_eq!(hankel_index(&shape, r, axis).unwrap(), band_index(&shape, r, axis));
                }
            }
        }
        assert!(hankel_index(&[1, 1, 3, 3, 3], 3, 0).is_err());
    }

    #[test]
    fn global_path_rejects_small_kernels() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 5, 5]);
        assert!(fig_conv_global(&x, &Tensor::zeros(&[1, 1, 3, 3, 3]), 0, 1).is_err());
        assert!(fig_conv(&x, &Tensor::zeros(&[1, 1, 3, 3, 3]), 0, 1).is_ok());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 5, 5]);
        let err = fig_conv_naive(&x, &Tensor::zeros(&[1, 3, 3, 3, 3]), 0, 1).unwrap_err();
        assert!(err.to_string().contains("channel"));
    }

    #[test]
    fn kernel_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_t(&mut rng, &[2, 3, 5, 5, 5]);
        for axis in 0..3 {
            let mut fk = FigKernel::new(w.clone()).unwrap();
            let k2 = fk.reparameterized(3, axis).clone();
            assert_eq!(kernel_from_2d(&k2, 2, 3, 3, axis).unwrap(), w);
        }
    }

    #[test]
    fn mac_counts() {
        let x = [1, 4, 3, 8, 8];
        let w = [4, 4, 5, 5, 5];
        let m1 = fig_conv_macs(&x, &w, 0, 1).unwrap();
        assert_eq!(m1, (4 * 4 * 64 * 25 * 9) as u64);
        let m2 = fig_conv_macs(&[1, 4, 3, 16, 16], &w, 0, 1).unwrap();
        assert_eq!(m2 as f64 / m1 as f64, 4.0);
        let d1 = conv3d_direct_macs(&[1, 4, 8, 8, 8], &w, [2; 3]).unwrap();
        let d2 = conv3d_direct_macs(&[1, 4, 16, 16, 16], &w, [2; 3]).unwrap();
        assert_eq!(d2 as f64 / d1 as f64, 8.0);
        assert_eq!(rank_tap_count(4, 3), 10);
        assert_eq!(rank_tap_count(3, 5), 9);
    }

    #[test]
    fn graph_path_counts_and_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_t(&mut rng, &[1, 2, 6, 2, 5]);
        let w = rand_t(&mut rng, &[3, 2, 3, 3, 3]);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let y = fig_conv_graph(&mut g, xv, wv, 1, 2).unwrap();
        let naive = fig_conv_naive(&x, &w, 1, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3, 2, 3]);
        assert!(g.value(y).max_abs_diff(&naive) < 1e-12);
        assert_eq!(g.macs(), fig_conv_macs(x.shape(), w.shape(), 1, 2).unwrap());
    }
}
