//! Forward and backward compute kernels shared by the pure-tensor API and the
//! differentiation graph.
//!
//! Every parallel kernel partitions its *outputs* across workers and reduces
//! each output element in a fixed sequential order, so results are bitwise
//! independent of the thread count.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Resolved geometry of a 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: [usize; 2],
    pub stride: [usize; 2],
    pub hp: usize,
    pub wp: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new(input: &[usize], kernel: &[usize], pad: [usize; 2], stride: [usize; 2]) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape(format!("conv2d input must be [B,C,H,W], got {:?}", input)));
        }
        if kernel.len() != 4 {
            return Err(Error::shape(format!("conv2d kernel must be [Co,Ci,Kh,Kw], got {:?}", kernel)));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(format!(
                "channel axis: input has {} channels but kernel expects {}",
                input[1], kernel[1]
            )));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let names = ["H", "W"];
        let mut out = [0usize; 2];
        let mut padded = [0usize; 2];
        for a in 0..2 {
            padded[a] = input[2 + a] + 2 * pad[a];
            if padded[a] < kernel[2 + a] {
                return Err(Error::shape(format!(
                    "axis {}: padded extent {} is smaller than kernel extent {}",
                    names[a],
                    padded[a],
                    kernel[2 + a]
                )));
            }
            out[a] = (padded[a] - kernel[2 + a]) / stride[a] + 1;
        }
        Ok(Self {
            batch: input[0],
            cin: input[1],
            cout: kernel[0],
            h: input[2],
            w: input[3],
            kh: kernel[2],
            kw: kernel[3],
            pad,
            stride,
            hp: padded[0],
            wp: padded[1],
            ho: out[0],
            wo: out[1],
        })
    }

    /// Dense multiply-accumulate count `B·Co·Ci·H'·W'·Kh·Kw`.
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.cin * self.ho * self.wo * self.kh * self.kw) as u64
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    fn pad_input<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (hp, wp) = (self.hp, self.wp);
        let mut out = vec![T::zero(); self.batch * self.cin * hp * wp];
        for plane in 0..self.batch * self.cin {
            for i in 0..self.h {
                let src = &x[(plane * self.h + i) * self.w..][..self.w];
                let dst = &mut out[plane * hp * wp + (i + self.pad[0]) * wp + self.pad[1]..][..self.w];
                dst.copy_from_slice(src);
            }
        }
        out
    }
}

/// Output rows per tile. The input rows a tile reads, across all input
/// channels, then stay cache-resident while every output channel uses them.
const ROW_TILE: usize = 16;

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, g: &Conv2dGeom) -> Tensor<T> {
    let xp = g.pad_input(x.data());
    let kd = k.data();
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    for r0 in (0..g.ho).step_by(ROW_TILE) {
        let rows = r0..(r0 + ROW_TILE).min(g.ho);
        out.par_chunks_mut(plane).enumerate().for_each(|(bo, out_plane)| {
            let (bi, o) = (bo / g.cout, bo % g.cout);
            for c in 0..g.cin {
                let in_plane = &xp[(bi * g.cin + c) * g.hp * g.wp..][..g.hp * g.wp];
                for u in 0..g.kh {
                    for v in 0..g.kw {
                        let wgt = kd[((o * g.cin + c) * g.kh + u) * g.kw + v];
                        if wgt == T::zero() {
                            continue;
                        }
                        for i in rows.clone() {
                            let row = &in_plane[(i * g.stride[0] + u) * g.wp + v..];
                            let orow = &mut out_plane[i * g.wo..(i + 1) * g.wo];
                            if g.stride[1] == 1 {
                                for (o_, &x_) in orow.iter_mut().zip(&row[..g.wo]) {
                                    *o_ += wgt * x_;
                                }
                            } else {
                                for (j, o_) in orow.iter_mut().enumerate() {
                                    *o_ += wgt * row[j * g.stride[1]];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    Tensor::from_parts(g.out_shape(), out)
}

/// Gradients of a 2D cross-correlation with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
    g: &Conv2dGeom,
) -> (Tensor<T>, Tensor<T>) {
    let xp = g.pad_input(x.data());
    let kd = k.data();
    let gyd = gy.data();
    let plane = g.ho * g.wo;
    let pplane = g.hp * g.wp;

    let mut gxp = vec![T::zero(); g.batch * g.cin * pplane];
    gxp.par_chunks_mut(pplane).enumerate().for_each(|(bc, gplane)| {
        let (bi, c) = (bc / g.cin, bc % g.cin);
        for o in 0..g.cout {
            let gout = &gyd[(bi * g.cout + o) * plane..][..plane];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let wgt = kd[((o * g.cin + c) * g.kh + u) * g.kw + v];
                    if wgt == T::zero() {
                        continue;
                    }
                    for i in 0..g.ho {
                        let base = (i * g.stride[0] + u) * g.wp + v;
                        let grow = &gout[i * g.wo..(i + 1) * g.wo];
                        if g.stride[1] == 1 {
                            for (d, &s) in gplane[base..base + g.wo].iter_mut().zip(grow) {
                                *d += wgt * s;
                            }
                        } else {
                            for (j, &s) in grow.iter().enumerate() {
                                gplane[base + j * g.stride[1]] += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    });
    let mut gx = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    for p in 0..g.batch * g.cin {
        for i in 0..g.h {
            let src = &gxp[p * pplane + (i + g.pad[0]) * g.wp + g.pad[1]..][..g.w];
            gx[(p * g.h + i) * g.w..][..g.w].copy_from_slice(src);
        }
    }

    let ksz = g.kh * g.kw;
    let mut gk = vec![T::zero(); g.cout * g.cin * ksz];
    gk.par_chunks_mut(ksz).enumerate().for_each(|(oc, gk_)| {
        let (o, c) = (oc / g.cin, oc % g.cin);
        for bi in 0..g.batch {
            let gout = &gyd[(bi * g.cout + o) * plane..][..plane];
            let in_plane = &xp[(bi * g.cin + c) * pplane..][..pplane];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let mut acc = T::zero();
                    for i in 0..g.ho {
                        let row = &in_plane[(i * g.stride[0] + u) * g.wp + v..];
                        let grow = &gout[i * g.wo..(i + 1) * g.wo];
                        if g.stride[1] == 1 {
                            for (&a, &b) in grow.iter().zip(&row[..g.wo]) {
                                acc += a * b;
                            }
                        } else {
                            for (j, &a) in grow.iter().enumerate() {
                                acc += a * row[j * g.stride[1]];
                            }
                        }
                    }
                    gk_[u * g.kw + v] += acc;
                }
            }
        }
    });
    (
        Tensor::from_parts(vec![g.batch, g.cin, g.h, g.w], gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
    )
}

/// Resolved geometry of a direct 3D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    pub fn new(input: &[usize], kernel: &[usize], pad: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        if input.len() != 5 {
            return Err(Error::shape(format!("conv3d input must be [B,C,D,H,W], got {:?}", input)));
        }
        if kernel.len() != 5 {
            return Err(Error::shape(format!(
                "conv3d kernel must be [Co,Ci,Kd,Kh,Kw], got {:?}",
                kernel
            )));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(format!(
                "channel axis: input has {} channels but kernel expects {}",
                input[1], kernel[1]
            )));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d stride must be positive"));
        }
        let names = ["D", "H", "W"];
        let mut output = [0usize; 3];
        for a in 0..3 {
            let padded = input[2 + a] + 2 * pad[a];
            if padded < kernel[2 + a] {
                return Err(Error::shape(format!(
                    "axis {}: padded extent {} is smaller than kernel extent {}",
                    names[a],
                    padded,
                    kernel[2 + a]
                )));
            }
            output[a] = (padded - kernel[2 + a]) / stride[a] + 1;
        }
        Ok(Self {
            batch: input[0],
            cin: input[1],
            cout: kernel[0],
            input: [input[2], input[3], input[4]],
            kernel: [kernel[2], kernel[3], kernel[4]],
            pad,
            stride,
            output,
        })
    }

    /// Dense multiply-accumulate count `B·Co·Ci·D'·H'·W'·Kd·Kh·Kw`.
    pub fn macs(&self) -> u64 {
        (self.batch
            * self.cout
            * self.cin
            * self.output.iter().product::<usize>()
            * self.kernel.iter().product::<usize>()) as u64
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.output[0], self.output[1], self.output[2]]
    }

    /// Source voxel for output `o` and tap `t` along axis `a`, if not padding.
    #[inline]
    fn src(&self, a: usize, o: usize, t: usize) -> Option<usize> {
        let pos = o * self.stride[a] + t;
        if pos < self.pad[a] || pos - self.pad[a] >= self.input[a] {
            None
        } else {
            Some(pos - self.pad[a])
        }
    }
}

/// Naive nested-loop 3D cross-correlation.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, g: &Conv3dGeom) -> Tensor<T> {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let xd = x.data();
    let kdat = k.data();
    let vol = od * oh * ow;
    let mut out = vec![T::zero(); g.batch * g.cout * vol];
    out.par_chunks_mut(vol).enumerate().for_each(|(bo, ovol)| {
        let (bi, o) = (bo / g.cout, bo % g.cout);
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = T::zero();
                    for c in 0..g.cin {
                        let base = (bi * g.cin + c) * d * h * w;
                        for a in 0..kd {
                            let Some(sz) = g.src(0, z, a) else { continue };
                            for b in 0..kh {
                                let Some(sy) = g.src(1, y, b) else { continue };
                                for e in 0..kw {
                                    let Some(sx) = g.src(2, xx, e) else { continue };
                                    acc += xd[base + (sz * h + sy) * w + sx]
                                        * kdat[(((o * g.cin + c) * kd + a) * kh + b) * kw + e];
                                }
                            }
                        }
                    }
                    ovol[(z * oh + y) * ow + xx] = acc;
                }
            }
        }
    });
    Tensor::from_parts(g.out_shape(), out)
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
    g: &Conv3dGeom,
) -> (Tensor<T>, Tensor<T>) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let xd = x.data();
    let kdat = k.data();
    let gyd = gy.data();
    let ivol = d * h * w;
    let ovol = od * oh * ow;

    let mut gx = vec![T::zero(); g.batch * g.cin * ivol];
    gx.par_chunks_mut(ivol).enumerate().for_each(|(bc, gvol)| {
        let (bi, c) = (bc / g.cin, bc % g.cin);
        for o in 0..g.cout {
            let gout = &gyd[(bi * g.cout + o) * ovol..][..ovol];
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let gv = gout[(z * oh + y) * ow + xx];
                        for a in 0..kd {
                            let Some(sz) = g.src(0, z, a) else { continue };
                            for b in 0..kh {
                                let Some(sy) = g.src(1, y, b) else { continue };
                                for e in 0..kw {
                                    let Some(sx) = g.src(2, xx, e) else { continue };
                                    gvol[(sz * h + sy) * w + sx] +=
                                        gv * kdat[(((o * g.cin + c) * kd + a) * kh + b) * kw + e];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let ksz = kd * kh * kw;
    let mut gk = vec![T::zero(); g.cout * g.cin * ksz];
    gk.par_chunks_mut(ksz).enumerate().for_each(|(oc, gk_)| {
        let (o, c) = (oc / g.cin, oc % g.cin);
        for bi in 0..g.batch {
            let gout = &gyd[(bi * g.cout + o) * ovol..][..ovol];
            let base = (bi * g.cin + c) * ivol;
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let mut acc = T::zero();
                        for z in 0..od {
                            let Some(sz) = g.src(0, z, a) else { continue };
                            for y in 0..oh {
                                let Some(sy) = g.src(1, y, b) else { continue };
                                for xx in 0..ow {
                                    let Some(sx) = g.src(2, xx, e) else { continue };
                                    acc += gout[(z * oh + y) * ow + xx] * xd[base + (sz * h + sy) * w + sx];
                                }
                            }
                        }
                        gk_[(a * kh + b) * kw + e] += acc;
                    }
                }
            }
        }
    });
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
    )
}

/// `[M,K] x [K,N] -> [M,N]`.
pub fn matmul_forward<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let av = a[i * k + kk];
            for (o, &bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    });
    out
}

pub fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    gy: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); m * k];
    if k > 0 {
        ga.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
            let grow = &gy[i * n..(i + 1) * n];
            for (kk, o) in row.iter_mut().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                *o = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            }
        });
    }
    let mut gb = vec![T::zero(); k * n];
    if n > 0 {
        gb.par_chunks_mut(n).enumerate().for_each(|(kk, row)| {
            for i in 0..m {
                let av = a[i * k + kk];
                for (o, &g) in row.iter_mut().zip(&gy[i * n..(i + 1) * n]) {
                    *o += av * g;
                }
            }
        });
    }
    (ga, gb)
}

/// Weighted compressed-sparse-row linear map acting on the last axis of a
/// `[C, N_in]` tensor: `out[c, r] = Σ_e w_e · in[c, col_e]` over row `r`'s
/// entries, summed in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap<T> {
    pub n_out: usize,
    pub n_in: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<u32>,
    pub weights: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn new(n_in: usize, offsets: Vec<usize>, cols: Vec<u32>, weights: Vec<T>) -> Result<Self> {
        if offsets.is_empty() || offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("sparse map offsets must start at 0 and be non-decreasing"));
        }
        if *offsets.last().unwrap() != cols.len() || cols.len() != weights.len() {
            return Err(Error::shape(format!(
                "sparse map has {} entries, {} columns and {} weights",
                offsets.last().unwrap(),
                cols.len(),
                weights.len()
            )));
        }
        if let Some(&c) = cols.iter().find(|&&c| c as usize >= n_in) {
            return Err(Error::invalid(format!("sparse map column {} out of range {}", c, n_in)));
        }
        Ok(Self {
            n_out: offsets.len() - 1,
            n_in,
            offsets,
            cols,
            weights,
        })
    }

    /// Row selection: `out[:, r] = in[:, rows[r]]`.
    pub fn selection(n_in: usize, rows: Vec<u32>) -> Result<Self> {
        let n = rows.len();
        Self::new(n_in, (0..=n).collect(), rows, vec![T::one(); n])
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn apply(&self, x: &[T], channels: usize) -> Vec<T> {
        let mut out = vec![T::zero(); channels * self.n_out];
        if self.n_out == 0 {
            return out;
        }
        out.par_chunks_mut(self.n_out).enumerate().for_each(|(c, orow)| {
            let xrow = &x[c * self.n_in..(c + 1) * self.n_in];
            for (r, o) in orow.iter_mut().enumerate() {
                let mut acc = T::zero();
                for e in self.offsets[r]..self.offsets[r + 1] {
                    acc += self.weights[e] * xrow[self.cols[e] as usize];
                }
                *o = acc;
            }
        });
        out
    }

    pub fn apply_transpose(&self, gy: &[T], channels: usize) -> Vec<T> {
        let mut gx = vec![T::zero(); channels * self.n_in];
        if self.n_in == 0 {
            return gx;
        }
        gx.par_chunks_mut(self.n_in).enumerate().for_each(|(c, grow)| {
            let gyrow = &gy[c * self.n_out..(c + 1) * self.n_out];
            for (r, &g) in gyrow.iter().enumerate() {
                for e in self.offsets[r]..self.offsets[r + 1] {
                    grow[self.cols[e] as usize] += self.weights[e] * g;
                }
            }
        });
        gx
    }
}

/// Marks a destination element that receives zero rather than a source value.
pub const GATHER_ZERO: u32 = u32::MAX;

/// Elementwise gather: `out[i] = src[index[i]]`, or zero for [`GATHER_ZERO`].
#[derive(Clone, Debug, PartialEq)]
pub struct GatherMap {
    pub src_len: usize,
    pub shape: Vec<usize>,
    pub index: Vec<u32>,
}

impl GatherMap {
    pub fn new(src_len: usize, shape: Vec<usize>, index: Vec<u32>) -> Result<Self> {
        if super::tensor::numel(&shape) != index.len() {
            return Err(Error::shape(format!(
                "gather shape {:?} does not match {} indices",
                shape,
                index.len()
            )));
        }
        if let Some(&i) = index.iter().find(|&&i| i != GATHER_ZERO && i as usize >= src_len) {
            return Err(Error::invalid(format!("gather index {} out of range {}", i, src_len)));
        }
        Ok(Self { src_len, shape, index })
    }

    pub fn apply<T: Scalar>(&self, src: &[T]) -> Vec<T> {
        self.index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { src[i as usize] })
            .collect()
    }

    pub fn apply_transpose<T: Scalar>(&self, gy: &[T]) -> Vec<T> {
        let mut gx = vec![T::zero(); self.src_len];
        for (&i, &g) in self.index.iter().zip(gy) {
            if i != GATHER_ZERO {
                gx[i as usize] += g;
            }
        }
        gx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c: T = super::tensor::cast(GELU_C);
    let a: T = super::tensor::cast(GELU_A);
    let half: T = super::tensor::cast(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c: T = super::tensor::cast(GELU_C);
    let a: T = super::tensor::cast(GELU_A);
    let half: T = super::tensor::cast(0.5);
    let three: T = super::tensor::cast(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Layer normalization across axis 0 of a `[C, V]` array, per column.
/// Returns `(y, xhat, inv_std)`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    v: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cn: T = super::tensor::cast(c as f64);
    let mut mean = vec![T::zero(); v];
    for ch in 0..c {
        for (m, &xv) in mean.iter_mut().zip(&x[ch * v..(ch + 1) * v]) {
            *m += xv;
        }
    }
    for m in &mut mean {
        *m /= cn;
    }
    let mut var = vec![T::zero(); v];
    for ch in 0..c {
        for ((s, &xv), &m) in var.iter_mut().zip(&x[ch * v..(ch + 1) * v]).zip(&mean) {
            let d = xv - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / cn + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); c * v];
    let mut y = vec![T::zero(); c * v];
    for ch in 0..c {
        for j in 0..v {
            let idx = ch * v + j;
            xhat[idx] = (x[idx] - mean[j]) * inv_std[j];
            y[idx] = gamma[ch] * xhat[idx] + beta[ch];
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    gy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    c: usize,
    v: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cn: T = super::tensor::cast(c as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut mean_dxh = vec![T::zero(); v];
    let mut mean_dxh_xh = vec![T::zero(); v];
    for ch in 0..c {
        for j in 0..v {
            let idx = ch * v + j;
            dgamma[ch] += gy[idx] * xhat[idx];
            dbeta[ch] += gy[idx];
            let dxh = gy[idx] * gamma[ch];
            mean_dxh[j] += dxh;
            mean_dxh_xh[j] += dxh * xhat[idx];
        }
    }
    for j in 0..v {
        mean_dxh[j] /= cn;
        mean_dxh_xh[j] /= cn;
    }
    let mut dx = vec![T::zero(); c * v];
    for ch in 0..c {
        for j in 0..v {
            let idx = ch * v + j;
            let dxh = gy[idx] * gamma[ch];
            dx[idx] = inv_std[j] * (dxh - mean_dxh[j] - xhat[idx] * mean_dxh_xh[j]);
        }
    }
    (dx, dgamma, dbeta)
}
