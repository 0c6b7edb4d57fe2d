//! Reverse-mode differentiation over an append-only operation graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order: every node's inputs have smaller ids.

use std::sync::Arc;

use super::kernels::{self, Conv2dGeom, Conv3dGeom, GatherMap, SparseMap};
use super::tensor::{cast, numel, permute_index_map, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BiasAdd { x: Var, bias: Var, axis: usize },
    MatMul(Var, Var),
    Gelu(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Gather { x: Var, map: Arc<GatherMap> },
    Concat { parts: Vec<Var>, axis: usize },
    Sparse { x: Var, map: Arc<SparseMap<T>> },
    Conv2d { x: Var, k: Var, geom: Conv2dGeom },
    Conv3d { x: Var, k: Var, geom: Conv3dGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation graph with a running multiply-accumulate counter.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates recorded by convolution and matmul nodes.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{}: operands {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `x + bias` with `bias` of shape `[x.shape[axis]]` broadcast along all other axes.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(Error::shape(format!(
                "bias {:?} does not match axis {} of {:?}",
                self.shape(bias),
                axis,
                shape
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for (i, &bv) in b.iter().enumerate().take(n) {
                for v in &mut out[(o * n + i) * inner..(o * n + i + 1) * inner] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::BiasAdd { x, bias, axis }))
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul operands {:?} and {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul_forward(self.value(a).data(), self.value(b).data(), m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let v = Tensor::scalar(self.value(a).sum() / cast::<T>(n as f64));
        Ok(self.push(v, Op::MeanAll(a)))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(format!("mean over axis {} of {:?}", axis, shape)));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let scale = T::one() / cast::<T>(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for (d, &s) in out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(&src[(o * n + i) * inner..(o * n + i + 1) * inner])
                {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::MeanAxis { x, axis }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn gather(&mut self, x: Var, map: Arc<GatherMap>) -> Result<Var> {
        if self.value(x).len() != map.src_len {
            return Err(Error::shape(format!(
                "gather expects {} source elements, got {}",
                map.src_len,
                self.value(x).len()
            )));
        }
        let out = map.apply(self.value(x).data());
        Ok(self.push(Tensor::from_parts(map.shape.clone(), out), Op::Gather { x, map }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let index = permute_index_map(&shape, axes)?;
        let dst: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let map = GatherMap::new(numel(&shape), dst, index.into_iter().map(|i| i as u32).collect())?;
        self.gather(x, Arc::new(map))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {} of {:?}", axis, base)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!("concat operands {:?} and {:?}", base, s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Apply a sparse map along the last axis: `[.., N_in] -> [.., N_out]`.
    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.last() != Some(&map.n_in) {
            return Err(Error::shape(format!(
                "sparse map expects last axis {}, got {:?}",
                map.n_in, shape
            )));
        }
        let channels = numel(&shape[..shape.len() - 1]);
        let out = map.apply(self.value(x).data(), channels);
        self.macs += (channels * map.nnz()) as u64;
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = map.n_out;
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Sparse { x, map }))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, pad: [usize; 2], stride: [usize; 2]) -> Result<Var> {
        let geom = Conv2dGeom::new(self.shape(x), self.shape(k), pad, stride)?;
        let macs = geom.macs();
        self.conv2d_counted(x, k, geom, macs)
    }

    /// 2D convolution whose MAC count is supplied by the caller, for
    /// structured kernels whose dense count overstates the work.
    pub(crate) fn conv2d_counted(&mut self, x: Var, k: Var, geom: Conv2dGeom, macs: u64) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(k), &geom);
        self.macs += macs;
        Ok(self.push(out, Op::Conv2d { x, k, geom }))
    }

    pub fn conv3d(&mut self, x: Var, k: Var, pad: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let geom = Conv3dGeom::new(self.shape(x), self.shape(k), pad, stride)?;
        let out = kernels::conv3d_forward(self.value(x), self.value(k), &geom);
        self.macs += geom.macs();
        Ok(self.push(out, Op::Conv3d { x, k, geom }))
    }

    /// Normalize across axis 0 (channels) independently for every position
    /// of the remaining axes, then apply a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || self.shape(gamma) != [shape[0]] || self.shape(beta) != [shape[0]] {
            return Err(Error::shape(format!(
                "layer norm over {:?} with gamma {:?} and beta {:?}",
                shape,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let c = shape[0];
        let v = numel(&shape[1..]);
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            v,
            eps,
        );
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gradients of a scalar node with respect to every node of the graph.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));

        for i in (0..n).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gy) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(lo, *a, gy.clone());
                    accumulate(lo, *b, gy.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(lo, *a, gy.clone());
                    accumulate(lo, *b, gy.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    let ga = gy.zip_map(self.value(*b), |g, y| g * y)?;
                    let gb = gy.zip_map(self.value(*a), |g, x| g * x)?;
                    accumulate(lo, *a, ga);
                    accumulate(lo, *b, gb);
                }
                Op::Scale(a, s) => accumulate(lo, *a, gy.scale(*s)),
                Op::BiasAdd { x, bias, axis } => {
                    let (outer, m, inner) = split_axis(gy.shape(), *axis);
                    let mut gb = vec![T::zero(); m];
                    let g = gy.data();
                    for o in 0..outer {
                        for (j, acc) in gb.iter_mut().enumerate() {
                            for &v in &g[(o * m + j) * inner..(o * m + j + 1) * inner] {
                                *acc += v;
                            }
                        }
                    }
                    accumulate(lo, *x, gy.clone());
                    accumulate(lo, *bias, Tensor::from_parts(vec![m], gb));
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (ga, gb) = kernels::matmul_backward(
                        self.value(*a).data(),
                        self.value(*b).data(),
                        gy.data(),
                        sa[0],
                        sa[1],
                        sb[1],
                    );
                    accumulate(lo, *a, Tensor::from_parts(sa.to_vec(), ga));
                    accumulate(lo, *b, Tensor::from_parts(sb.to_vec(), gb));
                }
                Op::Gelu(a) => {
                    let g = gy.zip_map(self.value(*a), |g, x| g * kernels::gelu_grad(x))?;
                    accumulate(lo, *a, g);
                }
                Op::Square(a) => {
                    let two: T = cast(2.0);
                    let g = gy.zip_map(self.value(*a), |g, x| two * g * x)?;
                    accumulate(lo, *a, g);
                }
                Op::SumAll(a) => {
                    accumulate(lo, *a, Tensor::full(self.shape(*a), gy.item()));
                }
                Op::MeanAll(a) => {
                    let n: T = cast(self.value(*a).len() as f64);
                    accumulate(lo, *a, Tensor::full(self.shape(*a), gy.item() / n));
                }
                Op::MeanAxis { x, axis } => {
                    let shape = self.shape(*x);
                    let (outer, m, inner) = split_axis(shape, *axis);
                    let scale = T::one() / cast::<T>(m as f64);
                    let g = gy.data();
                    let mut gx = vec![T::zero(); outer * m * inner];
                    for o in 0..outer {
                        for j in 0..m {
                            for (d, &s) in gx[(o * m + j) * inner..(o * m + j + 1) * inner]
                                .iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                            {
                                *d = s * scale;
                            }
                        }
                    }
                    accumulate(lo, *x, Tensor::from_parts(shape.to_vec(), gx));
                }
                Op::Reshape(a) => {
                    accumulate(lo, *a, gy.clone().reshape(self.shape(*a))?);
                }
                Op::Gather { x, map } => {
                    let g = map.apply_transpose(gy.data());
                    accumulate(lo, *x, Tensor::from_parts(self.shape(*x).to_vec(), g));
                }
                Op::Concat { parts, axis } => {
                    let shape = gy.shape();
                    let (outer, total, inner) = split_axis(shape, *axis);
                    let g = gy.data();
                    let mut start = 0;
                    for &p in parts {
                        let ps = self.shape(p);
                        let m = ps[*axis];
                        let mut out = Vec::with_capacity(outer * m * inner);
                        for o in 0..outer {
                            out.extend_from_slice(
                                &g[(o * total + start) * inner..(o * total + start + m) * inner],
                            );
                        }
                        accumulate(lo, p, Tensor::from_parts(ps.to_vec(), out));
                        start += m;
                    }
                }
                Op::Sparse { x, map } => {
                    let shape = self.shape(*x);
                    let channels = numel(&shape[..shape.len() - 1]);
                    let g = map.apply_transpose(gy.data(), channels);
                    accumulate(lo, *x, Tensor::from_parts(shape.to_vec(), g));
                }
                Op::Conv2d { x, k, geom } => {
                    let (gx, gk) = kernels::conv2d_backward(self.value(*x), self.value(*k), gy, geom);
                    accumulate(lo, *x, gx);
                    accumulate(lo, *k, gk);
                }
                Op::Conv3d { x, k, geom } => {
                    let (gx, gk) = kernels::conv3d_backward(self.value(*x), self.value(*k), gy, geom);
                    accumulate(lo, *x, gx);
                    accumulate(lo, *k, gk);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let shape = self.shape(*x);
                    let c = shape[0];
                    let v = numel(&shape[1..]);
                    let (dx, dg, db) = kernels::layer_norm_backward(
                        gy.data(),
                        xhat,
                        inv_std,
                        self.value(*gamma).data(),
                        c,
                        v,
                    );
                    accumulate(lo, *x, Tensor::from_parts(shape.to_vec(), dx));
                    accumulate(lo, *gamma, Tensor::from_parts(vec![c], dg));
                    accumulate(lo, *beta, Tensor::from_parts(vec![c], db));
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reaches_output(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let sq = g.square(x);
        let s = g.sum_all(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2., 4., 6.]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 2], &[-3., 0.5, 7., 1e6]).unwrap());
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.; 4]);
    }

    #[test]
    fn unreached_nodes_get_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let y = g.leaf(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert!(!grads.reaches_output(y));
        assert_eq!(grads.wrt(y).data(), &[0.; 3]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2., 4.]);
    }

    #[test]
    fn concat_and_mean_axis_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let b = g.leaf(Tensor::from_f64(&[2, 2], &[3., 4., 5., 6.]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4., 5., 6.]);
        let m = g.mean_axis(c, 1).unwrap();
        assert_eq!(g.value(m).data(), &[1.5, 3.5, 5.5]);
        let bad = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(g.concat(&[a, bad], 0).is_err());
    }
}
