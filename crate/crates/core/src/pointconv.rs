//! Continuous convolution between point clouds and factorized grids.
//!
//! Point to grid: for every voxel center `v`, the features of the points
//! inside the ellipsoid around `v` are lifted by an edge MLP, summed, and
//! passed through a second MLP. Grid to point is the decoder of
//! [`crate::grid`].

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cast, Graph, Scalar, SparseMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{self, CombineMode, FactorizedGridSet, GridGeometry, PositionalEncoding};
use crate::nn::{Ctx, Mlp, ParamStore};
use crate::spatial::{self, CsrNeighbors, Mat3, NeighborSpec, Point3};

/// Geometric part of the edge-MLP input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeEncoding {
    /// Whitened offset `Σ^{-1/2}(v_n − v)` and the voxel center normalized
    /// to the unit cube.
    #[default]
    Offset,
    /// Point and voxel positions, both normalized to the unit cube.
    Raw,
}

impl EdgeEncoding {
    pub fn width(&self) -> usize {
        6
    }
}

/// Default neighborhood: axis-aligned with semi-axes of two voxels.
pub fn default_covariance(geometry: &GridGeometry) -> Mat3 {
    let h = geometry.voxel_size();
    let mut cov = [[0.0; 3]; 3];
    for a in 0..3 {
        cov[a][a] = (2.0 * h[a]) * (2.0 * h[a]);
    }
    cov
}

#[derive(Clone, Debug)]
pub struct PointConvParams {
    /// Edge MLP over `[f_n, geometry(6)]`.
    pub inner: Mlp,
    /// Applied after the sum over neighbors.
    pub outer: Mlp,
    pub covariance: Mat3,
    pub edge: EdgeEncoding,
}

impl PointConvParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        covariance: Mat3,
        edge: EdgeEncoding,
        rng: &mut R,
    ) -> Self {
        let inner = Mlp::new(store, &format!("{}.inner", name), &[in_channels + edge.width(), hidden, hidden], rng);
        let outer = Mlp::new(store, &format!("{}.outer", name), &[hidden, out_channels], rng);
        Self {
            inner,
            outer,
            covariance,
            edge,
        }
    }

    pub fn spec(&self) -> Result<NeighborSpec> {
        NeighborSpec::ellipsoid(self.covariance)
    }
}

/// Precomputed edge structure between a point cloud and one grid.
#[derive(Clone, Debug)]
pub struct PointGridEdges<T: Scalar> {
    /// Point features to edge features: `[C, N] -> [C, E]`.
    pub gather: Arc<SparseMap<T>>,
    /// `[6, E]`.
    pub geometry: Tensor<T>,
    /// Per-voxel sum over edges: `[C, E] -> [C, V]`.
    pub reduce: Arc<SparseMap<T>>,
}

impl<T: Scalar> PointGridEdges<T> {
    pub fn new(
        points: &[Point3],
        geometry: &GridGeometry,
        spec: &NeighborSpec,
        neighbors: &CsrNeighbors,
        edge: EdgeEncoding,
    ) -> Result<Self> {
        let centers = geometry.centers();
        if neighbors.num_queries() != centers.len() {
            return Err(Error::shape(format!(
                "neighbor lists cover {} queries but the grid has {} voxels",
                neighbors.num_queries(),
                centers.len()
            )));
        }
        neighbors.check_invariants()?;
        if let Some(&i) = neighbors.indices.iter().find(|&&i| i as usize >= points.len()) {
            return Err(Error::invalid(format!("neighbor index {} out of range {}", i, points.len())));
        }
        let e = neighbors.num_edges();
        let bounds = &geometry.bounds;
        let mut geo = vec![T::zero(); 6 * e];
        for q in 0..centers.len() {
            let v = centers[q];
            let vn = bounds.normalize(&v);
            for (slot, &n) in (neighbors.offsets[q]..).zip(neighbors.neighbors(q)) {
                let p = points[n as usize];
                let first = match edge {
                    EdgeEncoding::Offset => spec.to_search_frame(&[p[0] - v[0], p[1] - v[1], p[2] - v[2]]),
                    EdgeEncoding::Raw => bounds.normalize(&p),
                };
                for a in 0..3 {
                    geo[a * e + slot] = cast(first[a]);
                    geo[(3 + a) * e + slot] = cast(vn[a]);
                }
            }
        }
        let gather = SparseMap::selection(points.len(), neighbors.indices.clone())?;
        let reduce = csr_sum_map(neighbors)?;
        Ok(Self {
            gather: Arc::new(gather),
            geometry: Tensor::new(vec![6, e], geo)?,
            reduce: Arc::new(reduce),
        })
    }

    /// Build the edges with a hash-grid ellipsoid search.
    pub fn search(points: &[Point3], geometry: &GridGeometry, params: &PointConvParams) -> Result<Self> {
        let spec = params.spec()?;
        let neighbors = spatial::neighbors(points, &geometry.centers(), &spec)?;
        Self::new(points, geometry, &spec, &neighbors, params.edge)
    }

    pub fn num_edges(&self) -> usize {
        self.gather.n_out
    }
}

fn csr_sum_map<T: Scalar>(neighbors: &CsrNeighbors) -> Result<SparseMap<T>> {
    let e = neighbors.num_edges();
    SparseMap::new(e, neighbors.offsets.clone(), (0..e as u32).collect(), vec![T::one(); e])
}

/// Per-query sums of `[C, E]` edge values over each query's CSR range, in
/// storage order.
pub fn csr_aggregate<T: Scalar>(values: &Tensor<T>, neighbors: &CsrNeighbors) -> Result<Tensor<T>> {
    if values.rank() != 2 || values.shape()[1] != neighbors.num_edges() {
        return Err(Error::shape(format!(
            "edge values {:?} do not match {} neighbor entries",
            values.shape(),
            neighbors.num_edges()
        )));
    }
    let c = values.shape()[0];
    let map = csr_sum_map::<T>(neighbors)?;
    Tensor::new(vec![c, neighbors.num_queries()], map.apply(values.data(), c))
}

/// Differentiable point-to-grid encoding; `features` is `[C_in, N]`, the
/// result `[C_out, V]`.
pub fn point_to_grid_graph<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    features: Var,
    edges: &PointGridEdges<T>,
    params: &PointConvParams,
) -> Result<Var> {
    let f = ctx.graph.sparse(features, edges.gather.clone())?;
    let geo = ctx.graph.leaf(edges.geometry.clone());
    let input = ctx.graph.concat(&[f, geo], 0)?;
    let h = params.inner.forward(ctx, input)?;
    let summed = ctx.graph.sparse(h, edges.reduce.clone())?;
    params.outer.forward(ctx, summed)
}

/// Encode point features into a `[C_out, X, Y, Z]` volume, using neighbor
/// lists whose queries are the grid's voxel centers.
pub fn point_to_grid<T: Scalar>(
    points: &[Point3],
    features: &Tensor<T>,
    geometry: &GridGeometry,
    params: &PointConvParams,
    neighbors: &CsrNeighbors,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    if features.rank() != 2 || features.shape()[1] != points.len() {
        return Err(Error::shape(format!(
            "features {:?} do not match {} points",
            features.shape(),
            points.len()
        )));
    }
    let edges = PointGridEdges::new(points, geometry, &params.spec()?, neighbors, params.edge)?;
    let mut graph = Graph::new();
    let fv = graph.leaf(features.clone());
    let mut ctx = Ctx::new(&mut graph, store);
    let y = point_to_grid_graph(&mut ctx, fv, &edges, params)?;
    let r = geometry.resolution;
    graph.value(y).clone().reshape(&[params.outer.out_dim(), r[0], r[1], r[2]])
}

/// Decode grid features at surface points; `[out, N]`.
pub fn grid_to_point<T: Scalar>(
    set: &FactorizedGridSet<T>,
    points: &[Point3],
    decoders: &[Mlp],
    store: &ParamStore<T>,
    encoding: &PositionalEncoding,
    combine: CombineMode,
) -> Result<Tensor<T>> {
    grid::decode_points(points, set, decoders, store, encoding, combine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Aabb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, n: usize) -> (Vec<Point3>, Tensor<f64>, GridGeometry, ParamStore<f64>, PointConvParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point3> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let feats = Tensor::from_fn(&[2, n], |_| rng.random_range(-1.0..1.0));
        let geom = GridGeometry::new([2, 4, 4], Aabb::new([0.0; 3], [1.0; 3]).unwrap()).unwrap();
        let mut store = ParamStore::new();
        let params = PointConvParams::new(&mut store, "pc", 2, 5, 3, default_covariance(&geom), EdgeEncoding::Offset, &mut rng);
        (pts, feats, geom, store, params)
    }

    #[test]
    fn empty_neighborhoods_give_constant_volume() {
        let (pts, feats, geom, store, params) = setup(1, 10);
        let empty = CsrNeighbors::empty(geom.num_voxels());
        let v = point_to_grid(&pts, &feats, &geom, &params, &empty, &store).unwrap();
        let first: Vec<f64> = (0..3).map(|c| v.data()[c * 32]).collect();
        for c in 0..3 {
            assert!(v.data()[c * 32..(c + 1) * 32].iter().all(|&x| x == first[c]));
        }
    }

    #[test]
    fn query_count_must_match_voxels() {
        let (pts, feats, geom, store, params) = setup(2, 10);
        let bad = CsrNeighbors::empty(3);
        assert!(point_to_grid(&pts, &feats, &geom, &params, &bad, &store).is_err());
    }

    #[test]
    fn passthrough_single_neighbor() {
        let (pts, feats, geom, _, base) = setup(3, 32);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = PointConvParams {
            inner: Mlp::new(&mut store, "i", &[8, 5], &mut rng),
            outer: Mlp::new(&mut store, "o", &[5, 3], &mut rng),
            ..base
        };
        params.inner.layers[0].set_identity(&mut store);
        params.outer.layers[0].set_identity(&mut store);
        // Voxel q sees only point q.
        let nb = CsrNeighbors {
            offsets: (0..=32).collect(),
            indices: (0..32).collect(),
        };
        let v = point_to_grid(&pts, &feats, &geom, &params, &nb, &store).unwrap();
        for q in 0..32 {
            for c in 0..2 {
                assert_eq!(v.data()[c * 32 + q], feats.data()[c * 32 + q]);
            }
        }
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let (pts, feats, geom, store, params) = setup(4, 200);
        let perm: Vec<usize> = (0..200).rev().collect();
        let ppts: Vec<Point3> = perm.iter().map(|&i| pts[i]).collect();
        let pfeats = Tensor::from_fn(&[2, 200], |k| feats.data()[(k / 200) * 200 + perm[k % 200]]);
        let spec = params.spec().unwrap();
        let nb = spatial::neighbors(&pts, &geom.centers(), &spec).unwrap();
        let pnb = spatial::neighbors(&ppts, &geom.centers(), &spec).unwrap();
        let a = point_to_grid(&pts, &feats, &geom, &params, &nb.sorted(), &store).unwrap();
        // Reorder permuted neighbor lists to visit the same original points
        // in the same order.
        let mut pn = pnb.clone();
        for q in 0..pn.num_queries() {
            let r = pn.offsets[q]..pn.offsets[q + 1];
            pn.indices[r].sort_by_key(|&i| perm[i as usize]);
        }
        let b = point_to_grid(&ppts, &pfeats, &geom, &params, &pn, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn far_points_do_not_contribute() {
        let (mut pts, feats, geom, store, params) = setup(5, 20);
        pts[7] = [5.0, 5.0, 5.0];
        let spec = params.spec().unwrap();
        let nb = spatial::neighbors(&pts, &geom.centers(), &spec).unwrap();
        let a = point_to_grid(&pts, &feats, &geom, &params, &nb, &store).unwrap();
        let mut f2 = feats.clone();
        f2.data_mut()[7] = 100.0;
        f2.data_mut()[20 + 7] = -100.0;
        let b = point_to_grid(&pts, &f2, &geom, &params, &nb, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csr_aggregate_cases() {
        let nb = CsrNeighbors {
            offsets: vec![0, 2, 2, 5],
            indices: vec![0, 1, 0, 1, 2],
        };
        let ones = Tensor::<f64>::ones(&[1, 5]);
        assert_eq!(csr_aggregate(&ones, &nb).unwrap().data(), &[2.0, 0.0, 3.0]);
        let empty = CsrNeighbors::empty(4);
        let z = csr_aggregate(&Tensor::<f64>::zeros(&[2, 0]), &empty).unwrap();
        assert_eq!(z.data(), &[0.0; 8]);
        assert!(csr_aggregate(&Tensor::<f64>::zeros(&[1, 4]), &nb).is_err());
    }

    #[test]
    fn csr_aggregate_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let counts: Vec<usize> = (0..50).map(|_| rng.random_range(0..7)).collect();
        let offsets = spatial::exclusive_sum(&counts);
        let e = *offsets.last().unwrap();
        let nb = CsrNeighbors {
            offsets: offsets.clone(),
            indices: vec![0; e],
        };
        let vals = Tensor::<f64>::from_fn(&[3, e], |_| rng.random_range(-1.0..1.0));
        let out = csr_aggregate(&vals, &nb).unwrap();
        for c in 0..3 {
            for q in 0..50 {
                let mut acc = 0.0;
                for k in offsets[q]..offsets[q + 1] {
                    acc += vals.data()[c * e + k];
                }
                assert_eq!(out.data()[c * 50 + q], acc);
            }
        }
        let v32: Tensor<f32> = vals.cast();
        let o32 = csr_aggregate(&v32, &nb).unwrap();
        assert!(o32.cast::<f64>().max_abs_diff(&out) < 1e-6);
    }

    #[test]
    fn grid_to_point_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = grid::GridSpec::new([4, 4, 4], [2, 2, 2], 2, Aabb::new([0.0; 3], [1.0; 3]).unwrap()).unwrap();
        let set = FactorizedGridSet::<f64>::zeros(&spec);
        let mut store = ParamStore::new();
        let decs: Vec<Mlp> = (0..3).map(|i| Mlp::new(&mut store, &format!("d{}", i), &[5, 4], &mut rng)).collect();
        let n = rng.random_range(1..40);
        let pts: Vec<Point3> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let out = grid_to_point(&set, &pts, &decs, &store, &PositionalEncoding::Raw, CombineMode::Sum).unwrap();
        assert_eq!(out.shape(), &[4, n]);
    }
}
