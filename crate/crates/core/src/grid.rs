//! Factorized implicit grids: geometry, trilinear sampling, decoding at
//! arbitrary points, and inter-grid fusion.
//!
//! Feature volumes are stored channel-first as `[C, X, Y, Z]`; a voxel's flat
//! index is `(i·Y + j)·Z + k` and its center sits at
//! `min + (idx + 0.5)·(extent / resolution)` on every axis.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cast, Graph, Scalar, SparseMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, Mlp, ParamStore};
use crate::spatial::Point3;

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::invalid(format!("box {:?}..{:?} has non-positive extent", min, max)));
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> Point3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    /// Map into the unit cube (not clamped).
    pub fn normalize(&self, p: &Point3) -> Point3 {
        let e = self.extent();
        [
            (p[0] - self.min[0]) / e[0],
            (p[1] - self.min[1]) / e[1],
            (p[2] - self.min[2]) / e[2],
        ]
    }

    /// Smallest box containing `points`, grown by `margin` times its extent
    /// on every side.
    pub fn around(points: &[Point3], margin: f64) -> Result<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        for a in 0..3 {
            let pad = ((max[a] - min[a]) * margin).max(1e-9);
            min[a] -= pad;
            max[a] += pad;
        }
        Self::new(min, max)
    }
}

/// Resolutions of the factorized grids derived from a maximum resolution and
/// per-axis ranks: grid `m` is low-resolution (rank `r_m`) along axis `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub max_resolution: [usize; 3],
    pub ranks: [usize; 3],
    pub channels: usize,
    pub bounds: Aabb,
}

impl GridSpec {
    pub fn new(max_resolution: [usize; 3], ranks: [usize; 3], channels: usize, bounds: Aabb) -> Result<Self> {
        for a in 0..3 {
            if ranks[a] == 0 || ranks[a] > max_resolution[a] {
                return Err(Error::invalid(format!(
                    "rank {} on axis {} must lie in 1..={}",
                    ranks[a], a, max_resolution[a]
                )));
            }
        }
        if channels == 0 {
            return Err(Error::invalid("grid channel count must be positive"));
        }
        Ok(Self {
            max_resolution,
            ranks,
            channels,
            bounds,
        })
    }

    pub fn resolutions(&self) -> Vec<[usize; 3]> {
        (0..3)
            .map(|m| {
                let mut r = self.max_resolution;
                r[m] = self.ranks[m];
                r
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cardinality {
    pub per_grid: Vec<u64>,
    pub total: u64,
    pub explicit: u64,
}

impl Cardinality {
    /// Factorized total over the explicit count.
    pub fn ratio(&self) -> f64 {
        self.total as f64 / self.explicit as f64
    }
}

pub fn cardinality(spec: &GridSpec) -> Cardinality {
    let m = spec.max_resolution;
    cardinality_of(&spec.resolutions(), m)
}

/// Element counts of arbitrary grid resolutions against an explicit grid of
/// extent `explicit`.
pub fn cardinality_of(resolutions: &[[usize; 3]], explicit: [usize; 3]) -> Cardinality {
    let per_grid: Vec<u64> = resolutions
        .iter()
        .map(|r| r.iter().map(|&v| v as u64).product())
        .collect();
    Cardinality {
        total: per_grid.iter().sum(),
        per_grid,
        explicit: explicit.iter().map(|&v| v as u64).product(),
    }
}

/// Index of the unique smallest extent, if there is one.
pub fn rank_axis(resolution: [usize; 3]) -> Option<usize> {
    let min = *resolution.iter().min()?;
    let mut it = (0..3).filter(|&a| resolution[a] == min);
    let a = it.next()?;
    it.next().is_none().then_some(a)
}

/// Voxel layout of one grid inside a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
}

/// Flat indices and weights of the 8 interpolation corners.
pub type Corners = [(u32, f64); 8];

impl GridGeometry {
    pub fn new(resolution: [usize; 3], bounds: Aabb) -> Result<Self> {
        if resolution.contains(&0) {
            return Err(Error::invalid(format!("grid resolution {:?} has an empty axis", resolution)));
        }
        Ok(Self { resolution, bounds })
    }

    pub fn num_voxels(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn voxel_size(&self) -> Point3 {
        let e = self.bounds.extent();
        [
            e[0] / self.resolution[0] as f64,
            e[1] / self.resolution[1] as f64,
            e[2] / self.resolution[2] as f64,
        ]
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.resolution[1] + idx[1]) * self.resolution[2] + idx[2]
    }

    pub fn center(&self, idx: [usize; 3]) -> Point3 {
        let h = self.voxel_size();
        [
            self.bounds.min[0] + (idx[0] as f64 + 0.5) * h[0],
            self.bounds.min[1] + (idx[1] as f64 + 0.5) * h[1],
            self.bounds.min[2] + (idx[2] as f64 + 0.5) * h[2],
        ]
    }

    /// All voxel centers in flat-index order.
    pub fn centers(&self) -> Vec<Point3> {
        let [nx, ny, nz] = self.resolution;
        let mut out = Vec::with_capacity(self.num_voxels());
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    out.push(self.center([i, j, k]));
                }
            }
        }
        out
    }

    /// Trilinear corners of `p`. Positions beyond the outermost voxel
    /// centers clamp to them; along an axis of extent 1 both corners
    /// coincide.
    pub fn corners(&self, p: &Point3) -> Corners {
        let h = self.voxel_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = ((p[a] - self.bounds.min[a]) / h[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            t[a] = u - i0 as f64;
        }
        let mut out = [(0u32, 0.0f64); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut idx = [0usize; 3];
            let mut w = 1.0;
            for a in 0..3 {
                if c >> (2 - a) & 1 == 1 {
                    idx[a] = hi[a];
                    w *= t[a];
                } else {
                    idx[a] = lo[a];
                    w *= 1.0 - t[a];
                }
            }
            *slot = (self.flat(idx) as u32, w);
        }
        out
    }

    /// Sparse trilinear interpolation map from this grid's voxels to `points`.
    pub fn sampling_map<T: Scalar>(&self, points: &[Point3]) -> SparseMap<T> {
        let mut cols = Vec::with_capacity(points.len() * 8);
        let mut weights = Vec::with_capacity(points.len() * 8);
        for p in points {
            for (c, w) in self.corners(p) {
                cols.push(c);
                weights.push(cast(w));
            }
        }
        SparseMap::new(self.num_voxels(), (0..=points.len()).map(|i| 8 * i).collect(), cols, weights)
            .expect("corner indices lie inside the grid")
    }
}

/// Trilinear sample of a `[C, X, Y, Z]` volume at `v`.
pub fn trilinear_sample<T: Scalar>(values: &Tensor<T>, geometry: &GridGeometry, v: &Point3) -> Result<Vec<T>> {
    check_volume(values, geometry)?;
    let c = values.shape()[0];
    let n = geometry.num_voxels();
    let corners = geometry.corners(v);
    Ok((0..c)
        .map(|ch| {
            corners
                .iter()
                .map(|&(i, w)| values.data()[ch * n + i as usize] * cast(w))
                .sum()
        })
        .collect())
}

fn check_volume<T: Scalar>(values: &Tensor<T>, geometry: &GridGeometry) -> Result<()> {
    if values.rank() != 4 || values.shape()[1..] != geometry.resolution {
        return Err(Error::shape(format!(
            "volume {:?} does not match grid resolution {:?}",
            values.shape(),
            geometry.resolution
        )));
    }
    Ok(())
}

/// One factorized feature volume.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T: Scalar> {
    pub geometry: GridGeometry,
    pub rank_axis: usize,
    /// `[C, X, Y, Z]`.
    pub values: Tensor<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(geometry: GridGeometry, rank_axis: usize, values: Tensor<T>) -> Result<Self> {
        check_volume(&values, &geometry)?;
        if rank_axis > 2 {
            return Err(Error::invalid(format!("rank axis {} out of range", rank_axis)));
        }
        Ok(Self {
            geometry,
            rank_axis,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.geometry.resolution[self.rank_axis]
    }
}

/// The set of factorized grids sharing one box and channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedGridSet<T: Scalar> {
    pub bounds: Aabb,
    pub grids: Vec<FeatureGrid<T>>,
}

impl<T: Scalar> FactorizedGridSet<T> {
    pub fn new(bounds: Aabb, grids: Vec<FeatureGrid<T>>) -> Result<Self> {
        if let Some(first) = grids.first() {
            let c = first.channels();
            for g in &grids {
                if g.geometry.bounds != bounds {
                    return Err(Error::invalid("factorized grids must share one bounding box"));
                }
                if g.channels() != c {
                    return Err(Error::shape(format!(
                        "factorized grids must share channels, got {} and {}",
                        c,
                        g.channels()
                    )));
                }
            }
        }
        Ok(Self { bounds, grids })
    }

    /// Zero-valued grids laid out per `spec`.
    pub fn zeros(spec: &GridSpec) -> Self {
        let grids = spec
            .resolutions()
            .into_iter()
            .enumerate()
            .map(|(m, res)| FeatureGrid {
                geometry: GridGeometry {
                    resolution: res,
                    bounds: spec.bounds,
                },
                rank_axis: m,
                values: Tensor::zeros(&[spec.channels, res[0], res[1], res[2]]),
            })
            .collect();
        Self {
            bounds: spec.bounds,
            grids,
        }
    }

    pub fn channels(&self) -> usize {
        self.grids.first().map_or(0, FeatureGrid::channels)
    }

    pub fn geometries(&self) -> Vec<GridGeometry> {
        self.grids.iter().map(|g| g.geometry).collect()
    }
}

/// How per-corner and per-grid decoder outputs are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// Trilinear-weighted sum over corners, then sum over grids.
    #[default]
    Sum,
    /// Product over corners, then product over grids.
    Product,
}

/// Encoding of query positions fed to the decoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PositionalEncoding {
    /// Coordinates normalized to the unit cube.
    #[default]
    Raw,
    /// Normalized coordinates followed by `sin(2^f π u)`, `cos(2^f π u)`.
    Sinusoidal { frequencies: usize },
}

impl PositionalEncoding {
    pub fn width(&self) -> usize {
        match self {
            Self::Raw => 3,
            Self::Sinusoidal { frequencies } => 3 + 6 * frequencies,
        }
    }

    /// `[width, P]` encoding of `points`.
    pub fn encode<T: Scalar>(&self, bounds: &Aabb, points: &[Point3]) -> Tensor<T> {
        let n = points.len();
        let w = self.width();
        let mut out = vec![T::zero(); w * n];
        for (p, pt) in points.iter().enumerate() {
            let u = bounds.normalize(pt);
            for a in 0..3 {
                out[a * n + p] = cast(u[a]);
            }
            if let Self::Sinusoidal { frequencies } = self {
                for f in 0..*frequencies {
                    let s = std::f64::consts::PI * (1u64 << f) as f64;
                    for a in 0..3 {
                        let row = 3 + 6 * f + 2 * a;
                        out[row * n + p] = cast((s * u[a]).sin());
                        out[(row + 1) * n + p] = cast((s * u[a]).cos());
                    }
                }
            }
        }
        Tensor::new(vec![w, n], out).expect("encoding size")
    }
}

/// Precomputed gathers for decoding one grid at a fixed set of points.
#[derive(Clone, Debug)]
pub struct GridDecodePlan<T> {
    /// Corner `c` of every point: `[C, V] -> [C, P]`.
    pub corners: Vec<Arc<SparseMap<T>>>,
    /// Trilinear weighting of the concatenated corner outputs:
    /// `[C, 8P] -> [C, P]`.
    pub blend: Arc<SparseMap<T>>,
}

#[derive(Clone, Debug)]
pub struct DecodePlan<T: Scalar> {
    pub grids: Vec<GridDecodePlan<T>>,
    /// `[E, P]`.
    pub encoding: Tensor<T>,
    pub num_points: usize,
}

impl<T: Scalar> DecodePlan<T> {
    pub fn new(geometries: &[GridGeometry], points: &[Point3], encoding: &PositionalEncoding) -> Result<Self> {
        let bounds = geometries
            .first()
            .ok_or_else(|| Error::invalid("decoding needs at least one grid"))?
            .bounds;
        let n = points.len();
        let grids = geometries
            .iter()
            .map(|geom| {
                let all: Vec<Corners> = points.iter().map(|p| geom.corners(p)).collect();
                let corners = (0..8)
                    .map(|c| {
                        let rows = all.iter().map(|cs| cs[c].0).collect();
                        SparseMap::selection(geom.num_voxels(), rows).map(Arc::new)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut cols = Vec::with_capacity(8 * n);
                let mut weights = Vec::with_capacity(8 * n);
                for (p, cs) in all.iter().enumerate() {
                    for (c, &(_, w)) in cs.iter().enumerate() {
                        cols.push((c * n + p) as u32);
                        weights.push(cast(w));
                    }
                }
                let blend = SparseMap::new(8 * n, (0..=n).map(|i| 8 * i).collect(), cols, weights)?;
                Ok(GridDecodePlan {
                    corners,
                    blend: Arc::new(blend),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grids,
            encoding: encoding.encode(&bounds, points),
            num_points: n,
        })
    }
}

/// Decode grid features at the plan's points.
///
/// For grid `m` the shared decoder `mlp_m` is applied to each of the 8 corner
/// features concatenated with the encoded position; the 8 results are
/// combined (weighted sum or product) and the per-grid results are combined
/// the same way. `grids[m]` is the `[C, V_m]` value of grid `m`.
pub fn decode_graph<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    grids: &[Var],
    plan: &DecodePlan<T>,
    decoders: &[Mlp],
    combine: CombineMode,
) -> Result<Var> {
    if grids.len() != plan.grids.len() || grids.len() != decoders.len() || grids.is_empty() {
        return Err(Error::invalid(format!(
            "decode got {} grids, {} plans and {} decoders",
            grids.len(),
            plan.grids.len(),
            decoders.len()
        )));
    }
    let enc = ctx.graph.leaf(plan.encoding.clone());
    let mut total: Option<Var> = None;
    for ((&x, gp), mlp) in grids.iter().zip(&plan.grids).zip(decoders) {
        let mut outs = Vec::with_capacity(8);
        for map in &gp.corners {
            let f = ctx.graph.sparse(x, map.clone())?;
            let input = ctx.graph.concat(&[f, enc], 0)?;
            outs.push(mlp.forward(ctx, input)?);
        }
        let per_grid = match combine {
            CombineMode::Sum => {
                let cat = ctx.graph.concat(&outs, 1)?;
                ctx.graph.sparse(cat, gp.blend.clone())?
            }
            CombineMode::Product => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = ctx.graph.mul(acc, o)?;
                }
                acc
            }
        };
        total = Some(match (total, combine) {
            (None, _) => per_grid,
            (Some(t), CombineMode::Sum) => ctx.graph.add(t, per_grid)?,
            (Some(t), CombineMode::Product) => ctx.graph.mul(t, per_grid)?,
        });
    }
    Ok(total.unwrap())
}

/// Flatten `[C, X, Y, Z]` volumes to `[C, V]` graph leaves.
fn flat_leaves<T: Scalar>(graph: &mut Graph<T>, set: &FactorizedGridSet<T>) -> Result<Vec<Var>> {
    set.grids
        .iter()
        .map(|g| {
            let v = g.geometry.num_voxels();
            graph.leaf(g.values.clone().reshape(&[g.channels(), v]).expect("volume size"))
        })
        .map(Ok)
        .collect()
}

/// Decode features at `points`; returns `[out, P]`.
pub fn decode_points<T: Scalar>(
    points: &[Point3],
    set: &FactorizedGridSet<T>,
    decoders: &[Mlp],
    store: &ParamStore<T>,
    encoding: &PositionalEncoding,
    combine: CombineMode,
) -> Result<Tensor<T>> {
    let plan = DecodePlan::new(&set.geometries(), points, encoding)?;
    let mut graph = Graph::new();
    let leaves = flat_leaves(&mut graph, set)?;
    let mut ctx = Ctx::new(&mut graph, store);
    let y = decode_graph(&mut ctx, &leaves, &plan, decoders, combine)?;
    Ok(graph.value(y).clone())
}

/// Decode the feature vector at a single point.
pub fn decode_point<T: Scalar>(
    v: &Point3,
    set: &FactorizedGridSet<T>,
    decoders: &[Mlp],
    store: &ParamStore<T>,
    encoding: &PositionalEncoding,
    combine: CombineMode,
) -> Result<Vec<T>> {
    Ok(decode_points(std::slice::from_ref(v), set, decoders, store, encoding, combine)?.into_data())
}

/// Sampling maps for fusion: `maps[m][n]` interpolates grid `n` at the voxel
/// centers of grid `m` (`None` on the diagonal).
#[derive(Clone, Debug)]
pub struct FusionPlan<T> {
    pub maps: Vec<Vec<Option<Arc<SparseMap<T>>>>>,
}

impl<T: Scalar> FusionPlan<T> {
    pub fn new(geometries: &[GridGeometry]) -> Self {
        let maps = geometries
            .iter()
            .enumerate()
            .map(|(m, target)| {
                let centers = target.centers();
                geometries
                    .iter()
                    .enumerate()
                    .map(|(n, src)| (n != m).then(|| Arc::new(src.sampling_map(&centers))))
                    .collect()
            })
            .collect();
        Self { maps }
    }
}

/// Synchronous fusion on `[C, V_m]` grid values: every grid receives the sum
/// of the other grids sampled at its voxel centers, passed through its
/// fusion layer (identity when `None`). All inputs are read before any
/// output is formed.
pub fn fuse_graph<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    grids: &[Var],
    plan: &FusionPlan<T>,
    fusion: &[Option<Linear>],
) -> Result<Vec<Var>> {
    if plan.maps.len() != grids.len() || fusion.len() != grids.len() {
        return Err(Error::invalid("fusion plan, layers and grids must have equal counts"));
    }
    let mut out = Vec::with_capacity(grids.len());
    for (m, &x) in grids.iter().enumerate() {
        let mut acc: Option<Var> = None;
        for (n, &src) in grids.iter().enumerate() {
            if let Some(map) = &plan.maps[m][n] {
                let s = ctx.graph.sparse(src, map.clone())?;
                acc = Some(match acc {
                    None => s,
                    Some(a) => ctx.graph.add(a, s)?,
                });
            }
        }
        out.push(match acc {
            None => x,
            Some(a) => {
                let a = match &fusion[m] {
                    Some(layer) => layer.forward(ctx, a)?,
                    None => a,
                };
                ctx.graph.add(x, a)?
            }
        });
    }
    Ok(out)
}

/// Fuse a grid set; `fusion[m] = None` is the identity layer.
pub fn fuse<T: Scalar>(
    set: &FactorizedGridSet<T>,
    fusion: &[Option<Linear>],
    store: &ParamStore<T>,
) -> Result<FactorizedGridSet<T>> {
    let plan = FusionPlan::new(&set.geometries());
    let mut graph = Graph::new();
    let leaves = flat_leaves(&mut graph, set)?;
    let mut ctx = Ctx::new(&mut graph, store);
    let fused = fuse_graph(&mut ctx, &leaves, &plan, fusion)?;
    let grids = set
        .grids
        .iter()
        .zip(fused)
        .map(|(g, v)| FeatureGrid {
            geometry: g.geometry,
            rank_axis: g.rank_axis,
            values: graph.value(v).clone().reshape(g.values.shape()).expect("volume size"),
        })
        .collect();
    Ok(FactorizedGridSet {
        bounds: set.bounds,
        grids,
    })
}
