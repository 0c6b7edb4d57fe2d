//! Hash-grid accelerated radius and ellipsoid neighbor search with
//! compressed-sparse-row output.
//!
//! Queries follow the count / exclusive-sum / allocate / fill pattern: a first
//! pass counts the neighbors of every query, an exclusive prefix sum turns the
//! counts into offsets, one exact allocation holds all results, and a second
//! pass writes each query's neighbors into its own disjoint range.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Membership rule for a neighborhood around a query point.
#[derive(Clone, Debug, PartialEq)]
pub enum NeighborSpec {
    /// `‖p − q‖ < radius`.
    Sphere { radius: f64 },
    /// `(p − q)ᵀ Σ⁻¹ (p − q) < 1`.
    Ellipsoid {
        covariance: Mat3,
        /// `L⁻¹` for the Cholesky factor `Σ = L·Lᵀ`; `‖L⁻¹ d‖² = dᵀ Σ⁻¹ d`.
        whitening: Mat3,
        inverse: Mat3,
    },
}

fn mat_vec(m: &Mat3, v: &Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Lower Cholesky factor; `None` unless strictly positive definite.
fn cholesky(a: &Mat3) -> Option<Mat3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn invert_lower(l: &Mat3) -> Mat3 {
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        inv[i][i] = 1.0 / l[i][i];
        for j in 0..i {
            let s: f64 = (j..i).map(|k| l[i][k] * inv[k][j]).sum();
            inv[i][j] = -s / l[i][i];
        }
    }
    inv
}

impl NeighborSpec {
    pub fn sphere(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::invalid(format!("radius must be positive and finite, got {}", radius)));
        }
        Ok(Self::Sphere { radius })
    }

    /// Ellipsoid from a symmetric positive-definite covariance.
    pub fn ellipsoid(covariance: Mat3) -> Result<Self> {
        let scale = covariance
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..3 {
            for j in 0..i {
                if (covariance[i][j] - covariance[j][i]).abs() > 1e-12 * scale {
                    return Err(Error::invalid("covariance must be symmetric"));
                }
            }
        }
        let l = cholesky(&covariance)
            .ok_or_else(|| Error::invalid("covariance must have strictly positive eigenvalues"))?;
        let whitening = invert_lower(&l);
        let mut inverse = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inverse[i][j] = (0..3).map(|k| whitening[k][i] * whitening[k][j]).sum();
            }
        }
        Ok(Self::Ellipsoid {
            covariance,
            whitening,
            inverse,
        })
    }

    /// Axis-aligned ellipsoid with the given semi-axes, `Σ = diag(a²)`.
    pub fn axis_aligned(semi_axes: Point3) -> Result<Self> {
        let mut cov = [[0.0; 3]; 3];
        for a in 0..3 {
            cov[a][a] = semi_axes[a] * semi_axes[a];
        }
        Self::ellipsoid(cov)
    }

    /// Exact membership predicate, evaluated directly in physical space.
    pub fn contains(&self, center: &Point3, p: &Point3) -> bool {
        let d = sub(p, center);
        match self {
            Self::Sphere { radius } => dot(&d, &d) < radius * radius,
            Self::Ellipsoid { inverse, .. } => dot(&d, &mat_vec(inverse, &d)) < 1.0,
        }
    }

    /// Map into the frame where the neighborhood is a ball of radius
    /// [`Self::search_radius`].
    pub fn to_search_frame(&self, p: &Point3) -> Point3 {
        match self {
            Self::Sphere { .. } => *p,
            Self::Ellipsoid { whitening, .. } => mat_vec(whitening, p),
        }
    }

    pub fn search_radius(&self) -> f64 {
        match self {
            Self::Sphere { radius } => *radius,
            Self::Ellipsoid { .. } => 1.0,
        }
    }

    fn frame(&self) -> Option<Mat3> {
        match self {
            Self::Sphere { .. } => None,
            Self::Ellipsoid { whitening, .. } => Some(*whitening),
        }
    }
}

/// Compressed-sparse-row neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsrNeighbors {
    /// Length `Q + 1`; exclusive prefix sums of the per-query counts.
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
}

impl CsrNeighbors {
    pub fn empty(num_queries: usize) -> Self {
        Self {
            offsets: vec![0; num_queries + 1],
            indices: Vec::new(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, q: usize) -> &[u32] {
        &self.indices[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Same lists with each query's indices sorted ascending.
    pub fn sorted(&self) -> Self {
        let mut out = self.clone();
        for q in 0..self.num_queries() {
            out.indices[self.offsets[q]..self.offsets[q + 1]].sort_unstable();
        }
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.offsets.first() != Some(&0)
            || self.offsets.windows(2).any(|w| w[0] > w[1])
            || *self.offsets.last().unwrap() != self.indices.len()
        {
            return Err(Error::invalid("CSR offsets must start at 0, be non-decreasing, and end at the index count"));
        }
        Ok(())
    }
}

/// Exclusive prefix sum; the result has one more element than `counts`.
pub fn exclusive_sum(counts: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(counts.len() + 1);
    let mut acc = 0;
    out.push(0);
    for &c in counts {
        acc += c;
        out.push(acc);
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    key: [i64; 3],
    start: u32,
    len: u32,
    used: bool,
}

const EMPTY_SLOT: Slot = Slot {
    key: [0; 3],
    start: 0,
    len: 0,
    used: false,
};

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn hash_cell(k: &[i64; 3]) -> u64 {
    mix64(mix64(mix64(k[0] as u64) ^ k[1] as u64) ^ k[2] as u64)
}

/// Uniform hash grid over a fixed point set, immutable after build.
///
/// Cells are keyed by `floor(p / cell_size)` and stored in an
/// open-addressing table with linear probing, sized to the next power of two
/// at or above twice the point count.
#[derive(Clone, Debug)]
pub struct HashGrid {
    cell_size: f64,
    frame: Option<Mat3>,
    points: Vec<Point3>,
    slots: Vec<Slot>,
    cell_points: Vec<u32>,
}

impl HashGrid {
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.slots.iter().filter(|s| s.used).count()
    }

    pub fn table_capacity(&self) -> usize {
        self.slots.len()
    }

    /// Points as stored, i.e. after the search-frame transform if any.
    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn cell_of(&self, p: &Point3) -> [i64; 3] {
        [
            (p[0] / self.cell_size).floor() as i64,
            (p[1] / self.cell_size).floor() as i64,
            (p[2] / self.cell_size).floor() as i64,
        ]
    }

    fn probe(&self, key: &[i64; 3]) -> usize {
        let mask = self.slots.len() - 1;
        let mut s = hash_cell(key) as usize & mask;
        while self.slots[s].used && self.slots[s].key != *key {
            s = (s + 1) & mask;
        }
        s
    }

    pub fn points_in_cell(&self, key: &[i64; 3]) -> &[u32] {
        let slot = &self.slots[self.probe(key)];
        if slot.used {
            &self.cell_points[slot.start as usize..(slot.start + slot.len) as usize]
        } else {
            &[]
        }
    }

    /// Every occupied cell with its point indices.
    pub fn cells(&self) -> impl Iterator<Item = ([i64; 3], &[u32])> {
        self.slots.iter().filter(|s| s.used).map(|s| {
            (
                s.key,
                &self.cell_points[s.start as usize..(s.start + s.len) as usize],
            )
        })
    }

    /// Visit every point in the 27 cells around `q` (already in the grid frame).
    #[inline]
    fn for_each_candidate(&self, q: &Point3, mut f: impl FnMut(u32, &Point3)) {
        let c = self.cell_of(q);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = [c[0] + dx, c[1] + dy, c[2] + dz];
                    for &i in self.points_in_cell(&key) {
                        f(i, &self.points[i as usize]);
                    }
                }
            }
        }
    }
}

/// Build a hash grid over `points` with cubic cells of side `cell_size`.
pub fn build_hash_grid(points: &[Point3], cell_size: f64) -> Result<HashGrid> {
    build_in_frame(points.to_vec(), cell_size, None)
}

/// Build a hash grid suited to `spec`: cell size equal to the radius for a
/// sphere; for an ellipsoid, points are pre-scaled by the whitening transform
/// and the cell size is 1.
pub fn build_hash_grid_for(points: &[Point3], spec: &NeighborSpec) -> Result<HashGrid> {
    let moved = points.iter().map(|p| spec.to_search_frame(p)).collect();
    build_in_frame(moved, spec.search_radius(), spec.frame())
}

fn build_in_frame(points: Vec<Point3>, cell_size: f64, frame: Option<Mat3>) -> Result<HashGrid> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::invalid(format!("cell size must be positive and finite, got {}", cell_size)));
    }
    if let Some(index) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinitePoint { index });
    }
    let n = points.len();
    let capacity = (2 * n).max(2).next_power_of_two();
    let mut grid = HashGrid {
        cell_size,
        frame,
        points,
        slots: vec![EMPTY_SLOT; capacity],
        cell_points: vec![0; n],
    };

    let mut slot_of = Vec::with_capacity(n);
    for i in 0..n {
        let key = grid.cell_of(&grid.points[i]);
        let s = grid.probe(&key);
        let slot = &mut grid.slots[s];
        if !slot.used {
            *slot = Slot {
                key,
                start: 0,
                len: 0,
                used: true,
            };
        }
        slot.len += 1;
        slot_of.push(s);
    }
    let mut start = 0u32;
    for slot in grid.slots.iter_mut().filter(|s| s.used) {
        slot.start = start;
        start += slot.len;
    }
    let mut cursor: Vec<u32> = grid.slots.iter().map(|s| s.start).collect();
    for (i, &s) in slot_of.iter().enumerate() {
        grid.cell_points[cursor[s] as usize] = i as u32;
        cursor[s] += 1;
    }
    Ok(grid)
}

/// Hash-grid neighbor search. The grid must come from
/// [`build_hash_grid_for`] with the same `spec` (or, for a sphere, from
/// [`build_hash_grid`] with `cell_size == radius`); the 27-cell enumeration
/// is only exhaustive under that condition.
pub fn radius_query(grid: &HashGrid, queries: &[Point3], spec: &NeighborSpec) -> Result<CsrNeighbors> {
    if grid.frame != spec.frame() {
        return Err(Error::invalid(
            "hash grid was not built in the search frame of this neighbor spec",
        ));
    }
    if grid.cell_size != spec.search_radius() {
        return Err(Error::invalid(format!(
            "hash grid cell size {} must equal the search radius {}",
            grid.cell_size,
            spec.search_radius()
        )));
    }
    if let Some(index) = queries.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinitePoint { index });
    }
    let r2 = spec.search_radius() * spec.search_radius();
    let moved: Vec<Point3> = queries.iter().map(|q| spec.to_search_frame(q)).collect();

    let counts: Vec<usize> = moved
        .par_iter()
        .map(|q| {
            let mut count = 0;
            grid.for_each_candidate(q, |_, p| {
                let d = sub(p, q);
                if dot(&d, &d) < r2 {
                    count += 1;
                }
            });
            count
        })
        .collect();

    let offsets = exclusive_sum(&counts);
    let mut indices = vec![0u32; *offsets.last().unwrap()];

    let mut ranges: Vec<&mut [u32]> = Vec::with_capacity(moved.len());
    let mut rest = indices.as_mut_slice();
    for &c in &counts {
        let (head, tail) = rest.split_at_mut(c);
        ranges.push(head);
        rest = tail;
    }
    ranges
        .into_par_iter()
        .zip(moved.par_iter())
        .for_each(|(out, q)| {
            let mut written = 0;
            grid.for_each_candidate(q, |i, p| {
                let d = sub(p, q);
                if dot(&d, &d) < r2 {
                    out[written] = i;
                    written += 1;
                }
            });
            debug_assert_eq!(written, out.len());
        });

    Ok(CsrNeighbors { offsets, indices })
}

/// Convenience wrapper: build the grid for `spec` and query it.
pub fn neighbors(points: &[Point3], queries: &[Point3], spec: &NeighborSpec) -> Result<CsrNeighbors> {
    let grid = build_hash_grid_for(points, spec)?;
    radius_query(&grid, queries, spec)
}

/// Exhaustive O(N·Q) search evaluating the membership predicate on every
/// pair. Indices are ascending within each query.
pub fn brute_force_radius(points: &[Point3], queries: &[Point3], spec: &NeighborSpec) -> CsrNeighbors {
    let lists: Vec<Vec<u32>> = queries
        .par_iter()
        .map(|q| {
            points
                .iter()
                .enumerate()
                .filter(|(_, p)| spec.contains(q, p))
                .map(|(i, _)| i as u32)
                .collect()
        })
        .collect();
    let counts: Vec<usize> = lists.iter().map(Vec::len).collect();
    CsrNeighbors {
        offsets: exclusive_sum(&counts),
        indices: lists.into_iter().flatten().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    }

    #[test]
    fn empty_grid() {
        let g = build_hash_grid(&[], 0.5).unwrap();
        assert_eq!(g.num_cells(), 0);
        let spec = NeighborSpec::sphere(0.5).unwrap();
        let r = radius_query(&g, &[[0.0; 3], [1.0; 3]], &spec).unwrap();
        assert_eq!(r.offsets, vec![0, 0, 0]);
        assert!(r.indices.is_empty());
    }

    #[test]
    fn two_points_two_cells() {
        let g = build_hash_grid(&[[0.0; 3], [1.0; 3]], 0.5).unwrap();
        assert_eq!(g.num_cells(), 2);
        for (_, pts) in g.cells() {
            assert_eq!(pts.len(), 1);
        }
    }

    #[test]
    fn partition_and_cell_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 1000);
        let g = build_hash_grid(&pts, 0.13).unwrap();
        let mut seen = vec![0; pts.len()];
        let mut total = 0;
        for (key, ids) in g.cells() {
            total += ids.len();
            for &i in ids {
                seen[i as usize] += 1;
                let p = pts[i as usize];
                for a in 0..3 {
                    assert_eq!((p[a] / 0.13).floor() as i64, key[a]);
                }
            }
        }
        assert_eq!(total, 1000);
        assert!(seen.iter().all(|&s| s == 1));
        assert!(g.table_capacity() >= 2000);
    }

    #[test]
    fn non_finite_point_is_reported() {
        let err = build_hash_grid(&[[0.0; 3], [f64::NAN, 0.0, 0.0]], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFinitePoint { index: 1 }));
    }

    #[test]
    fn single_neighbor_example() {
        let spec = NeighborSpec::sphere(0.5).unwrap();
        let r = neighbors(&[[0.0; 3], [1.0; 3]], &[[0.0; 3]], &spec).unwrap();
        assert_eq!(r.neighbors(0), &[0]);
    }

    #[test]
    fn mismatched_cell_size_is_rejected() {
        let g = build_hash_grid(&[[0.0; 3]], 0.25).unwrap();
        let spec = NeighborSpec::sphere(0.5).unwrap();
        assert!(radius_query(&g, &[[0.0; 3]], &spec).is_err());
        let ell = NeighborSpec::axis_aligned([1.0, 2.0, 3.0]).unwrap();
        let g1 = build_hash_grid(&[[0.0; 3]], 1.0).unwrap();
        assert!(radius_query(&g1, &[[0.0; 3]], &ell).is_err());
    }

    #[test]
    fn ellipsoid_membership_example() {
        let mut cov = [[0.0; 3]; 3];
        cov[0][0] = 4.0;
        cov[1][1] = 1.0;
        cov[2][2] = 1.0;
        let spec = NeighborSpec::ellipsoid(cov).unwrap();
        assert!(spec.contains(&[0.0; 3], &[1.5, 0.0, 0.0]));
        assert!(!spec.contains(&[0.0; 3], &[0.0, 1.5, 0.0]));
        let r = neighbors(&[[1.5, 0.0, 0.0], [0.0, 1.5, 0.0]], &[[0.0; 3]], &spec).unwrap();
        assert_eq!(r.neighbors(0), &[0]);
    }

    #[test]
    fn invalid_specs() {
        assert!(NeighborSpec::sphere(0.0).is_err());
        assert!(NeighborSpec::sphere(-1.0).is_err());
        let mut asym = [[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(NeighborSpec::ellipsoid(asym).is_err());
        asym[1][0] = 0.5;
        assert!(NeighborSpec::ellipsoid(asym).is_ok());
        let indefinite = [[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(NeighborSpec::ellipsoid(indefinite).is_err());
    }

    #[test]
    fn brute_force_edge_cases() {
        let spec = NeighborSpec::sphere(1e-9).unwrap();
        let r = brute_force_radius(&[[0.3; 3]], &[[0.3; 3]], &spec);
        assert_eq!(r.neighbors(0), &[0]);
        // A zero radius is not a valid spec; the strict predicate admits nothing.
        let zero = NeighborSpec::Sphere { radius: 0.0 };
        let r = brute_force_radius(&[[0.3; 3]], &[[0.3; 3]], &zero);
        assert!(r.indices.is_empty());
    }

    #[test]
    fn matches_brute_force_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(&mut rng, 1000);
        let qs = random_points(&mut rng, 100);
        let spec = NeighborSpec::sphere(0.1).unwrap();
        let fast = neighbors(&pts, &qs, &spec).unwrap();
        fast.check_invariants().unwrap();
        assert_eq!(fast.sorted(), brute_force_radius(&pts, &qs, &spec));
    }

    #[test]
    fn boundary_points_are_excluded() {
        let spec = NeighborSpec::sphere(0.5).unwrap();
        let r = neighbors(&[[0.5, 0.0, 0.0], [0.25, 0.0, 0.0]], &[[0.0; 3]], &spec).unwrap();
        assert_eq!(r.sorted().neighbors(0), &[1]);
    }

    #[test]
    fn offsets_are_exclusive_prefix_sums() {
        assert_eq!(exclusive_sum(&[2, 0, 3]), vec![0, 2, 2, 5]);
        assert_eq!(exclusive_sum(&[]), vec![0]);
    }
}
