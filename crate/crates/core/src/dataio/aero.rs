//! Pressure normalization, drag integration and frontal area.

use serde::{Deserialize, Serialize};

use super::mesh::Mesh;
use crate::error::{Error, Result};
use crate::spatial::Point3;

/// Mean and population standard deviation of raw pressures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureStats {
    pub mean: f64,
    pub std: f64,
}

impl PressureStats {
    pub fn from_values(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("pressure statistics of an empty set"));
        }
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12) {
            return Err(Error::invalid(format!(
                "pressure standard deviation {} is too small to normalize",
                std
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, p: f64) -> f64 {
        (p - self.mean) / self.std
    }

    pub fn denormalize(&self, p: f64) -> f64 {
        p * self.std + self.mean
    }
}

/// `(p − mean) / std`. Statistics are computed from `raw` unless given.
pub fn normalize_pressure(raw: &[f64], stats: Option<PressureStats>) -> Result<(Vec<f64>, PressureStats)> {
    let stats = match stats {
        Some(s) => s,
        None => PressureStats::from_values(raw)?,
    };
    Ok((raw.iter().map(|&p| stats.normalize(p)).collect(), stats))
}

/// Free-stream reference for the drag coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    /// Unit flow direction `û`.
    pub direction: Point3,
    /// Dynamic pressure `q = ½ρV²`.
    pub dynamic_pressure: f64,
    /// Reference (frontal) area.
    pub area: f64,
}

/// `c_d = Σ p_i A_i (−n_i·û) / (q A)`.
pub fn integrate_drag(pressures: &[f64], normals: &[Point3], areas: &[f64], flow: &Flow) -> Result<f64> {
    if pressures.len() != normals.len() || pressures.len() != areas.len() {
        return Err(Error::shape(format!(
            "{} pressures, {} normals and {} areas",
            pressures.len(),
            normals.len(),
            areas.len()
        )));
    }
    let u = flow.direction;
    let ulen = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if (ulen - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("flow direction must be a unit vector"));
    }
    if !(flow.dynamic_pressure > 0.0) || !(flow.area > 0.0) {
        return Err(Error::invalid("dynamic pressure and reference area must be positive"));
    }
    let force: f64 = pressures
        .iter()
        .zip(normals)
        .zip(areas)
        .map(|((&p, n), &a)| -p * a * (n[0] * u[0] + n[1] * u[1] + n[2] * u[2]))
        .sum();
    Ok(force / (flow.dynamic_pressure * flow.area))
}

/// Pixels per side used by [`frontal_area`].
pub const FRONTAL_RASTER: usize = 256;

/// Area of the mesh silhouette on the plane orthogonal to `direction`,
/// counted on a `FRONTAL_RASTER²` grid of pixel centers spanning the
/// silhouette's bounding rectangle.
pub fn frontal_area(mesh: &Mesh, direction: Point3) -> f64 {
    // Orthonormal basis (e1, e2) of the projection plane.
    let d = direction;
    let helper = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let mut e1 = [
        helper[1] * d[2] - helper[2] * d[1],
        helper[2] * d[0] - helper[0] * d[2],
        helper[0] * d[1] - helper[1] * d[0],
    ];
    let l = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    e1 = [e1[0] / l, e1[1] / l, e1[2] / l];
    let e2 = [
        d[1] * e1[2] - d[2] * e1[1],
        d[2] * e1[0] - d[0] * e1[2],
        d[0] * e1[1] - d[1] * e1[0],
    ];
    let proj: Vec<[f64; 2]> = mesh
        .vertices
        .iter()
        .map(|v| {
            [
                v[0] * e1[0] + v[1] * e1[1] + v[2] * e1[2],
                v[0] * e2[0] + v[1] * e2[1] + v[2] * e2[2],
            ]
        })
        .collect();
    if proj.is_empty() || mesh.faces.is_empty() {
        return 0.0;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &proj {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let n = FRONTAL_RASTER;
    let step = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
    if !(step[0] > 0.0 && step[1] > 0.0) {
        return 0.0;
    }
    let mut covered = vec![false; n * n];
    for t in mesh.triangles() {
        let [a, b, c] = [proj[t[0]], proj[t[1]], proj[t[2]]];
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area2 == 0.0 {
            continue;
        }
        let pix = |v: f64, axis: usize| ((v - lo[axis]) / step[axis] - 0.5).max(0.0);
        let (x0, x1) = (
            pix(a[0].min(b[0]).min(c[0]), 0).floor() as usize,
            (pix(a[0].max(b[0]).max(c[0]), 0).ceil() as usize).min(n - 1),
        );
        let (y0, y1) = (
            pix(a[1].min(b[1]).min(c[1]), 1).floor() as usize,
            (pix(a[1].max(b[1]).max(c[1]), 1).ceil() as usize).min(n - 1),
        );
        for iy in y0..=y1 {
            let py = lo[1] + (iy as f64 + 0.5) * step[1];
            for ix in x0..=x1 {
                let px = lo[0] + (ix as f64 + 0.5) * step[0];
                let edge = |p: [f64; 2], q: [f64; 2]| (q[0] - p[0]) * (py - p[1]) - (q[1] - p[1]) * (px - p[0]);
                let (w0, w1, w2) = (edge(a, b), edge(b, c), edge(c, a));
                let inside = if area2 > 0.0 {
                    w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
                } else {
                    w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
                };
                if inside {
                    covered[iy * n + ix] = true;
                }
            }
        }
    }
    covered.iter().filter(|&&c| c).count() as f64 * step[0] * step[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::mesh::{faces_to_centroids, unit_cube};

    #[test]
    fn normalize_small_example() {
        let (z, s) = normalize_pressure(&[1.0, 2.0, 3.0], None).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let e = 1.224_744_871_391_589;
        assert!((z[0] + e).abs() < 1e-12 && z[1] == 0.0 && (z[2] - e).abs() < 1e-12);
        let (again, _) = normalize_pressure(&z, None).unwrap();
        for (a, b) in z.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize_pressure(&[5.0, 5.0, 5.0], None).is_err());
        let given = PressureStats { mean: 1.0, std: 2.0 };
        assert_eq!(normalize_pressure(&[5.0, 5.0], Some(given)).unwrap().0, vec![2.0, 2.0]);
    }

    fn cube_flow(q: f64) -> Flow {
        Flow {
            direction: [1.0, 0.0, 0.0],
            dynamic_pressure: q,
            area: 1.0,
        }
    }

    #[test]
    fn uniform_pressure_on_closed_surface_has_no_drag() {
        let d = faces_to_centroids(&unit_cube()).unwrap();
        let p = vec![3.7; d.areas.len()];
        let cd = integrate_drag(&p, &d.normals, &d.areas, &cube_flow(1.0)).unwrap();
        assert!(cd.abs() < 1e-12);
    }

    #[test]
    fn single_windward_face() {
        let d = faces_to_centroids(&unit_cube()).unwrap();
        let p: Vec<f64> = d.normals.iter().map(|n| if n[0] < -0.5 { 1.0 } else { 0.0 }).collect();
        let cd = integrate_drag(&p, &d.normals, &d.areas, &cube_flow(1.0)).unwrap();
        assert!((cd - 1.0).abs() < 1e-15);
        let half = integrate_drag(&p, &d.normals, &d.areas, &cube_flow(2.0)).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bad_flow_is_rejected() {
        let mut f = cube_flow(1.0);
        f.direction = [2.0, 0.0, 0.0];
        assert!(integrate_drag(&[], &[], &[], &f).is_err());
        assert!(integrate_drag(&[1.0], &[], &[], &cube_flow(1.0)).is_err());
    }

    #[test]
    fn cube_frontal_area() {
        let a = frontal_area(&unit_cube(), [1.0, 0.0, 0.0]);
        assert!((a - 1.0).abs() < 1e-12, "{}", a);
        let a = frontal_area(&unit_cube(), [0.0, 0.0, 1.0]);
        assert!((a - 1.0).abs() < 1e-12);
    }
}
