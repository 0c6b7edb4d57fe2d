//! Polygon meshes and the `v`/`f` subset of Wavefront OBJ.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::spatial::Point3;

/// Polygon surface mesh. Faces hold 0-based vertex indices in winding order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<Vec<usize>>,
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl Mesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<Vec<usize>>) -> Result<Self> {
        for (f, face) in faces.iter().enumerate() {
            if face.len() < 3 {
                return Err(Error::invalid(format!("face {} has fewer than 3 vertices", f)));
            }
            if let Some(&i) = face.iter().find(|&&i| i >= vertices.len()) {
                return Err(Error::invalid(format!(
                    "face {} references vertex {} of {}",
                    f,
                    i,
                    vertices.len()
                )));
            }
        }
        Ok(Self { vertices, faces })
    }

    /// Fan triangulation `(v0, v_i, v_{i+1})` of every face.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        self.faces
            .iter()
            .flat_map(|f| (1..f.len() - 1).map(move |i| [f[0], f[i], f[i + 1]]))
            .collect()
    }

    /// Same surface with every face split into its fan triangles.
    pub fn triangulated(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.triangles().into_iter().map(|t| t.to_vec()).collect(),
        }
    }

    /// Twice the vector area of a face: the sum of its fan cross products.
    pub fn face_area_vector(&self, f: usize) -> Point3 {
        let face = &self.faces[f];
        let v0 = self.vertices[face[0]];
        let mut acc = [0.0; 3];
        for i in 1..face.len() - 1 {
            let c = cross(
                &sub(&self.vertices[face[i]], &v0),
                &sub(&self.vertices[face[i + 1]], &v0),
            );
            for a in 0..3 {
                acc[a] += c[a];
            }
        }
        acc
    }
}

/// Per-face centroid, unit normal and area.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaceData {
    pub points: Vec<Point3>,
    pub normals: Vec<Point3>,
    pub areas: Vec<f64>,
}

/// Centroid (vertex mean), unit normal and area of every face; quads and
/// larger polygons sum their fan triangles.
pub fn faces_to_centroids(mesh: &Mesh) -> Result<FaceData> {
    let n = mesh.faces.len();
    let mut out = FaceData {
        points: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        areas: Vec::with_capacity(n),
    };
    for (f, face) in mesh.faces.iter().enumerate() {
        let av = mesh.face_area_vector(f);
        let len = norm(&av);
        if !(len > 0.0) {
            return Err(Error::DegenerateFace(f));
        }
        let mut c = [0.0; 3];
        for &i in face {
            for a in 0..3 {
                c[a] += mesh.vertices[i][a];
            }
        }
        let k = face.len() as f64;
        out.points.push([c[0] / k, c[1] / k, c[2] / k]);
        out.normals.push([av[0] / len, av[1] / len, av[2] / len]);
        out.areas.push(0.5 * len);
    }
    Ok(out)
}

fn parse_index(tok: &str, nv: usize, line: usize) -> Result<usize> {
    let head = tok.split('/').next().unwrap_or("");
    let raw: i64 = head.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad vertex reference `{}`", tok),
    })?;
    let idx = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        nv as i64 + raw
    } else {
        -1
    };
    if idx < 0 || idx as usize >= nv {
        return Err(Error::Parse {
            line,
            message: format!("vertex index {} out of range (have {} vertices)", raw, nv),
        });
    }
    Ok(idx as usize)
}

/// Parse `v` and `f` records; everything else is skipped. Faces with more
/// than three vertices are fan-triangulated, and indices may be negative
/// (relative to the vertices read so far).
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut toks = content.split_whitespace();
        match toks.next() {
            Some("v") => {
                let coords: Vec<f64> = toks
                    .take(3)
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| Error::Parse {
                            line,
                            message: format!("bad coordinate `{}`", t),
                        })
                    })
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(Error::Parse {
                        line,
                        message: "vertex needs three coordinates".into(),
                    });
                }
                if coords.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Parse {
                        line,
                        message: "non-finite coordinate".into(),
                    });
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = toks
                    .map(|t| parse_index(t, vertices.len(), line))
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::Parse {
                        line,
                        message: "face needs at least three vertices".into(),
                    });
                }
                for k in 1..idx.len() - 1 {
                    faces.push(vec![idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}

/// Serialize to OBJ. Coordinates use the shortest representation that
/// parses back to the same `f64`.
pub fn write_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        s.push('f');
        for &i in f {
            let _ = write!(s, " {}", i + 1);
        }
        s.push('\n');
    }
    s
}

/// Axis-aligned unit cube `[0,1]³` as 12 outward-facing triangles.
pub fn unit_cube() -> Mesh {
    let vertices = (0..8)
        .map(|i| [(i & 1) as f64, (i >> 1 & 1) as f64, (i >> 2 & 1) as f64])
        .collect();
    let quads = [
        [0, 2, 3, 1], // z = 0
        [4, 5, 7, 6], // z = 1
        [0, 1, 5, 4], // y = 0
        [2, 6, 7, 3], // y = 1
        [0, 4, 6, 2], // x = 0
        [1, 3, 7, 5], // x = 1
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [vec![q[0], q[1], q[2]], vec![q[0], q[2], q[3]]])
        .collect();
    Mesh { vertices, faces }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_triangle() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3").unwrap();
        assert_eq!(m.faces.len(), 1);
        let d = faces_to_centroids(&m).unwrap();
        assert_eq!(d.normals[0], [0.0, 0.0, 1.0]);
        assert_eq!(d.areas[0], 0.5);
        let c = d.points[0];
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-15 && (c[1] - 1.0 / 3.0).abs() < 1e-15 && c[2] == 0.0);
    }

    #[test]
    fn vertices_only_and_comments() {
        let m = parse_obj("# header\nv 0 0 0\nv 1 2 3 # trailing\nvn 0 0 1\n").unwrap();
        assert_eq!(m.vertices.len(), 2);
        assert!(m.faces.is_empty());
    }

    #[test]
    fn quad_fans_into_two_triangles() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(m.faces, vec![vec![0, 1, 2], vec![0, 2, 3]]);
        let slashed = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1/1/1 2//2 -1\n").unwrap();
        assert_eq!(slashed.faces, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nf 1 2 5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{}", err);
        let err = parse_obj("v 0 zero 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_obj("v 0 0 0\nf 1 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn polygon_area_sums_fan() {
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            vec![vec![0, 1, 2, 3]],
        )
        .unwrap();
        let d = faces_to_centroids(&m).unwrap();
        assert_eq!(d.areas, vec![2.0]);
        assert_eq!(d.points[0], [1.0, 0.5, 0.0]);
    }

    #[test]
    fn cube_area_and_closure() {
        let d = faces_to_centroids(&unit_cube()).unwrap();
        assert!((d.areas.iter().sum::<f64>() - 6.0).abs() < 1e-12);
        for a in 0..3 {
            let s: f64 = d.normals.iter().zip(&d.areas).map(|(n, ar)| n[a] * ar).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn reversed_winding_negates_normal() {
        let a = faces_to_centroids(&parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3").unwrap()).unwrap();
        let b = faces_to_centroids(&parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 3 2").unwrap()).unwrap();
        for k in 0..3 {
            assert_eq!(a.normals[0][k], -b.normals[0][k]);
        }
    }

    #[test]
    fn degenerate_face_is_reported() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 4\nf 1 2 3\n").unwrap();
        assert!(matches!(faces_to_centroids(&m), Err(Error::DegenerateFace(1))));
    }

    #[test]
    fn write_parse_round_trip_is_bitwise() {
        let m = Mesh::new(
            vec![[0.1, -1e-300, 1.0 / 3.0], [std::f64::consts::PI, 2.5e10, -0.0], [7.0, 8.0, 9.000000000000002]],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let back = parse_obj(&write_obj(&m)).unwrap();
        for (a, b) in m.vertices.iter().zip(&back.vertices) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        assert_eq!(back.faces, m.faces);
    }
}
