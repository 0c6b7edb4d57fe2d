//! On-disk dataset layout.
//!
//! ```text
//! <root>/stats.txt
//! <root>/sample_0000/mesh.obj
//! <root>/sample_0000/labels.txt   raw pressure per face, then `cd <value>`
//! ```
//!
//! `stats.txt` holds `key value...` lines: `count`, `mean`, `std`,
//! `dynamic_pressure`, `flow_direction` and `frontal_area` (the area
//! convention, always `raster <pixels>`). Floats are written in their
//! shortest round-trip form so files re-read bitwise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::aero::{frontal_area, normalize_pressure, Flow, PressureStats, FRONTAL_RASTER};
use super::mesh::{faces_to_centroids, parse_obj, write_obj, Mesh};
use super::synthetic::SyntheticSet;
use super::SurfaceSample;
use crate::error::{Error, Result};
use crate::spatial::Point3;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SurfaceSample>,
    pub stats: PressureStats,
}

pub fn sample_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("sample_{:04}", i))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn stats_text(stats: &PressureStats, dynamic_pressure: f64, direction: Point3, count: usize) -> String {
    format!(
        "count {}\nmean {}\nstd {}\ndynamic_pressure {}\nflow_direction {} {} {}\nfrontal_area raster {}\n",
        count, stats.mean, stats.std, dynamic_pressure, direction[0], direction[1], direction[2], FRONTAL_RASTER
    )
}

pub fn labels_text(sample: &SurfaceSample) -> String {
    let mut s = String::new();
    for p in &sample.raw_pressure {
        let _ = writeln!(s, "{}", p);
    }
    if let Some(v) = sample.velocity {
        let _ = writeln!(s, "velocity {}", v);
    }
    let _ = writeln!(s, "cd {}", sample.drag);
    s
}

/// Write every sample directory and `stats.txt` under `root`.
pub fn write_dataset(root: &Path, set: &SyntheticSet) -> Result<()> {
    let first = set
        .samples
        .first()
        .ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, (mesh, sample)) in set.meshes.iter().zip(&set.samples).enumerate() {
        let dir = sample_dir(root, i);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join("mesh.obj"), &write_obj(mesh))?;
        write_file(&dir.join("labels.txt"), &labels_text(sample))?;
    }
    let text = stats_text(&set.stats, first.flow.dynamic_pressure, first.flow.direction, set.samples.len());
    write_file(&root.join("stats.txt"), &text)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatsFile {
    pub count: usize,
    pub stats: PressureStats,
    pub dynamic_pressure: f64,
    pub direction: Point3,
}

pub fn parse_stats(text: &str) -> Result<StatsFile> {
    let mut count = None;
    let mut mean = None;
    let mut std = None;
    let mut q = None;
    let mut dir = None;
    for (i, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        let Some((&key, vals)) = toks.split_first() else {
            continue;
        };
        let num = |k: usize| -> Result<f64> {
            vals.get(k)
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| bad(&format!("`{}` needs a number", key)))
        };
        match key {
            "count" => count = Some(num(0)? as usize),
            "mean" => mean = Some(num(0)?),
            "std" => std = Some(num(0)?),
            "dynamic_pressure" => q = Some(num(0)?),
            "flow_direction" => dir = Some([num(0)?, num(1)?, num(2)?]),
            "frontal_area" => {
                if vals.first() != Some(&"raster") || num(1)? as usize != FRONTAL_RASTER {
                    return Err(bad("unsupported frontal area convention"));
                }
            }
            _ => return Err(bad(&format!("unknown key `{}`", key))),
        }
    }
    let need = |v: Option<f64>, k: &str| v.ok_or_else(|| Error::invalid(format!("stats file lacks `{}`", k)));
    Ok(StatsFile {
        count: count.ok_or_else(|| Error::invalid("stats file lacks `count`"))?,
        stats: PressureStats {
            mean: need(mean, "mean")?,
            std: need(std, "std")?,
        },
        dynamic_pressure: need(q, "dynamic_pressure")?,
        direction: dir.ok_or_else(|| Error::invalid("stats file lacks `flow_direction`"))?,
    })
}

/// Raw pressures, optional velocity and drag from a labels file.
pub fn parse_labels(text: &str) -> Result<(Vec<f64>, Option<f64>, f64)> {
    let mut pressures = Vec::new();
    let mut velocity = None;
    let mut drag = None;
    for (i, line) in text.lines().enumerate() {
        let bad = || Error::Parse {
            line: i + 1,
            message: format!("bad label line `{}`", line),
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if drag.is_some() && !toks.is_empty() {
            return Err(bad());
        }
        match toks.as_slice() {
            [] => {}
            ["cd", v] => drag = Some(v.parse::<f64>().map_err(|_| bad())?),
            ["velocity", v] => velocity = Some(v.parse::<f64>().map_err(|_| bad())?),
            [v] => pressures.push(v.parse::<f64>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let drag = drag.ok_or_else(|| Error::invalid("labels file has no `cd` line"))?;
    Ok((pressures, velocity, drag))
}

/// Read one sample directory, normalizing with `stats`.
pub fn read_sample(dir: &Path, file: &StatsFile) -> Result<(Mesh, SurfaceSample)> {
    let mesh = parse_obj(&read_file(&dir.join("mesh.obj"))?)?;
    let (raw, velocity, drag) = parse_labels(&read_file(&dir.join("labels.txt"))?)?;
    let faces = faces_to_centroids(&mesh)?;
    if raw.len() != faces.points.len() {
        return Err(Error::shape(format!(
            "{}: {} pressure labels for {} faces",
            dir.display(),
            raw.len(),
            faces.points.len()
        )));
    }
    let flow = Flow {
        direction: file.direction,
        dynamic_pressure: file.dynamic_pressure,
        area: frontal_area(&mesh, file.direction),
    };
    let pressure = normalize_pressure(&raw, Some(file.stats))?.0;
    let sample = SurfaceSample {
        points: faces.points,
        normals: faces.normals,
        areas: faces.areas,
        pressure,
        raw_pressure: raw,
        drag,
        velocity,
        flow,
        stats: Some(file.stats),
    };
    Ok((mesh, sample))
}

/// Read a dataset written by [`write_dataset`]. `stats` overrides the
/// file's own statistics, for applying training statistics to a held-out set.
pub fn read_dataset(root: &Path, stats: Option<PressureStats>) -> Result<Dataset> {
    let stats_path = root.join("stats.txt");
    if !root.is_dir() {
        return Err(Error::invalid(format!("dataset directory {} does not exist", root.display())));
    }
    let mut file = parse_stats(&read_file(&stats_path)?)?;
    if let Some(s) = stats {
        file.stats = s;
    }
    let samples = (0..file.count)
        .map(|i| read_sample(&sample_dir(root, i), &file).map(|(_, s)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        stats: file.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic::{gen_synthetic, SynthConfig};

    #[test]
    fn write_read_round_trip() {
        let cfg = SynthConfig {
            count: 3,
            seed: 11,
            edge_length: 0.15,
            ..SynthConfig::default()
        };
        let set = gen_synthetic(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &set).unwrap();
        let back = read_dataset(dir.path(), None).unwrap();
        assert_eq!(back.stats, set.stats);
        assert_eq!(back.samples.len(), 3);
        for (a, b) in back.samples.iter().zip(&set.samples) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn labels_parse() {
        let (p, v, cd) = parse_labels("1.5\n-2\nvelocity 20\ncd 0.25\n").unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(v, Some(20.0));
        assert_eq!(cd, 0.25);
        assert!(parse_labels("1\n2\n").is_err());
        assert!(parse_labels("1\ncd 0.1\n2\n").is_err());
        assert!(matches!(parse_labels("x\ncd 1\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_directory_is_named() {
        let err = read_dataset(Path::new("/nonexistent/data"), None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/data"));
    }
}
