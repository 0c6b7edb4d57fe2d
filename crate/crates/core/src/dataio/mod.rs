//! Surface meshes, pressure labels and the synthetic dataset.

pub mod aero;
pub mod dataset;
pub mod mesh;
pub mod synthetic;

pub use aero::{frontal_area, integrate_drag, normalize_pressure, Flow, PressureStats};
pub use dataset::{read_dataset, write_dataset, Dataset};
pub use mesh::{faces_to_centroids, parse_obj, write_obj, FaceData, Mesh};
pub use synthetic::{gen_synthetic, BodyParams, ShapeRanges, SynthConfig, SyntheticSet};

use crate::spatial::Point3;

/// One body's surface points with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSample {
    /// Face centroids (m).
    pub points: Vec<Point3>,
    /// Unit outward normals.
    pub normals: Vec<Point3>,
    /// Face areas (m²).
    pub areas: Vec<f64>,
    /// Normalized pressure labels.
    pub pressure: Vec<f64>,
    /// Raw pressures (Pa).
    pub raw_pressure: Vec<f64>,
    /// Drag coefficient label.
    pub drag: f64,
    /// Inlet velocity (m/s), when it varies across the dataset.
    pub velocity: Option<f64>,
    pub flow: Flow,
    /// Statistics used to produce `pressure`.
    pub stats: Option<PressureStats>,
}

impl SurfaceSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
