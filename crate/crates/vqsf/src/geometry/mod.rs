//! Procedural shapes, surface/occupancy sampling, virtual scanning,
//! voxelization, and marching cubes: everything between geometry and
//! tensors.
//!
//! All geometry lives in the open unit cube `[0,1)^3` with a 5% margin;
//! grid cells are `cell = floor(x * R)` per axis, raveled row-major as
//! `c = x*R^2 + y*R + z`.

mod dataset;
mod io;
mod marching;
mod mesh;
mod sample;
mod scan;
mod shape;
mod voxel;

pub use dataset::{DatasetPlan, Manifest, SampleRecord, Split};
pub use io::{read_obj, read_xyz, write_obj, write_xyz};
pub use marching::{marching_cubes, ScalarField};
pub use mesh::Mesh;
pub use sample::{
    fibonacci_viewpoints, sample_occupancy_targets, sample_surface, OccupancyTargets, SurfaceSampler,
};
pub use scan::{virtual_scan, VirtualScanner};
pub use shape::{make_shape, ImplicitShape, ShapeKind, ShapeRecipe};
pub use voxel::{occupied_cell_count, ravel, unravel, voxelize};

use crate::{Error, Result};

/// Lower edge of the shape placement region: shapes keep a 5% margin to
/// the unit cube faces.
pub const CUBE_MARGIN: f64 = 0.05;

/// An observation or sampling of a surface: N points in `[0,1)^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        for p in &points {
            if p.iter().any(|&x| !(0.0..1.0).contains(&x)) {
                return Err(Error::InvalidArgument(format!(
                    "point {p:?} outside the unit cube [0,1)^3"
                )));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Keeps at most `n` points, chosen by seeded Fisher-Yates prefix.
    pub fn subsample(&self, n: usize, rng: &mut rand_pcg::Pcg64) -> PointCloud {
        use rand::RngExt;
        if n >= self.points.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        for i in 0..n {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        PointCloud {
            points: idx[..n].iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        let mut s = 0.0;
        for a in 0..3 {
            s += (hi[a] - lo[a]) * (hi[a] - lo[a]);
        }
        s.sqrt()
    }
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = norm(&v);
    [v[0] / n, v[1] / n, v[2] / n]
}

pub(crate) fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
