//! Indexed triangle meshes.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_pcg::Pcg64;

use super::{cross, PointCloud};
use crate::Result;

#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Counts of unique undirected edges and their triangle incidences.
    fn edge_incidence(&self) -> BTreeMap<(u32, u32), usize> {
        let mut edges = BTreeMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (a.min(b), a.max(b));
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        edges
    }

    /// V - E + F over the whole mesh (2 per sphere-like component, 0 for a
    /// torus).
    pub fn euler_characteristic(&self) -> i64 {
        let e = self.edge_incidence().len() as i64;
        self.vertices.len() as i64 - e + self.triangles.len() as i64
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_incidence().values().all(|&c| c == 2)
    }

    /// Signed volume via the divergence theorem; positive for outward
    /// orientation.
    pub fn signed_volume(&self) -> f64 {
        let mut v = 0.0;
        for t in &self.triangles {
            let a = self.vertices[t[0] as usize];
            let b = self.vertices[t[1] as usize];
            let c = self.vertices[t[2] as usize];
            v += (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                + a[2] * (b[0] * c[1] - b[1] * c[0]))
                / 6.0;
        }
        v
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let a = self.vertices[t[0] as usize];
        let b = self.vertices[t[1] as usize];
        let c = self.vertices[t[2] as usize];
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        super::norm(&cross(&ab, &ac)) / 2.0
    }

    /// Area-weighted uniform surface samples; the bridge from reconstructed
    /// meshes to point-cloud metrics.
    pub fn sample_points(&self, n: usize, rng: &mut Pcg64) -> Result<PointCloud> {
        if self.is_empty() {
            return Err(crate::Error::EmptyCloud);
        }
        let cumulative: Vec<f64> = self
            .triangles
            .iter()
            .scan(0.0, |acc, t| {
                *acc += self.triangle_area(t);
                Some(*acc)
            })
            .collect();
        let total = *cumulative.last().unwrap();
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random_range(0.0..total);
            let ti = cumulative.partition_point(|&c| c < u).min(self.triangles.len() - 1);
            let t = &self.triangles[ti];
            let a = self.vertices[t[0] as usize];
            let b = self.vertices[t[1] as usize];
            let c = self.vertices[t[2] as usize];
            let (mut r1, r2) = (rng.random_range(0.0..1.0f64), rng.random_range(0.0..1.0f64));
            r1 = r1.sqrt();
            let (w0, w1, w2) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            points.push([
                (w0 * a[0] + w1 * b[0] + w2 * c[0]).clamp(0.0, 1.0 - 1e-9),
                (w0 * a[1] + w1 * b[1] + w2 * c[1]).clamp(0.0, 1.0 - 1e-9),
                (w0 * a[2] + w1 * b[2] + w2 * c[2]).clamp(0.0, 1.0 - 1e-9),
            ]);
        }
        PointCloud::new(points)
    }
}
