//! Virtual scanning: per-sample depth tests against sdf ray-marching decide
//! which surface samples a camera at a given viewpoint can see.
//!
//! The camera is orthographic: rays enter parallel to the view axis from a
//! plane 2.0 units toward the viewpoint, so each scan of a convex shape
//! covers exactly the open half-surface facing the camera. Each candidate
//! surface point gets its own ray; the point is kept when the first hit
//! along that ray is the point itself (within `DEPTH_TOL`). This is a
//! depth buffer evaluated at sample resolution rather than on a fixed
//! pixel grid, so silhouettes are resolved at the sampling density.

use rand_pcg::Pcg64;
use rayon::prelude::*;

use super::{normalize, ImplicitShape, PointCloud, SurfaceSampler};
use crate::rng::{indexed_rng, Stream};
use crate::{Error, Result};

/// A sample is visible when the ray hit matches its own depth within this.
const DEPTH_TOL: f64 = 1e-3;
/// Distance of the orthographic camera plane from the cube center.
const CAM_DIST: f64 = 2.0;
/// Dense surface sampling from which visible points are selected.
const DENSE_SAMPLES: usize = 20_000;

/// Sphere-traces one ray; returns the first hit distance. Composite sdfs
/// are not exact everywhere, so steps are damped and a sign change triggers
/// a bisection refine.
fn march(shape: &ImplicitShape, eye: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    let t_max = 4.0;
    let mut t: f64 = 0.0;
    let mut t_prev = t;
    for _ in 0..2048 {
        if t > t_max {
            return None;
        }
        let p = [eye[0] + t * dir[0], eye[1] + t * dir[1], eye[2] + t * dir[2]];
        let d = shape.sdf(p);
        if d < 0.0 {
            // Overshot: bisect between the last outside point and here.
            let (mut lo, mut hi) = (t_prev, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let pm = [eye[0] + mid * dir[0], eye[1] + mid * dir[1], eye[2] + mid * dir[2]];
                if shape.sdf(pm) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        if d < 1e-7 {
            return Some(t);
        }
        t_prev = t;
        t += (d * 0.9).max(1e-4);
    }
    None
}

/// A reusable scanner for one shape; the dense surface sampling amortizes
/// across many viewpoints.
pub struct VirtualScanner<'a> {
    shape: &'a ImplicitShape,
    dense: PointCloud,
}

impl<'a> VirtualScanner<'a> {
    pub fn new(shape: &'a ImplicitShape, seed: u64) -> Result<Self> {
        let sampler = SurfaceSampler::new(shape)?;
        let mut rng = indexed_rng(seed, Stream::Data, 0x7c);
        let dense = sampler.sample(DENSE_SAMPLES, &mut rng)?;
        Ok(VirtualScanner { shape, dense })
    }

    pub fn with_dense(shape: &'a ImplicitShape, dense: PointCloud) -> Self {
        VirtualScanner { shape, dense }
    }

    /// Scans from a unit-vector viewpoint (camera at 2.0 from the cube
    /// center looking at the center), keeping at most `n` visible surface
    /// samples.
    pub fn scan(&self, viewpoint: [f64; 3], n: usize, rng: &mut Pcg64) -> Result<PointCloud> {
        let dir = normalize([-viewpoint[0], -viewpoint[1], -viewpoint[2]]);
        let visible: Vec<[f64; 3]> = self
            .dense
            .points()
            .par_iter()
            .filter_map(|&p| {
                // Ray origin on the camera plane, safely outside the shape.
                let origin = [
                    p[0] + CAM_DIST * viewpoint[0],
                    p[1] + CAM_DIST * viewpoint[1],
                    p[2] + CAM_DIST * viewpoint[2],
                ];
                let hit = march(self.shape, origin, dir)?;
                ((hit - CAM_DIST).abs() < DEPTH_TOL).then_some(p)
            })
            .collect();
        if visible.is_empty() {
            return Err(Error::EmptyScan { viewpoint });
        }
        let cloud = PointCloud::new(visible)?;
        Ok(cloud.subsample(n, rng))
    }
}

/// One-shot scan; builds a throwaway scanner.
pub fn virtual_scan(shape: &ImplicitShape, viewpoint: [f64; 3], n: usize, seed: u64) -> Result<PointCloud> {
    let scanner = VirtualScanner::new(shape, seed)?;
    let mut rng = indexed_rng(seed, Stream::Data, 0x7d);
    scanner.scan(viewpoint, n, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dot, ImplicitShape};

    #[test]
    fn sphere_scan_covers_front_hemisphere_only() {
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.3).unwrap();
        let view = normalize([0.3, -0.5, 0.8]);
        let scan = virtual_scan(&s, view, 2000, 21).unwrap();
        let front = scan
            .points()
            .iter()
            .filter(|p| dot(&s.normal(**p), &view) > 0.0)
            .count();
        let frac = front as f64 / scan.len() as f64;
        assert!(frac > 0.99, "front fraction {frac}");
    }

    #[test]
    fn scan_points_stay_on_surface() {
        let t = ImplicitShape::torus([0.5, 0.5, 0.5], 0.22, 0.07).unwrap();
        let scan = virtual_scan(&t, [0.0, 0.0, 1.0], 1000, 4).unwrap();
        let worst = scan
            .points()
            .iter()
            .map(|&p| t.sdf(p).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-3, "max |sdf| {worst}");
    }

    #[test]
    fn table_from_above_hides_leg_bottoms() {
        let t = ImplicitShape::table([0.5, 0.5, 0.5], [0.25, 0.25, 0.25], 0.04, 0.04, 0.0).unwrap();
        let scan = virtual_scan(&t, [0.0, 0.0, 1.0], 4000, 13).unwrap();
        let leg_bottom = 0.5 - 0.25;
        let min_z = scan.points().iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        assert!(
            min_z > leg_bottom + 0.05,
            "min z {min_z}, leg bottom {leg_bottom}"
        );
    }

    #[test]
    fn antipodal_sphere_scans_cover_everything() {
        // Union of opposite scans sees the whole sphere: every dense surface
        // point has a nearby scan point.
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.3).unwrap();
        let a = virtual_scan(&s, [1.0, 0.0, 0.0], 10_000, 8).unwrap();
        let b = virtual_scan(&s, [-1.0, 0.0, 0.0], 10_000, 9).unwrap();
        let mut both = a.points().to_vec();
        both.extend_from_slice(b.points());
        let union = PointCloud::new(both).unwrap();
        let reference = crate::geometry::sample_surface(&s, 20_000, 3).unwrap();
        let f = crate::metrics::fscore(&union, &reference, None).unwrap();
        assert!(f > 0.99, "f-score {f}");
    }
}
