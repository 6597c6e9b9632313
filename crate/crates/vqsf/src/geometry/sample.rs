//! Surface and occupancy-target sampling.

use rand::RngExt;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;
use rayon::prelude::*;

use super::{ImplicitShape, PointCloud};
use crate::rng::{indexed_rng, Stream};
use crate::{Error, Result};

/// Resolution of the fine surface-crossing grid.
const SCAN_GRID: usize = 96;
/// Surface tolerance for emitted samples.
const SURFACE_TOL: f64 = 1e-5;

/// Amortized surface sampler: triangulates the sdf zero level over a fine
/// grid of surface-crossing cells once, then draws area-weighted points on
/// that triangulation refined back onto the exact surface.
pub struct SurfaceSampler<'a> {
    shape: &'a ImplicitShape,
    proxy: super::Mesh,
    cumulative_area: Vec<f64>,
}

impl<'a> SurfaceSampler<'a> {
    pub fn new(shape: &'a ImplicitShape) -> Result<Self> {
        let g = SCAN_GRID;
        let values: Vec<f64> = (0..g * g * g)
            .into_par_iter()
            .map(|i| {
                let x = i / (g * g);
                let y = (i / g) % g;
                let z = i % g;
                -shape.sdf([
                    (x as f64 + 0.5) / g as f64,
                    (y as f64 + 0.5) / g as f64,
                    (z as f64 + 0.5) / g as f64,
                ])
            })
            .collect();
        let proxy = super::marching_cubes(&super::ScalarField::new(g, values), 0.0);
        if proxy.is_empty() {
            return Err(Error::InvalidArgument("shape has an empty surface".into()));
        }
        let mut cumulative_area = Vec::with_capacity(proxy.triangles.len());
        let mut acc = 0.0;
        for t in &proxy.triangles {
            let a = proxy.vertices[t[0] as usize];
            let b = proxy.vertices[t[1] as usize];
            let c = proxy.vertices[t[2] as usize];
            let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            acc += super::norm(&super::cross(&ab, &ac)) / 2.0;
            cumulative_area.push(acc);
        }
        Ok(SurfaceSampler {
            shape,
            proxy,
            cumulative_area,
        })
    }

    pub fn shape(&self) -> &ImplicitShape {
        self.shape
    }

    /// Draws one surface point: an area-uniform point on the fine
    /// triangulation, refined onto the exact surface along the triangle's
    /// own normal. Refining along a fixed direction (rather than the sdf
    /// gradient) keeps the correction measure-preserving near creases,
    /// where gradient projection would pile samples onto the crease curve.
    fn draw(&self, rng: &mut Pcg64) -> [f64; 3] {
        let total = *self.cumulative_area.last().unwrap();
        let cell = 1.0 / SCAN_GRID as f64;
        loop {
            let u = rng.random_range(0.0..total);
            let ti = self
                .cumulative_area
                .partition_point(|&c| c < u)
                .min(self.proxy.triangles.len() - 1);
            let t = &self.proxy.triangles[ti];
            let a = self.proxy.vertices[t[0] as usize];
            let b = self.proxy.vertices[t[1] as usize];
            let c = self.proxy.vertices[t[2] as usize];
            let (mut r1, r2) = (rng.random_range(0.0..1.0f64), rng.random_range(0.0..1.0f64));
            r1 = r1.sqrt();
            let (w0, w1, w2) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            let p = [
                w0 * a[0] + w1 * b[0] + w2 * c[0],
                w0 * a[1] + w1 * b[1] + w2 * c[1],
                w0 * a[2] + w1 * b[2] + w2 * c[2],
            ];
            let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = super::cross(&ab, &ac);
            let nl = super::norm(&n);
            if nl < 1e-30 {
                continue;
            }
            let dir = [n[0] / nl, n[1] / nl, n[2] / nl];
            if let Some(q) = refine_along(self.shape, p, dir, 2.0 * cell) {
                if q.iter().all(|&x| (0.0..1.0).contains(&x)) {
                    return q;
                }
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Pcg64) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::InvalidArgument("cannot sample 0 surface points".into()));
        }
        let points = (0..n).map(|_| self.draw(rng)).collect();
        PointCloud::new(points)
    }
}

/// Root of the sdf along `p + t*dir` for `t` in `[-reach, reach]`, found by
/// bracketed bisection to well below the surface tolerance.
fn refine_along(shape: &ImplicitShape, p: [f64; 3], dir: [f64; 3], reach: f64) -> Option<[f64; 3]> {
    let at = |t: f64| {
        [
            p[0] + t * dir[0],
            p[1] + t * dir[1],
            p[2] + t * dir[2],
        ]
    };
    // Bracket the sign change, widening once if needed.
    let mut lo = -reach;
    let mut hi = reach;
    let (mut slo, mut shi) = (shape.sdf(at(lo)), shape.sdf(at(hi)));
    if slo * shi > 0.0 {
        lo *= 2.0;
        hi *= 2.0;
        slo = shape.sdf(at(lo));
        shi = shape.sdf(at(hi));
        if slo * shi > 0.0 {
            return None;
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let smid = shape.sdf(at(mid));
        if smid.abs() < SURFACE_TOL * 0.1 {
            return Some(at(mid));
        }
        if (smid > 0.0) == (slo > 0.0) {
            lo = mid;
            slo = smid;
        } else {
            hi = mid;
        }
    }
    let q = at(0.5 * (lo + hi));
    (shape.sdf(q).abs() < SURFACE_TOL).then_some(q)
}

/// Approximately area-uniform surface samples with `|sdf| < 1e-4`.
pub fn sample_surface(shape: &ImplicitShape, n: usize, seed: u64) -> Result<PointCloud> {
    let sampler = SurfaceSampler::new(shape)?;
    let mut rng = indexed_rng(seed, Stream::Data, 0x51);
    sampler.sample(n, &mut rng)
}

/// Query points with ground-truth occupancies.
#[derive(Debug, Clone)]
pub struct OccupancyTargets {
    pub points: Vec<[f64; 3]>,
    pub occupied: Vec<bool>,
}

impl OccupancyTargets {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mixes uniform cube samples with surface points jittered at two scales,
/// labelling each by the shape predicate. `uniform_frac` of the budget is
/// uniform; the remainder splits evenly between near and far jitter.
pub fn sample_occupancy_targets(
    sampler: &SurfaceSampler,
    t: usize,
    sigma_near: f64,
    sigma_far: f64,
    uniform_frac: f64,
    rng: &mut Pcg64,
) -> Result<OccupancyTargets> {
    if t == 0 {
        return Err(Error::InvalidArgument("target count must be >= 1".into()));
    }
    if sigma_near > sigma_far {
        return Err(Error::InvalidArgument(format!(
            "sigma_near {sigma_near} must not exceed sigma_far {sigma_far}"
        )));
    }
    let n_uniform = ((uniform_frac * t as f64).round() as usize).min(t);
    let n_surf = t - n_uniform;
    let n_near = n_surf / 2;
    let mut points = Vec::with_capacity(t);
    for _ in 0..n_uniform {
        points.push([
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ]);
    }
    for i in 0..n_surf {
        let sigma = if i < n_near { sigma_near } else { sigma_far };
        let mut p = sampler.draw(rng);
        for x in p.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = (*x + sigma * z).clamp(0.0, 1.0 - 1e-9);
        }
        points.push(p);
    }
    let occupied = points.iter().map(|&p| sampler.shape().occupied(p)).collect();
    Ok(OccupancyTargets { points, occupied })
}

/// `n_total - 6` Fibonacci-lattice directions plus the six axis views.
pub fn fibonacci_viewpoints(n_total: usize) -> Result<Vec<[f64; 3]>> {
    if n_total < 6 {
        return Err(Error::InvalidArgument(format!(
            "need at least the 6 orthogonal views, got {n_total}"
        )));
    }
    let n = n_total - 6;
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let mut views = Vec::with_capacity(n_total);
    for i in 0..n {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let theta = golden * i as f64;
        views.push(super::normalize([r * theta.cos(), r * theta.sin(), z]));
    }
    views.push([1.0, 0.0, 0.0]);
    views.push([-1.0, 0.0, 0.0]);
    views.push([0.0, 1.0, 0.0]);
    views.push([0.0, -1.0, 0.0]);
    views.push([0.0, 0.0, 1.0]);
    views.push([0.0, 0.0, -1.0]);
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dist2, dot, ImplicitShape};

    #[test]
    fn sphere_samples_sit_at_radius() {
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.3).unwrap();
        let cloud = sample_surface(&s, 10_000, 7).unwrap();
        let mean_r: f64 = cloud
            .points()
            .iter()
            .map(|p| dist2(p, &[0.5, 0.5, 0.5]).sqrt())
            .sum::<f64>()
            / cloud.len() as f64;
        assert!((mean_r - 0.3).abs() < 1e-3, "mean radius {mean_r}");
    }

    #[test]
    fn single_sample_is_on_surface() {
        let s = ImplicitShape::torus([0.5, 0.5, 0.5], 0.22, 0.07).unwrap();
        let cloud = sample_surface(&s, 1, 3).unwrap();
        assert!(s.sdf(cloud.points()[0]).abs() < 1e-4);
    }

    #[test]
    fn box_faces_sampled_proportionally_to_area() {
        let half = [0.3, 0.2, 0.1];
        let b = ImplicitShape::cuboid([0.5, 0.5, 0.5], half, 0.0).unwrap();
        let cloud = sample_surface(&b, 10_000, 13).unwrap();
        // Classify each sample by nearest face plane.
        let mut counts = [0usize; 6];
        for p in cloud.points() {
            let local = [p[0] - 0.5, p[1] - 0.5, p[2] - 0.5];
            let gaps = [
                (half[0] - local[0].abs()).abs(),
                (half[1] - local[1].abs()).abs(),
                (half[2] - local[2].abs()).abs(),
            ];
            let axis = (0..3).min_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap();
            counts[axis * 2 + usize::from(local[axis] > 0.0)] += 1;
        }
        let areas = [
            4.0 * half[1] * half[2],
            4.0 * half[1] * half[2],
            4.0 * half[0] * half[2],
            4.0 * half[0] * half[2],
            4.0 * half[0] * half[1],
            4.0 * half[0] * half[1],
        ];
        let total_area: f64 = areas.iter().sum();
        for (i, &c) in counts.iter().enumerate() {
            let expected = areas[i] / total_area;
            let got = c as f64 / cloud.len() as f64;
            assert!(
                (got - expected).abs() / expected < 0.05,
                "face {i}: got {got:.4}, expected {expected:.4}"
            );
        }
    }

    #[test]
    fn uniform_targets_estimate_sphere_volume() {
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.3).unwrap();
        let sampler = SurfaceSampler::new(&s).unwrap();
        let mut rng = indexed_rng(5, Stream::Data, 2);
        let targets = sample_occupancy_targets(&sampler, 100_000, 0.01, 0.05, 1.0, &mut rng).unwrap();
        let frac = targets.occupied.iter().filter(|&&o| o).count() as f64 / targets.len() as f64;
        let truth = 4.0 / 3.0 * std::f64::consts::PI * 0.3f64.powi(3);
        assert!((frac - truth).abs() / truth < 0.01, "got {frac}, analytic {truth}");
    }

    #[test]
    fn zero_near_jitter_stays_on_surface() {
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.25).unwrap();
        let sampler = SurfaceSampler::new(&s).unwrap();
        let mut rng = indexed_rng(5, Stream::Data, 1);
        // uniform_frac = 0 and sigma_far = 0 too, so every point is a raw
        // surface sample.
        let targets = sample_occupancy_targets(&sampler, 64, 0.0, 0.0, 0.0, &mut rng).unwrap();
        for p in &targets.points {
            assert!(s.sdf(*p).abs() < 1e-4);
        }
    }

    #[test]
    fn targets_reproducible_for_fixed_seed() {
        let s = ImplicitShape::cuboid([0.5, 0.5, 0.5], [0.2, 0.2, 0.2], 0.3).unwrap();
        let sampler = SurfaceSampler::new(&s).unwrap();
        let mut r1 = indexed_rng(9, Stream::Data, 2);
        let mut r2 = indexed_rng(9, Stream::Data, 2);
        let a = sample_occupancy_targets(&sampler, 500, 0.01, 0.05, 0.2, &mut r1).unwrap();
        let b = sample_occupancy_targets(&sampler, 500, 0.01, 0.05, 0.2, &mut r2).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.occupied, b.occupied);
    }

    #[test]
    fn viewpoints_contain_exact_axes() {
        let views = fibonacci_viewpoints(70).unwrap();
        assert_eq!(views.len(), 70);
        for axis in [
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ] {
            assert!(views.contains(&axis));
        }
        for v in &views {
            assert!((dot(v, v).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_points_are_well_separated() {
        let views = fibonacci_viewpoints(70).unwrap();
        let lattice = &views[..64];
        let mut min_angle = f64::INFINITY;
        for i in 0..lattice.len() {
            for j in i + 1..lattice.len() {
                let cos = dot(&lattice[i], &lattice[j]).clamp(-1.0, 1.0);
                min_angle = min_angle.min(cos.acos());
            }
        }
        assert!(min_angle.to_degrees() > 10.0, "min angle {}", min_angle.to_degrees());
    }
}
