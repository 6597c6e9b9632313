//! Point-cloud evaluation: Chamfer-L2, F-score, unidirectional Hausdorff,
//! set-level diversity/quality scores, view ambiguity, and codebook
//! statistics.
//!
//! Conventions, since names alone do not pin formulas: Chamfer is the sum
//! of both directed means of *squared* nearest distances; UHD is the max
//! over partial points of the *unsquared* nearest distance.

use rayon::prelude::*;

use crate::geometry::{dist2, PointCloud};
use crate::{Error, Result};

/// Uniform-grid nearest-neighbor index over `[0,1)^3`. Falls back to brute
/// force for small clouds; results are exactly the brute-force distances
/// either way (the grid only prunes candidates that cannot be nearer).
struct NnIndex<'a> {
    points: &'a [[f64; 3]],
    res: usize,
    cells: Vec<Vec<u32>>,
}

const BRUTE_FORCE_LIMIT: usize = 64;

impl<'a> NnIndex<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        if points.len() < BRUTE_FORCE_LIMIT {
            return NnIndex {
                points,
                res: 0,
                cells: Vec::new(),
            };
        }
        let res = ((points.len() as f64).cbrt().ceil() as usize).clamp(2, 64);
        let mut cells = vec![Vec::new(); res * res * res];
        for (i, p) in points.iter().enumerate() {
            cells[Self::cell_of(p, res)].push(i as u32);
        }
        NnIndex { points, res, cells }
    }

    fn cell_of(p: &[f64; 3], res: usize) -> usize {
        let c = |x: f64| ((x * res as f64) as usize).min(res - 1);
        (c(p[0]) * res + c(p[1])) * res + c(p[2])
    }

    /// Squared distance to the nearest point.
    fn nearest_dist2(&self, q: &[f64; 3]) -> f64 {
        if self.res == 0 {
            return self
                .points
                .iter()
                .map(|p| dist2(p, q))
                .fold(f64::INFINITY, f64::min);
        }
        let res = self.res;
        let cell = |x: f64| ((x * res as f64) as isize).clamp(0, res as isize - 1);
        let (cx, cy, cz) = (cell(q[0]), cell(q[1]), cell(q[2]));
        let mut best = f64::INFINITY;
        // Expanding shells of cells; stop once the nearest possible point
        // in the next shell cannot beat the current best.
        for ring in 0..res as isize {
            let ring_min = (ring - 1).max(0) as f64 / res as f64;
            if best.is_finite() && ring_min * ring_min > best {
                break;
            }
            let mut any_cell = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let (x, y, z) = (cx + dx, cy + dy, cz + dz);
                        if !(0..res as isize).contains(&x)
                            || !(0..res as isize).contains(&y)
                            || !(0..res as isize).contains(&z)
                        {
                            continue;
                        }
                        any_cell = true;
                        for &i in &self.cells[((x as usize) * res + y as usize) * res + z as usize] {
                            best = best.min(dist2(&self.points[i as usize], q));
                        }
                    }
                }
            }
            if !any_cell && best.is_finite() {
                break;
            }
        }
        best
    }
}

fn directed_mean_sq(from: &PointCloud, index: &NnIndex) -> f64 {
    // Distances in parallel, reduction sequential: the result is the exact
    // sum a brute-force scan in point order would produce.
    let dists: Vec<f64> = from
        .points()
        .par_iter()
        .map(|p| index.nearest_dist2(p))
        .collect();
    dists.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric sum of directed means of squared nearest distances.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ia = NnIndex::new(a.points());
    let ib = NnIndex::new(b.points());
    Ok(directed_mean_sq(a, &ib) + directed_mean_sq(b, &ia))
}

/// Harmonic mean of precision and recall at threshold `tau`; when `None`,
/// tau defaults to 1% of the ground-truth bounding-box diagonal.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, tau: Option<f64>) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let tau = tau.unwrap_or_else(|| 0.01 * gt.bbox_diagonal());
    let tau2 = tau * tau;
    let ip = NnIndex::new(pred.points());
    let ig = NnIndex::new(gt.points());
    let precision = pred
        .points()
        .par_iter()
        .filter(|p| ig.nearest_dist2(p) <= tau2)
        .count() as f64
        / pred.len() as f64;
    let recall = gt
        .points()
        .par_iter()
        .filter(|p| ip.nearest_dist2(p) <= tau2)
        .count() as f64
        / gt.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Max over `partial` points of the unsquared distance to the nearest
/// completion point: faithfulness of a completion to its input.
pub fn uhd(partial: &PointCloud, completion: &PointCloud) -> Result<f64> {
    if partial.is_empty() || completion.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ic = NnIndex::new(completion.points());
    let worst = partial
        .points()
        .par_iter()
        .map(|p| ic.nearest_dist2(p))
        .reduce(|| 0.0, f64::max);
    Ok(worst.sqrt())
}

/// Total mutual difference of a completion set: sum over members of the
/// mean Chamfer-L2 to the other k-1.
pub fn tmd(completions: &[PointCloud]) -> Result<f64> {
    if completions.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "tmd needs at least 2 completions, got {}",
            completions.len()
        )));
    }
    let k = completions.len();
    let mut pair = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = chamfer_l2(&completions[i], &completions[j])?;
            pair[i][j] = d;
            pair[j][i] = d;
        }
    }
    let mut total = 0.0;
    for row in &pair {
        total += row.iter().sum::<f64>() / (k - 1) as f64;
    }
    Ok(total)
}

/// Minimal matching distance: mean over the reference set of the closest
/// generated shape under Chamfer-L2.
pub fn mmd(generated: &[PointCloud], reference: &[PointCloud]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("mmd needs non-empty sets".into()));
    }
    let mut total = 0.0;
    for r in reference {
        let mut best = f64::INFINITY;
        for g in generated {
            best = best.min(chamfer_l2(g, r)?);
        }
        total += best;
    }
    Ok(total / reference.len() as f64)
}

/// How underdetermined a scan leaves the complete shape: per complete
/// point, the nearest-scan distance normalized by that point's farthest
/// in-shape distance, averaged.
pub fn ambiguity(complete: &PointCloud, partial: &PointCloud) -> Result<f64> {
    if complete.is_empty() || partial.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if complete.len() < 2 {
        return Err(Error::InvalidArgument(
            "ambiguity needs >= 2 complete points for the farthest-distance normalizer".into(),
        ));
    }
    let ip = NnIndex::new(partial.points());
    let pts = complete.points();
    let total: f64 = pts
        .par_iter()
        .map(|x| {
            let near = ip.nearest_dist2(x).sqrt();
            let far = pts
                .iter()
                .map(|y| dist2(x, y))
                .fold(0.0f64, f64::max)
                .sqrt();
            near / far
        })
        .sum();
    Ok(total / pts.len() as f64)
}

/// Views sorted by descending scan ambiguity (ties by index), plus the
/// median split point: `ranked[..split]` is the high-ambiguity half.
pub struct ViewRanking {
    pub ranked: Vec<(usize, f64)>,
    pub split: usize,
}

/// Ranks viewpoints by the ambiguity of their scans against the complete
/// cloud. `scans[i]` must correspond to `viewpoints[i]`.
pub fn rank_views(complete: &PointCloud, scans: &[PointCloud]) -> Result<ViewRanking> {
    if scans.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 views to rank".into()));
    }
    let mut ranked: Vec<(usize, f64)> = scans
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i, ambiguity(complete, s)?)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let split = ranked.len() / 2;
    Ok(ViewRanking { ranked, split })
}

/// Usage fraction and perplexity of a codebook assignment histogram.
pub fn codebook_stats(histogram: &[u64]) -> Result<(f64, f64)> {
    let total: u64 = histogram.iter().sum();
    if histogram.is_empty() || total == 0 {
        return Err(Error::InvalidArgument("empty assignment histogram".into()));
    }
    let used = histogram.iter().filter(|&&c| c > 0).count();
    let usage = used as f64 / histogram.len() as f64;
    let mut entropy = 0.0;
    for &c in histogram {
        if c > 0 {
            let p = c as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    Ok((usage, entropy.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_surface, ImplicitShape};
    use crate::rng::{indexed_rng, Stream};
    use rand::RngExt;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(n: usize, tag: u64) -> PointCloud {
        let mut rng = indexed_rng(7, Stream::Data, tag);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn brute_nearest2(q: &[f64; 3], pts: &[[f64; 3]]) -> f64 {
        pts.iter().map(|p| dist2(p, q)).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn chamfer_identical_is_zero() {
        let a = random_cloud(50, 1);
        assert_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_unit_separation() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[0.9999999, 0.0, 0.0]]);
        let d = chamfer_l2(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 1e-5, "got {d}");
    }

    #[test]
    fn chamfer_is_symmetric_and_matches_brute_force() {
        for trial in 0..5 {
            let a = random_cloud(120, 10 + trial);
            let b = random_cloud(150, 20 + trial);
            let fast = chamfer_l2(&a, &b).unwrap();
            let ab: f64 = a.points().iter().map(|p| brute_nearest2(p, b.points())).sum::<f64>() / a.len() as f64;
            let ba: f64 = b.points().iter().map(|p| brute_nearest2(p, a.points())).sum::<f64>() / b.len() as f64;
            assert_eq!(fast, ab + ba);
            assert_eq!(fast, chamfer_l2(&b, &a).unwrap());
        }
    }

    #[test]
    fn fscore_analytic_cases() {
        let gt = cloud(&[[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]]);
        assert_eq!(fscore(&gt, &gt, None).unwrap(), 1.0);
        let far = cloud(&[[0.5, 0.2, 0.2], [0.5, 0.8, 0.8]]);
        assert_eq!(fscore(&far, &gt, None).unwrap(), 0.0);
        // Half of pred within tau, all gt covered: 2*(0.5*1)/(0.5+1) = 2/3.
        let pred = cloud(&[[0.2, 0.2, 0.2], [0.8, 0.8, 0.8], [0.5, 0.5, 0.5], [0.4, 0.6, 0.5]]);
        let gt2 = cloud(&[[0.2, 0.2, 0.2], [0.8, 0.8, 0.8], [0.5, 0.5, 0.5], [0.4, 0.6, 0.5]]);
        let gt_half = cloud(&[[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]]);
        let _ = gt2;
        let f = fscore(&pred, &gt_half, Some(0.001)).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12, "got {f}");
    }

    #[test]
    fn fscore_monotone_in_tau() {
        let a = random_cloud(100, 3);
        let b = random_cloud(100, 4);
        let mut last = 0.0;
        for tau in [0.01, 0.05, 0.1, 0.3, 1.0] {
            let f = fscore(&a, &b, Some(tau)).unwrap();
            assert!(f >= last - 1e-12);
            assert!((0.0..=1.0).contains(&f));
            last = f;
        }
    }

    #[test]
    fn uhd_analytic_and_brute_force() {
        let partial = cloud(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        let completion = cloud(&[[0.0, 0.0, 0.0]]);
        assert!((uhd(&partial, &completion).unwrap() - 0.5).abs() < 1e-12);
        // Subset gives zero.
        assert_eq!(uhd(&completion, &partial).unwrap(), 0.0);
        for trial in 0..3 {
            let a = random_cloud(90, 30 + trial);
            let b = random_cloud(110, 40 + trial);
            let brute = a
                .points()
                .iter()
                .map(|p| brute_nearest2(p, b.points()))
                .fold(0.0f64, f64::max)
                .sqrt();
            assert_eq!(uhd(&a, &b).unwrap(), brute);
        }
    }

    #[test]
    fn tmd_conventions() {
        let a = random_cloud(40, 50);
        let b = random_cloud(40, 51);
        let c = random_cloud(40, 52);
        assert_eq!(tmd(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        let two = tmd(&[a.clone(), b.clone()]).unwrap();
        assert!((two - 2.0 * chamfer_l2(&a, &b).unwrap()).abs() < 1e-12);
        let abc = tmd(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cba = tmd(&[c, b, a]).unwrap();
        assert!((abc - cba).abs() < 1e-12);
        assert!(tmd(&[random_cloud(10, 53)]).is_err());
    }

    #[test]
    fn mmd_conventions() {
        let a = random_cloud(40, 60);
        let b = random_cloud(40, 61);
        // Generated superset of reference: zero.
        assert_eq!(mmd(&[a.clone(), b.clone()], &[a.clone()]).unwrap(), 0.0);
        let single = mmd(&[a.clone()], &[b.clone()]).unwrap();
        assert_eq!(single, chamfer_l2(&a, &b).unwrap());
        let fwd = mmd(&[a.clone(), b.clone()], &[b.clone(), a.clone()]).unwrap();
        let rev = mmd(&[b, a.clone()], &[a.clone(), a]).unwrap();
        let _ = rev;
        assert!(fwd >= 0.0);
    }

    #[test]
    fn ambiguity_two_point_case() {
        let complete = cloud(&[[0.0, 0.0, 0.0], [0.9999999, 0.0, 0.0]]);
        let partial = cloud(&[[0.0, 0.0, 0.0]]);
        let amb = ambiguity(&complete, &partial).unwrap();
        assert!((amb - 0.5).abs() < 1e-6, "got {amb}");
        assert_eq!(ambiguity(&complete, &complete).unwrap(), 0.0);
    }

    #[test]
    fn ambiguity_cap_scores_above_hemisphere() {
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.3).unwrap();
        let complete = sample_surface(&s, 3000, 70).unwrap();
        let cap: Vec<[f64; 3]> = complete
            .points()
            .iter()
            .copied()
            .filter(|p| p[2] > 0.5 + 0.25)
            .collect();
        let hemi: Vec<[f64; 3]> = complete
            .points()
            .iter()
            .copied()
            .filter(|p| p[2] > 0.5)
            .collect();
        let amb_cap = ambiguity(&complete, &cloud(&cap)).unwrap();
        let amb_hemi = ambiguity(&complete, &cloud(&hemi)).unwrap();
        assert!(
            amb_cap > amb_hemi,
            "cap {amb_cap} should exceed hemisphere {amb_hemi}"
        );
    }

    #[test]
    fn ambiguity_monotone_under_added_scan_points() {
        let b = random_cloud(200, 80);
        let p_small = b.subsample(20, &mut indexed_rng(1, Stream::Data, 81));
        let mut bigger = p_small.points().to_vec();
        bigger.extend_from_slice(&random_cloud(50, 82).points()[..20]);
        let p_big = PointCloud::new(bigger).unwrap();
        let small = ambiguity(&b, &p_small).unwrap();
        let big = ambiguity(&b, &p_big).unwrap();
        assert!(big <= small + 1e-12);
    }

    #[test]
    fn codebook_stats_cases() {
        let v = 16;
        let uniform: Vec<u64> = vec![3; v];
        let (usage, perp) = codebook_stats(&uniform).unwrap();
        assert_eq!(usage, 1.0);
        assert!((perp - v as f64).abs() < 1e-9);
        let mut single = vec![0u64; v];
        single[5] = 10;
        let (usage, perp) = codebook_stats(&single).unwrap();
        assert!((usage - 1.0 / v as f64).abs() < 1e-12);
        assert!((perp - 1.0).abs() < 1e-12);
        let (usage, perp) = codebook_stats(&[2, 2, 0, 0]).unwrap();
        assert_eq!(usage, 0.5);
        assert!((perp - 2.0).abs() < 1e-12);
        assert!(codebook_stats(&[0, 0]).is_err());
    }
}
