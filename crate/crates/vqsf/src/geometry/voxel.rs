//! Point-cloud voxelization on the `[0,1)^3` grid convention.

use super::{ImplicitShape, PointCloud};
use crate::{Error, Result};

/// Row-major ravel: `c = x*R^2 + y*R + z`.
pub fn ravel(cell: [usize; 3], r: usize) -> usize {
    (cell[0] * r + cell[1]) * r + cell[2]
}

pub fn unravel(c: usize, r: usize) -> [usize; 3] {
    [c / (r * r), (c / r) % r, c % r]
}

/// Occupied cells of the cloud at resolution `R`: `cell = floor(p * R)` per
/// axis, deduplicated, sorted by raveled index.
pub fn voxelize(cloud: &PointCloud, r: usize) -> Result<Vec<[usize; 3]>> {
    if r < 2 {
        return Err(Error::InvalidArgument(format!("resolution {r} must be >= 2")));
    }
    let mut ravels: Vec<usize> = cloud
        .points()
        .iter()
        .map(|p| {
            let cell = [
                (p[0] * r as f64).floor() as usize,
                (p[1] * r as f64).floor() as usize,
                (p[2] * r as f64).floor() as usize,
            ];
            ravel(cell, r)
        })
        .collect();
    ravels.sort_unstable();
    ravels.dedup();
    Ok(ravels.into_iter().map(|c| unravel(c, r)).collect())
}

/// Number of grid cells whose center is inside the shape; the dense
/// (interior-filling) counterpart of the sparse surface-voxel count.
pub fn occupied_cell_count(shape: &ImplicitShape, r: usize) -> usize {
    let mut count = 0;
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                let p = [
                    (x as f64 + 0.5) / r as f64,
                    (y as f64 + 0.5) / r as f64,
                    (z as f64 + 0.5) / r as f64,
                ];
                if shape.occupied(p) {
                    count += 1;
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_single_cell() {
        let cloud = PointCloud::new(vec![[0.01, 0.01, 0.01]]).unwrap();
        let cells = voxelize(&cloud, 8).unwrap();
        assert_eq!(cells, vec![[0, 0, 0]]);
    }

    #[test]
    fn dense_points_fill_every_cell() {
        let r = 4;
        let mut points = Vec::new();
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    points.push([
                        (x as f64 + 0.5) / r as f64,
                        (y as f64 + 0.5) / r as f64,
                        (z as f64 + 0.5) / r as f64,
                    ]);
                }
            }
        }
        let cells = voxelize(&PointCloud::new(points).unwrap(), r).unwrap();
        assert_eq!(cells.len(), 64);
    }

    #[test]
    fn duplication_does_not_change_the_cell_set() {
        let pts = vec![[0.1, 0.2, 0.3], [0.6, 0.6, 0.6], [0.11, 0.21, 0.31]];
        let mut doubled = pts.clone();
        doubled.extend_from_slice(&pts);
        let a = voxelize(&PointCloud::new(pts).unwrap(), 8).unwrap();
        let b = voxelize(&PointCloud::new(doubled).unwrap(), 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ravel_matches_row_major_convention() {
        assert_eq!(ravel([1, 2, 3], 8), 83);
        assert_eq!(unravel(83, 8), [1, 2, 3]);
    }

    #[test]
    fn cells_sorted_by_raveled_index() {
        let pts = vec![[0.9, 0.9, 0.9], [0.1, 0.1, 0.1], [0.5, 0.2, 0.8]];
        let cells = voxelize(&PointCloud::new(pts).unwrap(), 8).unwrap();
        let ravels: Vec<usize> = cells.iter().map(|&c| ravel(c, 8)).collect();
        assert!(ravels.windows(2).all(|w| w[0] < w[1]));
    }
}
