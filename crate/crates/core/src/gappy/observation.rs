use serde::Serialize;

use crate::data::SurfacePoint;
use crate::error::{Error, Result};

/// Sensor-to-grid assignment: the sparse selection operator of the
/// observation model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservationMap {
    /// Grid index observed by each sensor.
    pub indices: Vec<usize>,
    /// Euclidean distance from each sensor to its grid point.
    pub distances: Vec<f64>,
    /// Number of sensors that share a grid point with an earlier sensor.
    pub duplicates: usize,
}

impl ObservationMap {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Picks the observed entries out of a full-grid field.
    pub fn observe(&self, field: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| field[i]).collect()
    }
}

fn same_side(a: &SurfacePoint, b: &SurfacePoint) -> bool {
    a.normal
        .iter()
        .zip(&b.normal)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        > 0.0
}

/// Maps every sensor to its nearest grid point (lowest index on ties).
///
/// Only grid points whose normal faces the same way as the sensor's are
/// candidates, so coincident upper and lower surface nodes of a thin wing
/// stay apart. If no grid point qualifies the whole grid is searched.
///
/// Grid points are sorted by x once; each query sweeps outwards from its x
/// position and stops when the x gap alone exceeds the best distance.
pub fn nearest_neighbor_map(
    grid: &[SurfacePoint],
    sensors: &[SurfacePoint],
) -> Result<ObservationMap> {
    if grid.is_empty() || sensors.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_x: Vec<usize> = (0..grid.len()).collect();
    by_x.sort_by(|&a, &b| grid[a].position[0].total_cmp(&grid[b].position[0]));
    let xs: Vec<f64> = by_x.iter().map(|&i| grid[i].position[0]).collect();

    let mut indices = Vec::with_capacity(sensors.len());
    let mut distances = Vec::with_capacity(sensors.len());
    for s in sensors {
        let sx = s.position[0];
        let start = xs.partition_point(|&x| x < sx);
        let restrict = grid.iter().any(|g| same_side(g, s));
        let mut best = (f64::INFINITY, usize::MAX);
        let consider = |k: usize, best: &mut (f64, usize)| {
            let i = by_x[k];
            if restrict && !same_side(&grid[i], s) {
                return;
            }
            let d2 = grid[i].squared_distance(s);
            if d2 < best.0 || (d2 == best.0 && i < best.1) {
                *best = (d2, i);
            }
        };
        for (k, &x) in xs.iter().enumerate().skip(start) {
            let dx = x - sx;
            if dx * dx > best.0 {
                break;
            }
            consider(k, &mut best);
        }
        for k in (0..start).rev() {
            let dx = sx - xs[k];
            if dx * dx > best.0 {
                break;
            }
            consider(k, &mut best);
        }
        indices.push(best.1);
        distances.push(best.0.sqrt());
    }

    let mut seen = std::collections::HashSet::new();
    let duplicates = indices.iter().filter(|&&i| !seen.insert(i)).count();
    if duplicates > 0 {
        log::warn!(
            "{duplicates} sensors map onto an already observed grid point; keeping all rows"
        );
    }
    Ok(ObservationMap {
        indices,
        distances,
        duplicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64) -> SurfacePoint {
        SurfacePoint::new([x, y, z], [0.0, 0.0, 1.0], 1.0).unwrap()
    }

    #[test]
    fn coincident_sensor() {
        let grid: Vec<_> = (0..10).map(|i| pt(i as f64, 0.0, 0.0)).collect();
        let m = nearest_neighbor_map(&grid, &[pt(4.0, 0.0, 0.0)]).unwrap();
        assert_eq!(m.indices, vec![4]);
        assert_eq!(m.distances, vec![0.0]);
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let mut grid: Vec<_> = (0..10).map(|i| pt(i as f64 * 10.0, 5.0, 0.0)).collect();
        grid[3] = pt(1.0, 0.0, 0.0);
        grid[7] = pt(-1.0, 0.0, 0.0);
        let m = nearest_neighbor_map(&grid, &[pt(0.0, 0.0, 0.0)]).unwrap();
        assert_eq!(m.indices, vec![3]);
        // same x, tie along y
        grid[3] = pt(0.0, 1.0, 0.0);
        grid[7] = pt(0.0, -1.0, 0.0);
        let m = nearest_neighbor_map(&grid, &[pt(0.0, 0.0, 0.0)]).unwrap();
        assert_eq!(m.indices, vec![3]);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut r = || rng.random_range(0.0..1.0);
        let grid: Vec<_> = (0..100).map(|_| pt(r(), r(), r())).collect();
        let sensors: Vec<_> = (0..10).map(|_| pt(r(), r(), r())).collect();
        let m = nearest_neighbor_map(&grid, &sensors).unwrap();
        for (s, &got) in sensors.iter().zip(&m.indices) {
            let mut best = 0;
            for i in 1..grid.len() {
                if grid[i].squared_distance(s) < grid[best].squared_distance(s) {
                    best = i;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn coincident_surfaces_are_kept_apart() {
        let down = |x: f64| SurfacePoint::new([x, 0.0, 0.0], [0.0, 0.0, -1.0], 1.0).unwrap();
        let grid = vec![pt(0.0, 0.0, 0.0), pt(1.0, 0.0, 0.0), down(0.0), down(1.0)];
        let m = nearest_neighbor_map(&grid, &[down(0.9), pt(0.9, 0.0, 0.0)]).unwrap();
        assert_eq!(m.indices, vec![3, 1]);
        let m = nearest_neighbor_map(&grid[..2], &[down(0.1)]).unwrap();
        assert_eq!(m.indices, vec![0]);
    }

    #[test]
    fn duplicates_are_counted_and_kept() {
        let grid = vec![pt(0.0, 0.0, 0.0), pt(1.0, 0.0, 0.0)];
        let m = nearest_neighbor_map(&grid, &[pt(0.1, 0.0, 0.0), pt(-0.1, 0.0, 0.0)]).unwrap();
        assert_eq!(m.indices, vec![0, 0]);
        assert_eq!(m.duplicates, 1);
        assert!(nearest_neighbor_map(&grid, &[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn sweep_equals_brute_force(
            coords in proptest::collection::vec((0u8..6, 0u8..6, 0u8..3), 1..60),
            queries in proptest::collection::vec((0u8..6, 0u8..6, 0u8..3), 1..10),
        ) {
            // small integer lattice so exact ties are common
            let grid: Vec<_> = coords.iter().map(|&(x, y, z)| pt(x as f64, y as f64, z as f64)).collect();
            let sensors: Vec<_> = queries.iter().map(|&(x, y, z)| pt(x as f64 + 0.5, y as f64, z as f64)).collect();
            let m = nearest_neighbor_map(&grid, &sensors).unwrap();
            for (s, &got) in sensors.iter().zip(&m.indices) {
                let mut best = 0;
                for i in 1..grid.len() {
                    if grid[i].squared_distance(s) < grid[best].squared_distance(s) {
                        best = i;
                    }
                }
                proptest::prop_assert_eq!(got, best);
            }
        }
    }
}
