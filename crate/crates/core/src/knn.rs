//! Exact k-nearest-neighbor queries over a uniform spatial hash grid.
//!
//! The grid is rebuilt per frame (M <= a few thousand makes that trivial) and
//! queries are exact: cells are scanned in expanding Chebyshev rings until no
//! unscanned cell can hold a closer point. Ties break to the lower index.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::math::Vec3;

pub struct SpatialHash {
    cell: f64,
    points: Vec<Vec3>,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    min_cell: (i64, i64, i64),
    max_cell: (i64, i64, i64),
}

fn cell_of(p: Vec3, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

impl SpatialHash {
    pub fn build(points: &[Vec3], cell: f64) -> SpatialHash {
        assert!(cell > 0.0 && !points.is_empty(), "spatial hash needs points");
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut min_cell = (i64::MAX, i64::MAX, i64::MAX);
        let mut max_cell = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(*p, cell);
            min_cell = (min_cell.0.min(c.0), min_cell.1.min(c.1), min_cell.2.min(c.2));
            max_cell = (max_cell.0.max(c.0), max_cell.1.max(c.1), max_cell.2.max(c.2));
            cells.entry(c).or_default().push(i as u32);
        }
        SpatialHash {
            cell,
            points: points.to_vec(),
            cells,
            min_cell,
            max_cell,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices and distances of the k nearest points, ascending distance,
    /// ties by ascending index. Errors if `k` exceeds the point count.
    pub fn knn(&self, q: Vec3, k: usize) -> Result<Vec<(usize, f64)>> {
        if k > self.points.len() {
            return Err(CoreError::Contract(format!(
                "knn k={k} exceeds point count {}",
                self.points.len()
            )));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let qc = cell_of(q, self.cell);
        let mut cands: Vec<(f64, usize)> = Vec::with_capacity(4 * k);

        // Scan rings until the k-th best distance provably cannot improve.
        // A point in a cell at Chebyshev ring d is at least (d-1)*cell away.
        let mut ring: i64 = 0;
        loop {
            self.scan_ring(qc, ring, q, &mut cands);
            if cands.len() >= k {
                cands.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                cands.truncate(4 * k.max(8));
                let kth = cands[k - 1].0;
                let lower_bound = ring as f64 * self.cell; // rings > current
                if lower_bound > kth.sqrt() {
                    break;
                }
            }
            // Termination: the whole occupied grid has been covered.
            if self.ring_exceeds_grid(qc, ring) {
                break;
            }
            ring += 1;
        }
        cands.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(cands
            .into_iter()
            .take(k)
            .map(|(d2, i)| (i, d2.sqrt()))
            .collect())
    }

    fn scan_ring(
        &self,
        qc: (i64, i64, i64),
        ring: i64,
        q: Vec3,
        cands: &mut Vec<(f64, usize)>,
    ) {
        let (cx, cy, cz) = qc;
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in ids {
                            let d2 = (self.points[i as usize] - q).norm_sq();
                            cands.push((d2, i as usize));
                        }
                    }
                }
            }
        }
    }

    fn ring_exceeds_grid(&self, qc: (i64, i64, i64), ring: i64) -> bool {
        qc.0 - ring <= self.min_cell.0
            && qc.1 - ring <= self.min_cell.1
            && qc.2 - ring <= self.min_cell.2
            && qc.0 + ring >= self.max_cell.0
            && qc.1 + ring >= self.max_cell.1
            && qc.2 + ring >= self.max_cell.2
    }
}

/// Reference oracle: full scan with the same ordering contract.
pub fn knn_brute_force(points: &[Vec3], q: Vec3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((*p - q).norm_sq(), i))
        .collect();
    all.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    all.into_iter().take(k).map(|(d2, i)| (i, d2.sqrt())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;
    use rand::Rng;

    #[test]
    fn self_query_returns_zero_distance() {
        let pts = vec![vec3(0.0, 0.0, 0.0), vec3(1.0, 0.0, 0.0), vec3(0.0, 2.0, 0.0)];
        let h = SpatialHash::build(&pts, 0.5);
        let r = h.knn(pts[1], 1).unwrap();
        assert_eq!(r[0].0, 1);
        assert_eq!(r[0].1, 0.0);
    }

    #[test]
    fn collinear_hand_case() {
        let pts = vec![
            vec3(0.0, 0.0, 0.0),
            vec3(1.0, 0.0, 0.0),
            vec3(2.0, 0.0, 0.0),
        ];
        let h = SpatialHash::build(&pts, 0.7);
        let r = h.knn(vec3(0.9, 0.0, 0.0), 2).unwrap();
        assert_eq!(r[0].0, 1);
        assert!((r[0].1 - 0.1).abs() < 1e-12);
        assert_eq!(r[1].0, 0);
        assert!((r[1].1 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn equidistant_pair_takes_lower_index() {
        let pts = vec![vec3(1.0, 0.0, 0.0), vec3(-1.0, 0.0, 0.0)];
        let h = SpatialHash::build(&pts, 0.4);
        let r = h.knn(vec3(0.0, 0.0, 0.0), 2).unwrap();
        assert_eq!(r[0].0, 0);
        assert_eq!(r[1].0, 1);
    }

    #[test]
    fn k_exceeding_count_is_error() {
        let pts = vec![vec3(0.0, 0.0, 0.0)];
        let h = SpatialHash::build(&pts, 1.0);
        assert!(h.knn(Vec3::ZERO, 2).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_queries() {
        let mut rng = dynbody_ad::init::stream(11, "knn-test");
        let pts: Vec<Vec3> = (0..400)
            .map(|_| {
                vec3(
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 0.5,
                )
            })
            .collect();
        let h = SpatialHash::build(&pts, 0.11);
        for _ in 0..1000 {
            let q = vec3(
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            let got = h.knn(q, 9).unwrap();
            let want = knn_brute_force(&pts, q, 9);
            assert_eq!(
                got.iter().map(|x| x.0).collect::<Vec<_>>(),
                want.iter().map(|x| x.0).collect::<Vec<_>>(),
                "indices differ at q {q:?}"
            );
            for (a, b) in got.iter().zip(&want) {
                assert_eq!(a.1, b.1, "distances differ at q {q:?}");
            }
        }
    }
}
