//! Small shared helpers.

use std::collections::HashMap;

use nalgebra::Point3;

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

/// Uniform hash grid over 3D points for nearest-neighbour queries.
///
/// Queries search outward shell by shell, so they stay exact for any distance;
/// the cell size only affects speed.
#[derive(Clone, Debug)]
pub struct PointGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    points: Vec<Point3<f64>>,
    min_key: (i64, i64, i64),
    max_key: (i64, i64, i64),
}

impl PointGrid {
    pub fn new(points: &[Point3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        let mut min_key = (i64::MAX, i64::MAX, i64::MAX);
        let mut max_key = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key_of(p, cell);
            min_key = (min_key.0.min(k.0), min_key.1.min(k.1), min_key.2.min(k.2));
            max_key = (max_key.0.max(k.0), max_key.1.max(k.1), max_key.2.max(k.2));
            cells.entry(k).or_default().push(i);
        }
        Self {
            cell,
            cells,
            points: points.to_vec(),
            min_key,
            max_key,
        }
    }

    fn key_of(p: &Point3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance from `q` to the closest stored point, `None` when empty.
    pub fn nearest_distance(&self, q: &Point3<f64>) -> Option<f64> {
        self.nearest(q).map(|(_, d)| d)
    }

    /// Index and distance of the closest stored point.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let k = Self::key_of(q, self.cell);
        // Shells beyond this radius cannot contain any stored point.
        let max_ring = [
            (k.0 - self.min_key.0).abs(),
            (k.0 - self.max_key.0).abs(),
            (k.1 - self.min_key.1).abs(),
            (k.1 - self.max_key.1).abs(),
            (k.2 - self.min_key.2).abs(),
            (k.2 - self.max_key.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let mut best: Option<(usize, f64)> = None;
        let mut ring = 0i64;
        loop {
            // Far from the data a shell visits more empty cells than there are
            // points, so a linear scan is cheaper and still exact.
            if ((2 * ring + 1) as usize).pow(3) > self.points.len() {
                return self.brute_nearest(q);
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&(k.0 + dx, k.1 + dy, k.2 + dz)) {
                            for &i in ids {
                                let d = (self.points[i] - q).norm();
                                if best.is_none_or(|(_, b)| d < b) {
                                    best = Some((i, d));
                                }
                            }
                        }
                    }
                }
            }
            // Every point outside the searched cube is at least ring*cell away.
            if let Some((_, d)) = best {
                if d <= ring as f64 * self.cell {
                    return best;
                }
            }
            if ring > max_ring {
                return best;
            }
            ring += 1;
        }
    }

    fn brute_nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// True when some stored point lies within `radius` of `q`.
    pub fn any_within(&self, q: &Point3<f64>, radius: f64) -> bool {
        let reach = (radius / self.cell).ceil() as i64;
        if ((2 * reach + 1) as usize).saturating_pow(3) > self.points.len() {
            return self.points.iter().any(|p| (p - q).norm() <= radius);
        }
        let k = Self::key_of(q, self.cell);
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.cells.get(&(k.0 + dx, k.1 + dy, k.2 + dz)) {
                        if ids.iter().any(|&i| (self.points[i] - q).norm() <= radius) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn union_find_components() {
        let mut uf = UnionFind::new(5);
        uf.union(0, 1);
        uf.union(3, 4);
        assert_eq!(uf.find(0), uf.find(1));
        assert_ne!(uf.find(1), uf.find(3));
        uf.union(1, 4);
        assert_eq!(uf.find(0), uf.find(3));
        assert_ne!(uf.find(2), uf.find(0));
    }

    proptest! {
        #[test]
        fn grid_nearest_matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..60),
            q in prop::array::uniform3(-6.0f64..6.0),
            cell in 0.05f64..1.0,
        ) {
            let pts: Vec<Point3<f64>> = pts.into_iter().map(Point3::from).collect();
            let q = Point3::from(q);
            let grid = PointGrid::new(&pts, cell);
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            let got = grid.nearest_distance(&q).unwrap();
            prop_assert!((got - brute).abs() < 1e-12);
            prop_assert_eq!(grid.any_within(&q, brute + 1e-9), true);
            prop_assert_eq!(grid.any_within(&q, brute * 0.999 - 1e-9), false);
        }
    }
}
