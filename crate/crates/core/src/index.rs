//! Spatial neighborhood queries over a point cloud.
//!
//! Queries are backed by a kd-tree and are fully deterministic: neighbor
//! lists are sorted by ascending distance with ties broken by ascending
//! point id, and a query for point `i` never returns `i` itself.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 16;

/// Neighborhood selection mode: `k` nearest neighbors, a fixed radius, or
/// both (kNN is preferred by [`NeighborhoodIndex::neighbors`] when both are
/// set).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborhoodConfig {
    pub k: Option<usize>,
    pub radius: Option<f64>,
}

impl NeighborhoodConfig {
    pub fn knn(k: usize) -> Self {
        Self {
            k: Some(k),
            radius: None,
        }
    }

    pub fn radius(r: f64) -> Self {
        Self {
            k: None,
            radius: Some(r),
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.k, self.radius) {
            (None, None) => Err(Error::InvalidNeighborhood(
                "either k or radius must be set".into(),
            )),
            (Some(0), _) => Err(Error::InvalidNeighborhood("k must be at least 1".into())),
            (_, Some(r)) if !(r > 0.0 && r.is_finite()) => Err(Error::InvalidNeighborhood(
                format!("radius must be positive and finite, got {r}"),
            )),
            _ => Ok(()),
        }
    }
}

/// A neighbor hit: the point id and its Euclidean distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub dist: f64,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    min: [f64; 3],
    max: [f64; 3],
    // u32::MAX marks a leaf; leaves own order[start..end].
    left: u32,
    right: u32,
    start: u32,
    end: u32,
}

/// Immutable kd-tree over a cloud. Construction is single-threaded; all
/// queries are pure reads and safe to issue concurrently.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    points: Vec<Point3<f64>>,
    cfg: NeighborhoodConfig,
    nodes: Vec<Node>,
    order: Vec<u32>,
    root: u32,
}

/// Max-heap entry ordered lexicographically by (squared distance, id), so
/// equal distances resolve to the smaller point id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    d2: f64,
    id: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Builds a spatial index over `cloud` with the given neighborhood config.
pub fn build_index(cloud: &PointCloud, cfg: NeighborhoodConfig) -> Result<NeighborhoodIndex> {
    cfg.validate()?;
    if cloud.len() < 2 {
        return Err(Error::InvalidNeighborhood(
            "neighborhood queries need at least 2 points".into(),
        ));
    }
    Ok(NeighborhoodIndex::build(cloud.points().to_vec(), cfg))
}

impl NeighborhoodIndex {
    fn build(points: Vec<Point3<f64>>, cfg: NeighborhoodConfig) -> Self {
        let mut index = Self {
            order: (0..points.len() as u32).collect(),
            points,
            cfg,
            nodes: Vec::new(),
            root: 0,
        };
        index.nodes.reserve(2 * index.points.len() / LEAF_SIZE + 2);
        index.root = index.build_range(0, index.points.len());
        index
    }

    fn build_range(&mut self, start: usize, end: usize) -> u32 {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &id in &self.order[start..end] {
            let p = self.points[id as usize];
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }

        if end - start <= LEAF_SIZE {
            self.nodes.push(Node {
                min,
                max,
                left: u32::MAX,
                right: u32::MAX,
                start: start as u32,
                end: end as u32,
            });
            return (self.nodes.len() - 1) as u32;
        }

        let mut axis = 0;
        for a in 1..3 {
            if max[a] - min[a] > max[axis] - min[axis] {
                axis = a;
            }
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then_with(|| a.cmp(&b))
        });

        let left = self.build_range(start, mid);
        let right = self.build_range(mid, end);
        self.nodes.push(Node {
            min,
            max,
            left,
            right,
            start: 0,
            end: 0,
        });
        (self.nodes.len() - 1) as u32
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn config(&self) -> NeighborhoodConfig {
        self.cfg
    }

    pub fn point(&self, i: usize) -> Point3<f64> {
        self.points[i]
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    fn check_id(&self, i: usize) -> Result<()> {
        if i >= self.points.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.points.len(),
            });
        }
        Ok(())
    }

    /// The `min(k, N-1)` nearest neighbors of point `i`, excluding `i`,
    /// sorted by ascending distance (ties by ascending id).
    pub fn knn(&self, i: usize, k: usize) -> Result<Vec<Neighbor>> {
        self.check_id(i)?;
        Ok(self.knn_around(self.points[i], k, Some(i)))
    }

    /// Nearest neighbors of an arbitrary query location.
    pub fn knn_around(
        &self,
        query: Point3<f64>,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<Neighbor> {
        let capacity = k.min(self.points.len().saturating_sub(exclude.is_some() as usize));
        if capacity == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(capacity + 1);
        self.knn_visit(self.root, query, exclude, capacity, &mut heap);
        let mut out: Vec<Neighbor> = heap
            .into_iter()
            .map(|e| Neighbor {
                id: e.id as usize,
                dist: e.d2.sqrt(),
            })
            .collect();
        out.sort_by(|a, b| a.dist.total_cmp(&b.dist).then_with(|| a.id.cmp(&b.id)));
        out
    }

    fn knn_visit(
        &self,
        node_id: u32,
        query: Point3<f64>,
        exclude: Option<usize>,
        k: usize,
        heap: &mut BinaryHeap<HeapEntry>,
    ) {
        let node = self.nodes[node_id as usize];
        // Prune on the bounding box, but only strictly: a box at exactly the
        // current worst distance may still hold a smaller id that wins a tie.
        if heap.len() == k {
            let worst = heap.peek().unwrap().d2;
            if bbox_dist2(&node, query) > worst {
                return;
            }
        }

        if node.left == u32::MAX {
            for &id in &self.order[node.start as usize..node.end as usize] {
                if Some(id as usize) == exclude {
                    continue;
                }
                let d2 = (self.points[id as usize] - query).norm_squared();
                let entry = HeapEntry { d2, id };
                if heap.len() < k {
                    heap.push(entry);
                } else if entry < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(entry);
                }
            }
            return;
        }

        let left = self.nodes[node.left as usize];
        let right = self.nodes[node.right as usize];
        let (near, far) = if bbox_dist2(&left, query) <= bbox_dist2(&right, query) {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.knn_visit(near, query, exclude, k, heap);
        self.knn_visit(far, query, exclude, k, heap);
    }

    /// All neighbors of point `i` within `radius` (inclusive), excluding `i`,
    /// sorted by ascending distance (ties by ascending id).
    pub fn within_radius(&self, i: usize, radius: f64) -> Result<Vec<Neighbor>> {
        self.check_id(i)?;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidNeighborhood(format!(
                "radius must be positive and finite, got {radius}"
            )));
        }
        let query = self.points[i];
        let mut out = Vec::new();
        self.radius_visit(self.root, query, Some(i), radius * radius, &mut out);
        out.sort_by(|a, b| a.dist.total_cmp(&b.dist).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    fn radius_visit(
        &self,
        node_id: u32,
        query: Point3<f64>,
        exclude: Option<usize>,
        r2: f64,
        out: &mut Vec<Neighbor>,
    ) {
        let node = self.nodes[node_id as usize];
        if bbox_dist2(&node, query) > r2 {
            return;
        }
        if node.left == u32::MAX {
            for &id in &self.order[node.start as usize..node.end as usize] {
                if Some(id as usize) == exclude {
                    continue;
                }
                let d2 = (self.points[id as usize] - query).norm_squared();
                if d2 <= r2 {
                    out.push(Neighbor {
                        id: id as usize,
                        dist: d2.sqrt(),
                    });
                }
            }
            return;
        }
        self.radius_visit(node.left, query, exclude, r2, out);
        self.radius_visit(node.right, query, exclude, r2, out);
    }

    /// Neighbors of `i` under the index's own config (kNN preferred).
    pub fn neighbors(&self, i: usize) -> Result<Vec<Neighbor>> {
        match (self.cfg.k, self.cfg.radius) {
            (Some(k), _) => self.knn(i, k),
            (None, Some(r)) => self.within_radius(i, r),
            (None, None) => unreachable!("validated at build"),
        }
    }
}

fn bbox_dist2(node: &Node, q: Point3<f64>) -> f64 {
    let mut d2 = 0.0;
    for a in 0..3 {
        let v = q[a];
        if v < node.min[a] {
            d2 += (node.min[a] - v) * (node.min[a] - v);
        } else if v > node.max[a] {
            d2 += (v - node.max[a]) * (v - node.max[a]);
        }
    }
    d2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive-scan reference: all other points sorted by (distance, id).
    fn brute_force(points: &[Point3<f64>], i: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, p)| Neighbor {
                id: j,
                dist: (p - points[i]).norm(),
            })
            .collect();
        all.sort_by(|a, b| a.dist.total_cmp(&b.dist).then_with(|| a.id.cmp(&b.id)));
        all
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn knn_on_three_collinear_points() {
        let cloud =
            PointCloud::from_coords(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let index = build_index(&cloud, NeighborhoodConfig::knn(2)).unwrap();
        let one = index.knn(0, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].id, 1);
        let two = index.knn(0, 2).unwrap();
        assert_eq!(two.iter().map(|n| n.id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn knn_matches_brute_force_on_random_cloud() {
        let cloud = random_cloud(1000, 7);
        let index = build_index(&cloud, NeighborhoodConfig::knn(8)).unwrap();
        for i in (0..cloud.len()).step_by(13) {
            for k in [1, 5, 17] {
                let got = index.knn(i, k).unwrap();
                let want = &brute_force(cloud.points(), i)[..k.min(cloud.len() - 1)];
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(want) {
                    assert_eq!(g.id, w.id, "point {i}, k {k}");
                    assert!((g.dist - w.dist).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn knn_k_exceeding_cloud_returns_all_others() {
        let cloud = random_cloud(20, 3);
        let index = build_index(&cloud, NeighborhoodConfig::knn(4)).unwrap();
        let got = index.knn(5, 19).unwrap();
        assert_eq!(got.len(), 19);
        assert!(got.iter().all(|n| n.id != 5));
        let got_more = index.knn(5, 100).unwrap();
        assert_eq!(got_more.len(), 19);
    }

    #[test]
    fn grid_interior_knn4_is_axis_neighbors() {
        // 5x5 grid on z=0; interior point (2,2) has its 4 axis-adjacent
        // points at distance 1.
        let mut coords = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                coords.push([x as f64, y as f64, 0.0]);
            }
        }
        let cloud = PointCloud::from_coords(&coords).unwrap();
        let index = build_index(&cloud, NeighborhoodConfig::knn(4)).unwrap();
        let center = 2 * 5 + 2;
        let mut ids: Vec<usize> = index.knn(center, 4).unwrap().iter().map(|n| n.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![center - 5, center - 1, center + 1, center + 5]);
    }

    #[test]
    fn duplicate_points_tie_break_by_smaller_id() {
        let cloud = PointCloud::from_coords(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
        ])
        .unwrap();
        let index = build_index(&cloud, NeighborhoodConfig::knn(4)).unwrap();
        let got = index.knn(0, 2).unwrap();
        assert_eq!(got.iter().map(|n| n.id).collect::<Vec<_>>(), vec![1, 2]);
        // A duplicate queries its own location: itself excluded, co-located
        // ids first.
        let got = index.knn(2, 2).unwrap();
        assert_eq!(got.iter().map(|n| n.id).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn radius_query_matches_brute_force() {
        let cloud = random_cloud(400, 11);
        let index = build_index(&cloud, NeighborhoodConfig::radius(0.4)).unwrap();
        for i in (0..cloud.len()).step_by(29) {
            let got = index.within_radius(i, 0.4).unwrap();
            let want: Vec<Neighbor> = brute_force(cloud.points(), i)
                .into_iter()
                .take_while(|n| n.dist <= 0.4)
                .collect();
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.id, w.id);
            }
        }
    }

    #[test]
    fn out_of_range_query_is_an_error() {
        let cloud = random_cloud(10, 2);
        let index = build_index(&cloud, NeighborhoodConfig::knn(2)).unwrap();
        assert!(matches!(
            index.knn(10, 2),
            Err(Error::IndexOutOfRange { index: 10, len: 10 })
        ));
    }

    #[test]
    fn config_validation() {
        let cloud = random_cloud(10, 2);
        assert!(build_index(
            &cloud,
            NeighborhoodConfig {
                k: None,
                radius: None
            }
        )
        .is_err());
        assert!(build_index(&cloud, NeighborhoodConfig::knn(0)).is_err());
        assert!(build_index(&cloud, NeighborhoodConfig::radius(-1.0)).is_err());
        let single = PointCloud::from_coords(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(build_index(&single, NeighborhoodConfig::knn(1)).is_err());
    }
}
