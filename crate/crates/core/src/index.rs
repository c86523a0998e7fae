//! Static KD-tree for nearest-neighbor and radius queries.
//!
//! Every query returns exactly what a linear scan would: candidates are
//! ordered by squared distance, ties going to the lowest point index.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

const LEAF_SIZE: usize = 12;

/// One query result: index into the indexed cloud and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn better(d2: f64, idx: usize, best_d2: f64, best_idx: usize) -> bool {
    d2 < best_d2 || (d2 == best_d2 && idx < best_idx)
}

impl NeighborIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn nearest(&self, query: &Point3) -> Neighbor {
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(0, query, &mut best);
        Neighbor {
            index: best.1,
            distance: best.0.sqrt(),
        }
    }

    fn nearest_in(&self, node: usize, q: &Point3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = dist2(&self.points[i], q);
                    if better(d2, i, best.0, best.1) {
                        *best = (d2, i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` closest points, nearest first.
    pub fn k_nearest(&self, query: &Point3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        // Sorted ascending by (d2, index); small k keeps insertion cheap.
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_in(0, query, k, &mut heap);
        heap.into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    fn knn_in(&self, node: usize, q: &Point3, k: usize, heap: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = dist2(&self.points[i], q);
                    if heap.len() == k {
                        let (wd, wi) = heap[k - 1];
                        if !better(d2, i, wd, wi) {
                            continue;
                        }
                        heap.pop();
                    }
                    let pos = heap.partition_point(|&(hd, hi)| better(hd, hi, d2, i));
                    heap.insert(pos, (d2, i));
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_in(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap[k - 1].0 {
                    self.knn_in(far, q, k, heap);
                }
            }
        }
    }

    /// All points with distance `<= radius`, in increasing index order.
    pub fn within_radius(&self, query: &Point3, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if radius.is_nan() || radius < 0.0 {
            return out;
        }
        let r2 = radius * radius;
        self.radius_in(0, query, r2, &mut out);
        out.sort_unstable_by_key(|n| n.index);
        out.iter_mut().for_each(|n| n.distance = n.distance.sqrt());
        out
    }

    fn radius_in(&self, node: usize, q: &Point3, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = dist2(&self.points[i], q);
                    if d2 <= r2 {
                        // Holds the squared distance until the caller finishes.
                        out.push(Neighbor {
                            index: i,
                            distance: d2,
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_in(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_in(far, q, r2, out);
                }
            }
        }
    }

    /// Nearest neighbor of every query, in query order. Runs on the current
    /// rayon pool; results do not depend on the thread count.
    pub fn nearest_batch(&self, queries: &[Point3]) -> Vec<Neighbor> {
        queries.par_iter().map(|q| self.nearest(q)).collect()
    }
}

/// Median nearest-neighbor distance (excluding the point itself); the cloud's
/// characteristic spacing.
pub fn median_spacing(index: &NeighborIndex) -> f64 {
    if index.len() < 2 {
        return 0.0;
    }
    let mut d: Vec<f64> = index
        .points()
        .par_iter()
        .map(|p| index.k_nearest(p, 2)[1].distance)
        .collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn nearest_of_two() {
        let idx = NeighborIndex::build(&cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])).unwrap();
        let n = idx.nearest(&Point3::new(1.0, 0.0, 0.0));
        assert_eq!(n.index, 0);
        assert_eq!(n.distance, 1.0);
    }

    #[test]
    fn singleton() {
        let idx = NeighborIndex::build(&cloud(&[[3.0, 4.0, 5.0]])).unwrap();
        assert_eq!(idx.nearest(&Point3::new(-100.0, 7.0, 1e6)).index, 0);
        assert_eq!(idx.k_nearest(&Point3::origin(), 5).len(), 1);
    }

    #[test]
    fn empty_cloud_rejected() {
        let err = NeighborIndex::build(&PointCloud::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty cloud");
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // Many duplicates straddling split planes.
        let pts: Vec<[f64; 3]> = (0..100).map(|i| [(i % 3) as f64, 0.0, 0.0]).collect();
        let idx = NeighborIndex::build(&cloud(&pts)).unwrap();
        assert_eq!(idx.nearest(&Point3::new(1.0, 0.0, 0.0)).index, 1);
        assert_eq!(idx.nearest(&Point3::new(0.5, 0.0, 0.0)).index, 0);
        let knn = idx.k_nearest(&Point3::new(2.0, 0.0, 0.0), 3);
        assert_eq!(knn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![2, 5, 8]);
    }

    #[test]
    fn radius_sorted_by_index() {
        let pts: Vec<[f64; 3]> = (0..50).map(|i| [((i * 7) % 50) as f64, 0.0, 0.0]).collect();
        let idx = NeighborIndex::build(&cloud(&pts)).unwrap();
        let hits = idx.within_radius(&Point3::new(10.0, 0.0, 0.0), 2.0);
        let ids: Vec<_> = hits.iter().map(|n| n.index).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert_eq!(ids.len(), 5);
        assert!(hits.iter().all(|n| n.distance <= 2.0));
    }

    #[test]
    fn spacing_of_grid() {
        let pts: Vec<[f64; 3]> = (0..100)
            .map(|i| [(i % 10) as f64 * 1.5, (i / 10) as f64 * 1.5, 0.0])
            .collect();
        let idx = NeighborIndex::build(&cloud(&pts)).unwrap();
        assert!((median_spacing(&idx) - 1.5).abs() < 1e-12);
    }
}
