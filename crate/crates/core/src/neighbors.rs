//! Exact k-nearest-neighbour search.
//!
//! Results are ordered by `(squared distance, index)` so that ties are always
//! broken towards the smaller point index. Below [`KD_TREE_MIN_POINTS`] points
//! a linear scan is used; above it a kd-tree with the same ordering contract.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::dataset::Dataset;

/// Dataset size from which [`NeighborIndex::build`] switches to a kd-tree.
pub const KD_TREE_MIN_POINTS: usize = 4096;

const LEAF_SIZE: usize = 16;

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// A neighbour candidate; ordered by squared distance then index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub sq_dist: f64,
    pub index: usize,
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq_dist
            .total_cmp(&other.sq_dist)
            .then(self.index.cmp(&other.index))
    }
}

/// Bounded max-heap keeping the `k` smallest candidates.
struct Knn {
    k: usize,
    heap: BinaryHeap<Neighbor>,
}

impl Knn {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, cand: Neighbor) {
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if let Some(top) = self.heap.peek() {
            if cand < *top {
                self.heap.pop();
                self.heap.push(cand);
            }
        }
    }

    /// Squared radius beyond which nothing can enter the result.
    #[inline]
    fn bound(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map_or(f64::INFINITY, |n| n.sq_dist)
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec()
    }
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
struct KdTree {
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    fn build(data: &Dataset) -> Self {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut nodes = Vec::new();
        Self::build_node(data, &mut order, 0, data.len(), &mut nodes);
        Self { order, nodes }
    }

    fn build_node(
        data: &Dataset,
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let id = nodes.len();
        if end - start <= LEAF_SIZE {
            nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the axis of largest spread
        let dim = data.dim();
        let mut best_axis = 0;
        let mut best_spread = -1.0;
        for axis in 0..dim {
            let (lo, hi) = order[start..end]
                .iter()
                .map(|&i| data.point(i)[axis])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_axis = axis;
            }
        }
        if best_spread <= 0.0 {
            nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data.point(a)[best_axis].total_cmp(&data.point(b)[best_axis])
        });
        let value = data.point(order[mid])[best_axis];
        nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = Self::build_node(data, order, start, mid, nodes);
        let right = Self::build_node(data, order, mid, end, nodes);
        nodes[id] = Node::Split {
            axis: best_axis,
            value,
            left,
            right,
        };
        id
    }

    fn search(&self, data: &Dataset, node: usize, q: &[f64], skip: &[usize], acc: &mut Knn) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if skip.contains(&i) {
                        continue;
                    }
                    acc.push(Neighbor {
                        sq_dist: sq_dist(q, data.point(i)),
                        index: i,
                    });
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
                self.search(data, near, q, skip, acc);
                // equality must still be visited: a tie may carry a smaller index
                if diff * diff <= acc.bound() {
                    self.search(data, far, q, skip, acc);
                }
            }
        }
    }
}

/// Exact kNN index over a dataset.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    tree: Option<KdTree>,
}

impl NeighborIndex {
    pub fn build(data: &Dataset) -> Self {
        Self::with_strategy(data, data.len() >= KD_TREE_MIN_POINTS)
    }

    pub fn with_strategy(data: &Dataset, use_tree: bool) -> Self {
        Self {
            tree: use_tree.then(|| KdTree::build(data)),
        }
    }

    pub fn uses_tree(&self) -> bool {
        self.tree.is_some()
    }

    /// The `k` nearest dataset points to `q`, skipping indices in `skip`,
    /// sorted ascending by `(distance, index)`.
    pub fn knn(&self, data: &Dataset, q: &[f64], k: usize, skip: &[usize]) -> Vec<Neighbor> {
        let mut acc = Knn::new(k);
        match &self.tree {
            Some(tree) if !tree.nodes.is_empty() => tree.search(data, 0, q, skip, &mut acc),
            _ => {
                for (i, p) in data.points().enumerate() {
                    if skip.contains(&i) {
                        continue;
                    }
                    acc.push(Neighbor {
                        sq_dist: sq_dist(q, p),
                        index: i,
                    });
                }
            }
        }
        acc.into_sorted()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::sample_gaussian;

    fn brute(data: &Dataset, q: &[f64], k: usize, skip: &[usize]) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = data
            .points()
            .enumerate()
            .filter(|(i, _)| !skip.contains(i))
            .map(|(i, p)| (sq_dist(q, p), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn tree_matches_scan_on_gaussian() {
        let data = sample_gaussian(3000, 3, 4).unwrap();
        let tree = NeighborIndex::with_strategy(&data, true);
        let scan = NeighborIndex::with_strategy(&data, false);
        let queries = sample_gaussian(50, 3, 9).unwrap();
        for q in queries.points() {
            let a: Vec<_> = tree.knn(&data, q, 7, &[3]).iter().map(|n| n.index).collect();
            let b: Vec<_> = scan.knn(&data, q, 7, &[3]).iter().map(|n| n.index).collect();
            assert_eq!(a, b);
            assert_eq!(a, brute(&data, q, 7, &[3]));
        }
    }

    #[test]
    fn tree_respects_index_tie_break_on_grid() {
        let mut rows = Vec::new();
        for x in 0..40 {
            for y in 0..40 {
                rows.push(vec![x as f64, y as f64]);
            }
        }
        // duplicates too
        rows.extend((0..30).map(|i| vec![(i % 5) as f64, 3.0]));
        let data = Dataset::from_rows(&rows).unwrap();
        let tree = NeighborIndex::with_strategy(&data, true);
        for q in [[3.0, 3.0], [2.5, 2.5], [10.0, 0.0], [39.5, 20.0]] {
            for k in [1, 4, 9, 13] {
                let a: Vec<_> = tree.knn(&data, &q, k, &[]).iter().map(|n| n.index).collect();
                assert_eq!(a, brute(&data, &q, k, &[]), "q={q:?} k={k}");
            }
        }
    }

    #[test]
    fn crossover_selects_tree() {
        assert!(!NeighborIndex::build(&sample_gaussian(100, 2, 1).unwrap()).uses_tree());
        assert!(NeighborIndex::build(&sample_gaussian(KD_TREE_MIN_POINTS, 2, 1).unwrap()).uses_tree());
    }
}
