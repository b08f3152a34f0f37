//! Exact kd-tree over flattened d-dimensional points.
//!
//! Median split on the widest axis, bucket leaves, branch-and-bound descent
//! with conservative pruning: a subtree is skipped only when no point inside
//! it can beat the current candidate set, so answers are exact, never
//! approximate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::scalar::{cmp_scores, Scalar};

const LEAF_SIZE: usize = 16;

#[derive(Clone, Copy)]
enum Node<S> {
    /// Children: left at `self + 1`, right at `right`.
    Split { axis: u16, value: S, right: u32 },
    Leaf { start: u32, len: u32 },
}

pub(crate) struct FlatKdTree<S> {
    dim: usize,
    nodes: Vec<Node<S>>,
    /// Stored coordinates, reordered during the build; `dim` per point.
    points: Vec<S>,
    /// Original index of each stored point.
    indices: Vec<u32>,
}

/// Max-heap entry ordered by (squared distance, original index), worst first.
struct HeapItem<S> {
    d2: S,
    index: u32,
}

impl<S: Scalar> PartialEq for HeapItem<S> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<S: Scalar> Eq for HeapItem<S> {}
impl<S: Scalar> PartialOrd for HeapItem<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Scalar> Ord for HeapItem<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_scores(self.d2, other.d2).then(self.index.cmp(&other.index))
    }
}

impl<S: Scalar> FlatKdTree<S> {
    /// Builds a tree over `data`, a flattened `n * dim` coordinate array.
    /// Construction is deterministic for a fixed input.
    pub fn build(dim: usize, data: &[S]) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        assert!(dim <= u16::MAX as usize, "dimension exceeds tree limit");
        assert_eq!(data.len() % dim, 0, "data length must be a multiple of dim");
        let n = data.len() / dim;
        assert!(n >= 1, "cannot index an empty point set");
        assert!(n <= u32::MAX as usize, "point count exceeds tree limit");

        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut tree = FlatKdTree {
            dim,
            nodes: Vec::new(),
            points: Vec::with_capacity(data.len()),
            indices: Vec::with_capacity(n),
        };
        tree.build_node(data, &mut order);
        tree
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    fn push_leaf(&mut self, data: &[S], order: &[u32]) {
        let start = self.indices.len() as u32;
        for &i in order {
            let base = i as usize * self.dim;
            self.points.extend_from_slice(&data[base..base + self.dim]);
            self.indices.push(i);
        }
        self.nodes.push(Node::Leaf {
            start,
            len: order.len() as u32,
        });
    }

    fn build_node(&mut self, data: &[S], order: &mut [u32]) -> usize {
        let pos = self.nodes.len();
        if order.len() <= LEAF_SIZE {
            self.push_leaf(data, order);
            return pos;
        }

        // Widest axis of the bounding box; ties go to the lowest axis.
        let dim = self.dim;
        let mut min = vec![S::infinity(); dim];
        let mut max = vec![S::neg_infinity(); dim];
        for &i in order.iter() {
            let base = i as usize * dim;
            for (axis, v) in data[base..base + dim].iter().enumerate() {
                if *v < min[axis] {
                    min[axis] = *v;
                }
                if *v > max[axis] {
                    max[axis] = *v;
                }
            }
        }
        let mut axis = 0;
        let mut widest = max[0] - min[0];
        for a in 1..dim {
            let w = max[a] - min[a];
            if w > widest {
                widest = w;
                axis = a;
            }
        }
        if widest == S::zero() {
            // All points coincide; no split can separate them.
            self.push_leaf(data, order);
            return pos;
        }

        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            cmp_scores(
                data[a as usize * dim + axis],
                data[b as usize * dim + axis],
            )
        });
        let value = data[order[mid] as usize * dim + axis];
        self.nodes.push(Node::Split {
            axis: axis as u16,
            value,
            right: 0,
        });

        let (left, right) = order.split_at_mut(mid);
        let left_pos = self.build_node(data, left);
        debug_assert_eq!(left_pos, pos + 1);
        let right_pos = self.build_node(data, right);
        if let Node::Split { right, .. } = &mut self.nodes[pos] {
            *right = right_pos as u32;
        }
        pos
    }

    #[inline]
    fn stored_dist_sq(&self, slot: usize, query: &[S]) -> S {
        let base = slot * self.dim;
        let mut acc = S::zero();
        for (a, q) in query.iter().enumerate() {
            let diff = self.points[base + a] - *q;
            acc += diff * diff;
        }
        acc
    }

    /// Exact squared distance from `query` to its nearest stored point.
    pub fn nearest_sq(&self, query: &[S]) -> S {
        debug_assert_eq!(query.len(), self.dim);
        let mut best = S::infinity();
        self.nearest_rec(0, query, &mut best);
        best
    }

    fn nearest_rec(&self, node: usize, query: &[S], best: &mut S) {
        match self.nodes[node] {
            Node::Leaf { start, len } => {
                for slot in start..start + len {
                    let d2 = self.stored_dist_sq(slot as usize, query);
                    if d2 < *best {
                        *best = d2;
                    }
                }
            }
            Node::Split { axis, value, right } => {
                let diff = query[axis as usize] - value;
                let (near, far) = if diff < S::zero() {
                    (node + 1, right as usize)
                } else {
                    (right as usize, node + 1)
                };
                self.nearest_rec(near, query, best);
                // Every point beyond the plane is at least |diff| away.
                if diff * diff < *best {
                    self.nearest_rec(far, query, best);
                }
            }
        }
    }

    /// Exact k nearest stored points, ascending by (squared distance,
    /// original index).
    pub fn knn(&self, query: &[S], k: usize) -> Vec<(S, u32)> {
        debug_assert_eq!(query.len(), self.dim);
        assert!(k >= 1, "k must be at least 1");
        let mut heap: BinaryHeap<HeapItem<S>> = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, query, k, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|item| (item.d2, item.index))
            .collect()
    }

    fn knn_rec(&self, node: usize, query: &[S], k: usize, heap: &mut BinaryHeap<HeapItem<S>>) {
        match self.nodes[node] {
            Node::Leaf { start, len } => {
                for slot in start..start + len {
                    let item = HeapItem {
                        d2: self.stored_dist_sq(slot as usize, query),
                        index: self.indices[slot as usize],
                    };
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().expect("heap non-empty") {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Node::Split { axis, value, right } => {
                let diff = query[axis as usize] - value;
                let (near, far) = if diff < S::zero() {
                    (node + 1, right as usize)
                } else {
                    (right as usize, node + 1)
                };
                self.knn_rec(near, query, k, heap);
                // The far side can still matter on an exact tie: an equal
                // distance with a lower original index wins, so prune only
                // on a strict bound violation.
                let visit_far = match heap.peek() {
                    Some(worst) if heap.len() == k => diff * diff <= worst.d2,
                    _ => true,
                };
                if visit_far {
                    self.knn_rec(far, query, k, heap);
                }
            }
        }
    }
}
