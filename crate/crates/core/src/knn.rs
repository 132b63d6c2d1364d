//! Exact k-nearest-neighbor tables under the Euclidean metric.
//!
//! Neighbors are ranked by `(squared distance, index)`, so ties are resolved
//! toward the lower sample index and every search path returns the same table.
//! The query point itself is never its own neighbor.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// k nearest neighbors of every point of a sample, ascending by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    k: usize,
    len: usize,
    indices: Vec<u32>,
    sq_dist: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    sq_dist: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq_dist
            .total_cmp(&other.sq_dist)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
fn sq_dist(points: &[f64], dim: usize, i: usize, j: usize) -> f64 {
    let a = &points[i * dim..(i + 1) * dim];
    let b = &points[j * dim..(j + 1) * dim];
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn validate(points: &[f64], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::invalid("point dimension must be at least 1"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if !points.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: points.len() % dim,
        });
    }
    if let Some(bad) = points.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite coordinate at sample {}",
            bad / dim
        )));
    }
    let n = points.len() / dim;
    if n <= k {
        return Err(Error::InsufficientSamples { k, got: n });
    }
    if n > u32::MAX as usize {
        return Err(Error::invalid("too many samples for a neighbor table"));
    }
    Ok(n)
}

const LEAF_SIZE: usize = 12;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

struct KdTree<'a> {
    points: &'a [f64],
    dim: usize,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    fn new(points: &'a [f64], dim: usize, n: usize) -> Self {
        let mut tree = Self {
            points,
            dim,
            order: (0..n as u32).collect(),
            nodes: Vec::new(),
        };
        tree.split(0, n);
        tree
    }

    fn coord(&self, i: u32, axis: usize) -> f64 {
        self.points[i as usize * self.dim + axis]
    }

    fn split(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // widest axis
        let axis = (0..self.dim)
            .map(|a| {
                let (lo, hi) = self.order[start..end].iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), &i| {
                        let v = self.coord(i, a);
                        (lo.min(v), hi.max(v))
                    },
                );
                (a, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        let mid = start + (end - start) / 2;
        let (points, dim) = (self.points, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize * dim + axis]
                .total_cmp(&points[b as usize * dim + axis])
                .then(a.cmp(&b))
        });
        let value = self.coord(self.order[mid], axis);
        self.nodes.push(Node::Leaf { start, end });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn search(&self, node: usize, query: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &j in &self.order[start..end] {
                    if j as usize == query {
                        continue;
                    }
                    let c = Candidate {
                        sq_dist: sq_dist(self.points, self.dim, query, j as usize),
                        index: j,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // left holds coordinates <= value, right >= value
                let diff = self.points[query * self.dim + axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap);
                let bound = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().expect("heap is full").sq_dist
                };
                if diff * diff <= bound {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

impl NeighborTable {
    /// Exact search over `points` (row-major, `dim` columns) with a kd-tree.
    ///
    /// A subtree is skipped only when its splitting plane is strictly farther
    /// than the current k-th candidate, so the result is identical to
    /// [`NeighborTable::brute_force`], ties included.
    pub fn build(points: &[f64], dim: usize, k: usize) -> Result<Self> {
        let n = validate(points, dim, k)?;
        let tree = KdTree::new(points, dim, n);
        let rows: Vec<Vec<Candidate>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut heap = BinaryHeap::with_capacity(k + 1);
                tree.search(0, i, k, &mut heap);
                heap.into_sorted_vec()
            })
            .collect();
        Ok(Self::from_rows(k, n, rows))
    }

    /// Reference O(n^2) search.
    pub fn brute_force(points: &[f64], dim: usize, k: usize) -> Result<Self> {
        let n = validate(points, dim, k)?;
        let rows: Vec<Vec<Candidate>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut all: Vec<Candidate> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| Candidate {
                        sq_dist: sq_dist(points, dim, i, j),
                        index: j as u32,
                    })
                    .collect();
                all.select_nth_unstable(k - 1);
                all.truncate(k);
                all.sort();
                all
            })
            .collect();
        Ok(Self::from_rows(k, n, rows))
    }

    fn from_rows(k: usize, len: usize, rows: Vec<Vec<Candidate>>) -> Self {
        let mut indices = Vec::with_capacity(len * k);
        let mut sq_dist = Vec::with_capacity(len * k);
        for row in rows {
            debug_assert_eq!(row.len(), k);
            for c in row {
                indices.push(c.index);
                sq_dist.push(c.sq_dist);
            }
        }
        Self {
            k,
            len,
            indices,
            sq_dist,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Indices of the k nearest neighbors of point `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Euclidean distance from point `i` to its k-th nearest neighbor.
    pub fn kth_distance(&self, i: usize) -> f64 {
        self.sq_dist[(i + 1) * self.k - 1].sqrt()
    }
}
