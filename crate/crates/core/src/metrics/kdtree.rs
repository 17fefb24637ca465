//! A static k-d tree over a flat row-major point array.
//!
//! Besides k-nearest-neighbor distances it answers "does any stored ball
//! contain this point" when every stored point carries its own radius, which
//! is what the precision/recall estimator needs.

use std::collections::BinaryHeap;

const LEAF: usize = 16;

#[derive(Clone, Debug)]
struct Node {
    lo: Vec<f64>,
    hi: Vec<f64>,
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
    /// Largest ball radius among points below this node.
    max_r: f64,
}

pub struct KdTree<'a> {
    pts: &'a [f64],
    dim: usize,
    idx: Vec<usize>,
    nodes: Vec<Node>,
    radii: Vec<f64>,
}

/// Total order wrapper so squared distances can sit in a heap.
#[derive(Clone, Copy, PartialEq)]
struct D2(f64);

impl Eq for D2 {}

impl PartialOrd for D2 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for D2 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<'a> KdTree<'a> {
    /// `pts` holds `pts.len() / dim` points; it must be non-empty.
    pub fn build(pts: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && !pts.is_empty() && pts.len().is_multiple_of(dim));
        let n = pts.len() / dim;
        let mut tree = KdTree {
            pts,
            dim,
            idx: (0..n).collect(),
            nodes: Vec::new(),
            radii: Vec::new(),
        };
        tree.build_node(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.pts[i * self.dim..(i + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let d = self.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for &i in &self.idx[start..end] {
            for (j, v) in self.pts[i * d..(i + 1) * d].iter().enumerate() {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo: lo.clone(),
            hi: hi.clone(),
            start,
            end,
            children: None,
            max_r: 0.0,
        });
        if end - start > LEAF {
            let axis = (0..d)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .expect("dim > 0");
            let mid = start + (end - start) / 2;
            let pts = self.pts;
            self.idx[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                pts[a * d + axis].total_cmp(&pts[b * d + axis])
            });
            let l = self.build_node(start, mid);
            let r = self.build_node(mid, end);
            self.nodes[id].children = Some((l, r));
        }
        id
    }

    fn box_sq_dist(&self, node: usize, q: &[f64]) -> f64 {
        let n = &self.nodes[node];
        q.iter()
            .enumerate()
            .map(|(j, &v)| {
                let gap = (n.lo[j] - v).max(v - n.hi[j]).max(0.0);
                gap * gap
            })
            .sum()
    }

    /// Distance from `q` to its `k`-th nearest stored point, skipping the
    /// stored point with index `exclude`.
    pub fn kth_distance(&self, q: &[f64], k: usize, exclude: Option<usize>) -> f64 {
        assert!(k > 0);
        let mut heap: BinaryHeap<D2> = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, q, k, exclude, &mut heap);
        heap.peek().map_or(f64::INFINITY, |d| d.0.sqrt())
    }

    fn knn_rec(&self, node: usize, q: &[f64], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<D2>) {
        if heap.len() == k && self.box_sq_dist(node, q) > heap.peek().expect("full").0 {
            return;
        }
        let n = &self.nodes[node];
        match n.children {
            None => {
                for &i in &self.idx[n.start..n.end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let d = sq_dist(self.point(i), q);
                    if heap.len() < k {
                        heap.push(D2(d));
                    } else if d < heap.peek().expect("full").0 {
                        heap.pop();
                        heap.push(D2(d));
                    }
                }
            }
            Some((l, r)) => {
                let (a, b) = if self.box_sq_dist(l, q) <= self.box_sq_dist(r, q) {
                    (l, r)
                } else {
                    (r, l)
                };
                self.knn_rec(a, q, k, exclude, heap);
                self.knn_rec(b, q, k, exclude, heap);
            }
        }
    }

    /// Attach a radius to every stored point, by original index.
    pub fn set_radii(&mut self, radii: Vec<f64>) {
        assert_eq!(radii.len(), self.len());
        self.radii = radii;
        for id in (0..self.nodes.len()).rev() {
            // children are always created after their parent
            let m = match self.nodes[id].children {
                Some((l, r)) => self.nodes[l].max_r.max(self.nodes[r].max_r),
                None => {
                    let n = &self.nodes[id];
                    self.idx[n.start..n.end]
                        .iter()
                        .map(|&i| self.radii[i])
                        .fold(0.0, f64::max)
                }
            };
            self.nodes[id].max_r = m;
        }
    }

    /// Whether `q` lies in the closed ball of some stored point.
    pub fn covered(&self, q: &[f64]) -> bool {
        assert!(!self.radii.is_empty(), "set_radii first");
        self.covered_rec(0, q)
    }

    fn covered_rec(&self, node: usize, q: &[f64]) -> bool {
        let n = &self.nodes[node];
        if self.box_sq_dist(node, q) > n.max_r * n.max_r {
            return false;
        }
        match n.children {
            None => self.idx[n.start..n.end].iter().any(|&i| {
                let r = self.radii[i];
                sq_dist(self.point(i), q) <= r * r
            }),
            Some((l, r)) => self.covered_rec(l, q) || self.covered_rec(r, q),
        }
    }
}
