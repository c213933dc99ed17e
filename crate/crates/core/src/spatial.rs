//! Point sets and an exact k-d tree for fixed-radius neighbor queries.

use crate::error::{Result, TvError};
use crate::tensor::{Point, Scale, SymTensor};

/// Points of a common dimension, optionally with one input tensor per point.
#[derive(Debug, Clone)]
pub struct PointSet {
    points: Vec<Point>,
    tensors: Option<Vec<SymTensor>>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let d = points.first().ok_or_else(|| TvError::InvalidInput("point set is empty".into()))?.dim();
        if let Some(bad) = points.iter().find(|p| p.dim() != d) {
            return Err(TvError::DimensionMismatch { expected: d, got: bad.dim() });
        }
        Ok(Self { points, tensors: None })
    }

    pub fn with_tensors(points: Vec<Point>, tensors: Vec<SymTensor>) -> Result<Self> {
        let mut set = Self::new(points)?;
        if tensors.len() != set.len() {
            return Err(TvError::InvalidInput(format!(
                "{} tensors for {} points",
                tensors.len(),
                set.len()
            )));
        }
        if let Some(bad) = tensors.iter().find(|t| t.dim() != set.dim()) {
            return Err(TvError::DimensionMismatch { expected: set.dim(), got: bad.dim() });
        }
        set.tensors = Some(tensors);
        Ok(set)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point::new(r.clone())).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    pub fn tensors(&self) -> Option<&[SymTensor]> {
        self.tensors.as_deref()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

const LEAF_SIZE: usize = 8;

/// Immutable k-d tree answering exact radius queries.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    coords: Vec<f64>,
    dim: usize,
    order: Vec<usize>,
    root: Node,
    radius: f64,
}

impl NeighborIndex {
    /// Index with the default radius `3.72 sqrt(sigma_d)`.
    pub fn build(ps: &PointSet, scale: &Scale) -> Self {
        Self::with_radius(ps, scale.prune_radius())
    }

    pub fn with_radius(ps: &PointSet, radius: f64) -> Self {
        let dim = ps.dim();
        let coords: Vec<f64> = ps.points().iter().flat_map(|p| p.as_slice().iter().copied()).collect();
        let mut order: Vec<usize> = (0..ps.len()).collect();
        let root = build_node(&coords, dim, &mut order, 0, ps.len());
        Self { coords, dim, order, root, radius }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Indices `j != i` with `|x_i - x_j| <= radius`, ascending.
    pub fn neighbors(&self, i: usize, radius_override: Option<f64>) -> Vec<usize> {
        let q = self.coord(i).to_vec();
        let mut out = self.within(&q, radius_override.unwrap_or(self.radius));
        out.retain(|&j| j != i);
        out
    }

    /// Indices of all points within `radius` of `q`, ascending.
    pub fn within(&self, q: &[f64], radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        self.search(&self.root, q, r2, &mut out);
        out.sort_unstable();
        out
    }

    fn search(&self, node: &Node, q: &[f64], r2: f64, out: &mut Vec<usize>) {
        match node {
            Node::Leaf { start, end } => {
                for &j in &self.order[*start..*end] {
                    let d2: f64 = self.coord(j).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 <= r2 {
                        out.push(j);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[*axis] - value;
                let (near, far) = if delta <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, r2, out);
                if delta * delta <= r2 {
                    self.search(far, q, r2, out);
                }
            }
        }
    }
}

fn build_node(coords: &[f64], dim: usize, order: &mut [usize], start: usize, end: usize) -> Node {
    if end - start <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    let slice = &mut order[start..end];
    let axis = (0..dim)
        .max_by(|&a, &b| spread(coords, dim, slice, a).total_cmp(&spread(coords, dim, slice, b)))
        .unwrap_or(0);
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        coords[a * dim + axis].total_cmp(&coords[b * dim + axis]).then(a.cmp(&b))
    });
    let value = coords[slice[mid] * dim + axis];
    // Left holds coordinates <= value, right holds >= value, so ties may sit on both sides.
    let left = build_node(coords, dim, order, start, start + mid);
    let right = build_node(coords, dim, order, start + mid, end);
    Node::Split { axis, value, left: Box::new(left), right: Box::new(right) }
}

fn spread(coords: &[f64], dim: usize, idx: &[usize], axis: usize) -> f64 {
    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        let x = coords[i * dim + axis];
        (lo.min(x), hi.max(x))
    });
    hi - lo
}
