//! Brute-force discrete tensor votes and classic voting fields.
//!
//! The input tensor `K` is expanded into a dense set of stick tensors. Unit
//! directions `u_k` with quadrature weights `w_k` satisfy `sum_k w_k u_k u_k^T = I`,
//! so the vectors `p_k = K^{1/2} u_k` satisfy `sum_k w_k p_k p_k^T = K`. Each
//! `p_k = tau_k n_k` then votes along its osculating arc with decay
//! `c (1 - (r^T n_k)^2)`, and the votes are summed.

use std::collections::HashMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TvError};
use crate::tensor::{check_dim, Decompose, Point, Saliency, Scale, SymTensor, VoteFrame};

/// Fewer directions per angular degree of freedom than this produce a warning.
pub const MIN_SAMPLES: usize = 16;

/// Unit directions on a half-circle or hemisphere, with quadrature weights.
#[derive(Debug, Clone)]
pub struct DirectionSampling {
    dim: usize,
    directions: Vec<DVector<f64>>,
    weight: f64,
    coarse: bool,
}

impl DirectionSampling {
    /// `u` directions evenly spaced on `[0, pi)`.
    pub fn circle(u: usize) -> Result<Self> {
        if u == 0 {
            return Err(TvError::InvalidInput("sample count must be positive".into()));
        }
        let coarse = u < MIN_SAMPLES;
        if coarse {
            warn!("direction sampling with u = {u} < {MIN_SAMPLES} is coarse");
        }
        let directions = (0..u)
            .map(|k| {
                let theta = std::f64::consts::PI * k as f64 / u as f64;
                DVector::from_vec(vec![theta.cos(), theta.sin()])
            })
            .collect();
        Ok(Self { dim: 2, directions, weight: 2.0 / u as f64, coarse })
    }

    /// Hemisphere of a subdivided icosahedron; one direction per antipodal pair.
    pub fn icosphere(depth: usize) -> Self {
        let directions = icosphere_hemisphere(depth);
        let weight = 3.0 / directions.len() as f64;
        let coarse = depth < 2;
        if coarse {
            warn!("icosphere depth {depth} is coarse");
        }
        Self { dim: 3, directions, weight, coarse }
    }

    /// Default sampling for `d`: 720 directions in 2D, depth-4 icosphere in 3D.
    pub fn default_for(d: usize) -> Result<Self> {
        match d {
            2 => Self::circle(720),
            3 => Ok(Self::icosphere(4)),
            _ => Err(TvError::InvalidInput(format!("discrete votes support d = 2 or 3, got {d}"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[DVector<f64>] {
        &self.directions
    }

    /// True if the sampling is below the recommended density.
    pub fn is_coarse(&self) -> bool {
        self.coarse
    }

    /// Sticks `(tau^2, n)` whose weighted sum reproduces `k`; zero-length sticks are dropped.
    pub fn sticks(&self, k: &SymTensor) -> Result<Vec<(f64, DVector<f64>)>> {
        check_dim(self.dim, k.dim())?;
        let root = k.sqrt();
        Ok(self
            .directions
            .iter()
            .filter_map(|u| {
                let p = &root * u;
                let t2 = p.norm_squared();
                (t2 > 0.0).then(|| (t2 * self.weight, p / t2.sqrt()))
            })
            .collect())
    }
}

fn icosphere_hemisphere(depth: usize) -> Vec<DVector<f64>> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    for v in &mut verts {
        normalize3(v);
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..depth {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let mut m = [0.0; 3];
                for (k, x) in m.iter_mut().enumerate() {
                    *x = verts[a][k] + verts[b][k];
                }
                normalize3(&mut m);
                verts.push(m);
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    // The vertex set is centrally symmetric; keep the half with a positive leading component.
    verts
        .into_iter()
        .filter(|v| {
            let lead = v.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(0.0);
            lead > 0.0
        })
        .map(|v| DVector::from_vec(v.to_vec()))
        .collect()
}

fn normalize3(v: &mut [f64; 3]) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// Discrete vote at `xi` from `kj` at `xj`, summing osculating-arc stick votes.
pub fn discrete_vote(xi: &Point, xj: &Point, kj: &SymTensor, scale: &Scale, sampling: &DirectionSampling) -> Result<SymTensor> {
    let frame = VoteFrame::new(xi, xj, scale)?;
    check_dim(frame.dim(), kj.dim())?;
    let r = frame.direction();
    let c = frame.weight();
    let d = frame.dim();
    let mut sum = DMatrix::zeros(d, d);
    for (t2, n) in sampling.sticks(kj)? {
        let cos = r.dot(&n);
        let eta = c * (1.0 - cos * cos);
        let v = &n - r * (2.0 * cos);
        sum += &v * v.transpose() * (eta * t2);
    }
    Ok(SymTensor::from_matrix_unchecked(sum))
}

/// Which classic field to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Stick,
    Plate,
    Ball,
}

impl FieldKind {
    /// Voter tensor at the origin: stick normal along the last axis, plate spanning the first two.
    pub fn voter(self, d: usize) -> Result<SymTensor> {
        match self {
            FieldKind::Stick => {
                let mut n = DVector::zeros(d);
                n[d - 1] = 1.0;
                SymTensor::stick(&n)
            }
            FieldKind::Plate => {
                if d < 3 {
                    return Err(TvError::InvalidInput("plate fields need d >= 3".into()));
                }
                let mut m = DMatrix::zeros(d, d);
                m[(0, 0)] = 1.0;
                m[(1, 1)] = 1.0;
                SymTensor::new(m)
            }
            FieldKind::Ball => Ok(SymTensor::identity(d)),
        }
    }

    /// Index of the eigenvector that carries the field orientation.
    ///
    /// Sticks are read from the normal; plates and balls from the tangent,
    /// since their leading eigenvalues are (near-)degenerate.
    pub fn orientation_index(self, d: usize) -> usize {
        match self {
            FieldKind::Stick => 0,
            FieldKind::Plate | FieldKind::Ball => d - 1,
        }
    }
}

/// How per-site votes are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMethod {
    ClosedForm,
    /// Closed form reduced to its symmetric part.
    Symmetric,
    Discrete,
}

/// Regular lattice around the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Sites run from `-half_extent` to `half_extent` along every axis.
    pub half_extent: f64,
    /// Number of lattice steps on each side of the origin.
    pub steps: usize,
}

impl GridSpec {
    /// Grid reaching exactly `3 sqrt(sigma_d)` with `steps` sites per half-axis.
    pub fn for_scale(scale: &Scale, steps: usize) -> Self {
        Self { half_extent: 3.0 * scale.sigma_d().sqrt(), steps }
    }
}

#[derive(Debug, Clone)]
pub struct FieldSite {
    pub position: Point,
    pub tensor: DMatrix<f64>,
    pub saliency: Saliency,
}

#[derive(Debug, Clone)]
pub struct FieldGrid {
    pub kind: FieldKind,
    pub method: FieldMethod,
    pub sites: Vec<FieldSite>,
    pub warnings: Vec<String>,
}

impl FieldGrid {
    /// Orientation vector of every site, see [`FieldKind::orientation_index`].
    pub fn orientations(&self) -> Vec<DVector<f64>> {
        let d = self.sites.first().map_or(0, |s| s.position.dim());
        let k = self.kind.orientation_index(d);
        self.sites.iter().map(|s| s.saliency.eigenvector(k)).collect()
    }
}

/// Votes cast by a canonical stick, plate or ball tensor at the origin onto a lattice.
pub fn generate_field(
    kind: FieldKind,
    d: usize,
    scale: &Scale,
    grid: &GridSpec,
    method: FieldMethod,
    sampling: Option<&DirectionSampling>,
) -> Result<FieldGrid> {
    if !(2..=3).contains(&d) {
        return Err(TvError::InvalidInput(format!("fields support d = 2 or 3, got {d}")));
    }
    if grid.steps == 0 {
        return Err(TvError::InvalidInput("grid needs at least one step".into()));
    }
    let min_extent = 3.0 * scale.sigma_d().sqrt();
    if grid.half_extent < min_extent * (1.0 - 1e-12) {
        return Err(TvError::InvalidInput(format!(
            "grid half-extent {} is below 3 sqrt(sigma_d) = {min_extent}",
            grid.half_extent
        )));
    }
    let voter = kind.voter(d)?;
    let mut warnings = Vec::new();
    let default_sampling;
    let sampling = match (method, sampling) {
        (FieldMethod::Discrete, Some(s)) => {
            check_dim(d, s.dim())?;
            Some(s)
        }
        (FieldMethod::Discrete, None) => {
            default_sampling = DirectionSampling::default_for(d)?;
            Some(&default_sampling)
        }
        (FieldMethod::ClosedForm | FieldMethod::Symmetric, _) => None,
    };
    if sampling.is_some_and(|s| s.is_coarse()) {
        warnings.push(format!("direction sampling is coarse ({} directions)", sampling.map_or(0, |s| s.len())));
    }

    let step = grid.half_extent / grid.steps as f64;
    let n = grid.steps as i64;
    let side: Vec<f64> = (-n..=n).map(|k| k as f64 * step).collect();
    let mut positions: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..d {
        positions = positions
            .into_iter()
            .flat_map(|p| {
                side.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    let origin = Point::new(vec![0.0; d])?;
    let sites = positions
        .into_par_iter()
        .filter(|p| p.iter().any(|&x| x != 0.0))
        .map(|p| {
            let position = Point::new(p)?;
            let tensor = match (method, sampling) {
                (_, Some(s)) => discrete_vote(&position, &origin, &voter, scale, s)?.into_matrix(),
                (FieldMethod::Symmetric, None) => VoteFrame::new(&position, &origin, scale)?.vote_symmetric(&voter).into_matrix(),
                (_, None) => VoteFrame::new(&position, &origin, scale)?.vote(&voter).into_matrix(),
            };
            let saliency = match method {
                FieldMethod::ClosedForm => crate::tensor::VoteTensor::new(tensor.clone())?.decompose(),
                FieldMethod::Symmetric | FieldMethod::Discrete => SymTensor::from_matrix_unchecked(tensor.clone()).decompose(),
            };
            Ok(FieldSite { position, tensor, saliency })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldGrid { kind, method, sites, warnings })
}
