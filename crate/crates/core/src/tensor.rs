//! Second-order tensors, the decay function and the closed-form tensor vote.
//!
//! A voter at `x_j` carrying a symmetric tensor `K_j` casts a vote at the
//! receiver `x_i`. With `r` the unit vector from `x_j` to `x_i`,
//! `c = exp(-|x_i - x_j|^2 / sigma_d)` and `R = I - 2 r r^T`, the vote is
//!
//! ```text
//! S_ij = c R K_j (I - r r^T / 2) R                      (asymmetric)
//! S_ij = c R (K_j - (r r^T K_j + K_j r r^T) / 4) R      (symmetric)
//! S'_ij = c^-1 R (I + r r^T) K_j^-1 R                   (inverse, S'_ij S_ij = I)
//! ```
//!
//! All three are evaluated with rank-one updates instead of dense products.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TvError};

/// Ball regularizer applied before inverting a tensor.
pub const DEFAULT_EPSILON: f64 = 1e-3;
/// Voters whose proximity weight falls below this are ignored.
pub const PRUNE_WEIGHT: f64 = 1e-6;
/// Neighbor radius in units of `sqrt(sigma_d)`; `exp(-3.72^2) ~ 1e-6`.
pub const PRUNE_RADIUS_FACTOR: f64 = 3.72;
/// Smallest proximity weight whose reciprocal is still representable.
pub const INVERSE_WEIGHT_FLOOR: f64 = 1e-300;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// A point in feature space, `d >= 2`, finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    coords: DVector<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        Self::from_vector(DVector::from_vec(coords))
    }

    pub fn from_vector(coords: DVector<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(TvError::InvalidInput(format!(
                "points need at least 2 coordinates, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(TvError::InvalidInput("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coords.as_slice()
    }

    pub fn distance_squared(&self, other: &Point) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok((&self.coords - &other.coords).norm_squared())
    }
}

/// Scale of analysis: `sigma_d` (squared-distance units) and the ball regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    sigma_d: f64,
    epsilon: f64,
}

impl Scale {
    pub fn new(sigma_d: f64) -> Result<Self> {
        Self::with_epsilon(sigma_d, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(sigma_d: f64, epsilon: f64) -> Result<Self> {
        if !(sigma_d.is_finite() && sigma_d > 0.0) {
            return Err(TvError::InvalidInput(format!("sigma_d must be positive, got {sigma_d}")));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(TvError::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { sigma_d, epsilon })
    }

    pub fn sigma_d(&self) -> f64 {
        self.sigma_d
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Radius beyond which the proximity weight drops below [`PRUNE_WEIGHT`].
    pub fn prune_radius(&self) -> f64 {
        PRUNE_RADIUS_FACTOR * self.sigma_d.sqrt()
    }
}

/// Eigen-system of a tensor, sorted by decreasing eigenvalue.
///
/// Each eigenvector's first non-negligible component is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: DMatrix<f64>,
}

impl Saliency {
    fn from_unsorted(values: &DVector<f64>, vectors: &DMatrix<f64>) -> Self {
        let d = values.len();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        let mut eigenvectors = DMatrix::zeros(d, d);
        let mut eigenvalues = Vec::with_capacity(d);
        for (k, &src) in order.iter().enumerate() {
            let mut col = vectors.column(src).into_owned();
            canonical_sign(&mut col);
            eigenvectors.set_column(k, &col);
            eigenvalues.push(values[src].max(0.0));
        }
        Self { eigenvalues, eigenvectors }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvector(&self, k: usize) -> DVector<f64> {
        self.eigenvectors.column(k).into_owned()
    }

    /// Eigenvector of the largest eigenvalue (the normal for a stick).
    pub fn principal(&self) -> DVector<f64> {
        self.eigenvector(0)
    }

    /// Eigenvector of the smallest eigenvalue.
    pub fn least(&self) -> DVector<f64> {
        self.eigenvector(self.dim() - 1)
    }

    /// `lambda_k - lambda_{k+1}`, with `lambda_{d+1} = 0`.
    pub fn gap(&self, k: usize) -> f64 {
        let next = self.eigenvalues.get(k + 1).copied().unwrap_or(0.0);
        self.eigenvalues[k] - next
    }

    /// Stick saliency `lambda_1 - lambda_2`.
    pub fn surface_saliency(&self) -> f64 {
        self.gap(0)
    }
}

fn canonical_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Types whose saliency can be read off an eigen or singular value decomposition.
pub trait Decompose {
    fn decompose(&self) -> Saliency;
}

/// Symmetric positive-semidefinite `d x d` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor {
    m: DMatrix<f64>,
}

impl SymTensor {
    /// Validates squareness, finiteness, symmetry and positive semi-definiteness.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if (&m - m.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(TvError::InvalidInput("tensor is not symmetric".into()));
        }
        let t = Self::from_matrix_unchecked(m);
        let eig = t.m.clone().symmetric_eigen();
        let max = eig.eigenvalues.max().max(0.0);
        if eig.eigenvalues.min() < -PSD_TOL * max.max(f64::MIN_POSITIVE) {
            return Err(TvError::InvalidInput("tensor is not positive semidefinite".into()));
        }
        Ok(t)
    }

    /// Symmetrizes `m`; the caller guarantees it is (numerically) PSD.
    pub(crate) fn from_matrix_unchecked(m: DMatrix<f64>) -> Self {
        let mt = m.transpose();
        Self { m: (m + mt) * 0.5 }
    }

    pub fn identity(d: usize) -> Self {
        Self { m: DMatrix::identity(d, d) }
    }

    pub fn zeros(d: usize) -> Self {
        Self { m: DMatrix::zeros(d, d) }
    }

    /// `n n^T` for the normalized direction of `n`.
    pub fn stick(n: &DVector<f64>) -> Result<Self> {
        let norm = n.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(TvError::InvalidInput("stick direction must be non-zero".into()));
        }
        let u = n / norm;
        Ok(Self { m: &u * u.transpose() })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { m: &self.m * a }
    }

    pub fn largest_eigenvalue(&self) -> f64 {
        self.m.clone().symmetric_eigen().eigenvalues.max().max(0.0)
    }

    pub fn frobenius_distance(&self, other: &DMatrix<f64>) -> f64 {
        (&self.m - other).norm()
    }

    /// Ball regularizer `eps * lambda_max`, or `eps` for the zero tensor.
    pub fn regularizer(&self, eps: f64) -> f64 {
        let lmax = self.largest_eigenvalue();
        if lmax > 0.0 {
            eps * lmax
        } else {
            eps
        }
    }

    /// `(K + eps' I)^-1` with `eps'` from [`SymTensor::regularizer`].
    pub fn regularized_inverse(&self, eps: f64) -> Result<Self> {
        let d = self.dim();
        let reg = &self.m + DMatrix::identity(d, d) * self.regularizer(eps);
        let inv = reg
            .cholesky()
            .ok_or_else(|| TvError::Numerical("regularized tensor is not positive definite".into()))?
            .inverse();
        Ok(Self::from_matrix_unchecked(inv))
    }

    /// Rescales the spectrum into `(0, 1]`.
    ///
    /// Eigenvalues are clamped from below at `floor`. With `cap_only` the
    /// tensor is divided by its largest eigenvalue only when that exceeds 1;
    /// otherwise the largest eigenvalue always becomes 1.
    pub fn normalized(&self, floor: f64, cap_only: bool) -> Self {
        let eig = self.m.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let divisor = if lmax > 1.0 || (!cap_only && lmax > 0.0) { lmax } else { 1.0 };
        let values = eig.eigenvalues.map(|l| (l / divisor).max(floor).min(1.0));
        let q = &eig.eigenvectors;
        Self::from_matrix_unchecked(q * DMatrix::from_diagonal(&values) * q.transpose())
    }

    /// Symmetric square root `K^{1/2}`.
    pub fn sqrt(&self) -> DMatrix<f64> {
        let eig = self.m.clone().symmetric_eigen();
        let values = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let q = &eig.eigenvectors;
        q * DMatrix::from_diagonal(&values) * q.transpose()
    }
}

impl Decompose for SymTensor {
    fn decompose(&self) -> Saliency {
        let eig = self.m.clone().symmetric_eigen();
        Saliency::from_unsorted(&eig.eigenvalues, &eig.eigenvectors)
    }
}

/// A raw, possibly asymmetric, tensor vote.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteTensor {
    m: DMatrix<f64>,
}

impl VoteTensor {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        Ok(Self { m })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// `U Sigma U^T` from `S = U Sigma V^T`, i.e. `(S S^T)^{1/2}`.
    pub fn psd_representative(&self) -> SymTensor {
        let svd = self.m.clone().svd(true, false);
        let u = svd.u.expect("requested U");
        SymTensor::from_matrix_unchecked(&u * DMatrix::from_diagonal(&svd.singular_values) * u.transpose())
    }

    /// Right-singular system of `S`, the eigensystem of `S^T S`.
    pub fn right_saliency(&self) -> Saliency {
        let svd = self.m.clone().svd(false, true);
        let vt = svd.v_t.expect("requested V^T");
        Saliency::from_unsorted(&svd.singular_values, &vt.transpose())
    }
}

impl Decompose for VoteTensor {
    /// Left-singular system of `S`, the eigensystem of `S S^T`.
    fn decompose(&self) -> Saliency {
        let svd = self.m.clone().svd(true, false);
        Saliency::from_unsorted(&svd.singular_values, &svd.u.expect("requested U"))
    }
}

/// Accumulation mode for [`accumulate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VoteMode {
    /// Closed-form votes reduced to their PSD representative before summation.
    #[default]
    Asymmetric,
    Symmetric,
}

/// Geometry shared by all votes between one voter and one receiver.
#[derive(Debug, Clone)]
pub struct VoteFrame {
    r: DVector<f64>,
    weight: f64,
    dist2: f64,
}

impl VoteFrame {
    /// Frame for a vote cast from `xj` to `xi`.
    pub fn new(xi: &Point, xj: &Point, scale: &Scale) -> Result<Self> {
        Self::from_slices(xi.as_slice(), xj.as_slice(), scale)
    }

    pub fn from_slices(xi: &[f64], xj: &[f64], scale: &Scale) -> Result<Self> {
        check_dim(xi.len(), xj.len())?;
        let diff = DVector::from_iterator(xi.len(), xi.iter().zip(xj).map(|(a, b)| a - b));
        let dist2 = diff.norm_squared();
        if !(dist2 > 0.0) {
            return Err(TvError::Degenerate("voter and receiver coincide".into()));
        }
        let r = diff / dist2.sqrt();
        Ok(Self { r, weight: (-dist2 / scale.sigma_d).exp(), dist2 })
    }

    /// Unit vector from the voter to the receiver.
    pub fn direction(&self) -> &DVector<f64> {
        &self.r
    }

    /// Proximity weight `c_ij`.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn distance_squared(&self) -> f64 {
        self.dist2
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    /// `R = I - 2 r r^T`.
    pub fn reflection(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::identity(d, d) - &self.r * self.r.transpose() * 2.0
    }

    /// `out += w * (K + alpha a r^T + beta r a^T + gamma s r r^T)`, `a = K r`, `s = r^T K r`.
    fn add_sandwich(&self, out: &mut DMatrix<f64>, w: f64, k: &DMatrix<f64>, alpha: f64, beta: f64, gamma: f64) {
        let r = &self.r;
        let a = k * r;
        let s = r.dot(&a);
        let d = self.dim();
        for col in 0..d {
            for row in 0..d {
                out[(row, col)] += w
                    * (k[(row, col)]
                        + alpha * a[row] * r[col]
                        + beta * r[row] * a[col]
                        + gamma * s * r[row] * r[col]);
            }
        }
    }

    /// Adds `w * S_ij` for the asymmetric closed-form vote of `k`.
    pub fn add_vote(&self, out: &mut DMatrix<f64>, w: f64, k: &SymTensor) {
        self.add_sandwich(out, w * self.weight, &k.m, -1.5, -2.0, 3.0);
    }

    /// Adds `w * S_ij` for the symmetric closed-form vote of `k`.
    pub fn add_vote_symmetric(&self, out: &mut DMatrix<f64>, w: f64, k: &SymTensor) {
        self.add_sandwich(out, w * self.weight, &k.m, -1.75, -1.75, 3.0);
    }

    /// Adds `w * S'_ij` for the inverse vote of `k_inv`; fails when `c_ij` cannot be inverted.
    pub fn add_inverse_vote(&self, out: &mut DMatrix<f64>, w: f64, k_inv: &SymTensor) -> Result<()> {
        if self.weight < INVERSE_WEIGHT_FLOOR {
            return Err(TvError::Underflow(self.weight));
        }
        self.add_sandwich(out, w / self.weight, &k_inv.m, -2.0, -3.0, 6.0);
        Ok(())
    }

    pub fn vote(&self, k: &SymTensor) -> VoteTensor {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        self.add_vote(&mut out, 1.0, k);
        VoteTensor { m: out }
    }

    pub fn vote_symmetric(&self, k: &SymTensor) -> SymTensor {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        self.add_vote_symmetric(&mut out, 1.0, k);
        SymTensor::from_matrix_unchecked(out)
    }

    pub fn inverse_vote(&self, k_inv: &SymTensor) -> Result<VoteTensor> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        self.add_inverse_vote(&mut out, 1.0, k_inv)?;
        Ok(VoteTensor { m: out })
    }

    /// `R'^T R' = I - (3/4) r r^T` with `R' = (I - r r^T / 2) R`.
    pub fn right_factor_gram(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::identity(d, d) - &self.r * self.r.transpose() * 0.75
    }
}

/// `c_ij = exp(-|x_i - x_j|^2 / sigma_d)`; equals 1 for coincident points.
pub fn proximity_weight(xi: &Point, xj: &Point, scale: &Scale) -> Result<f64> {
    Ok((-xi.distance_squared(xj)? / scale.sigma_d).exp())
}

fn unit_normal(nj: &DVector<f64>, d: usize) -> Result<DVector<f64>> {
    check_dim(d, nj.len())?;
    let norm = nj.norm();
    if !((norm - 1.0).abs() < 1e-9) {
        return Err(TvError::InvalidInput(format!("normal must be a unit vector, |n| = {norm}")));
    }
    Ok(nj.clone())
}

/// Decay `eta = c_ij (1 - (r_ij^T n_j)^2)` of a stick voter with unit normal `nj`.
pub fn stick_decay(xi: &Point, xj: &Point, nj: &DVector<f64>, scale: &Scale) -> Result<f64> {
    let frame = VoteFrame::new(xi, xj, scale)?;
    let n = unit_normal(nj, frame.dim())?;
    let cos = frame.r.dot(&n);
    Ok(frame.weight * (1.0 - cos * cos))
}

/// Normal received at `xi` along the osculating arc from a stick `tau * nj` at `xj`.
pub fn stick_vote(xi: &Point, xj: &Point, nj: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
    check_dim(xi.dim(), xj.dim())?;
    let diff = xi.coords() - xj.coords();
    let dist = diff.norm();
    if !(dist > 0.0) {
        return Err(TvError::Degenerate("voter and receiver coincide".into()));
    }
    let n = unit_normal(nj, xi.dim())?;
    let r = diff / dist;
    Ok((&n - &r * (2.0 * r.dot(&n))) * tau)
}

/// True when `r` is more than 45 degrees away from the tangent plane of the stick normal `n`.
///
/// The classic stick field zeroes these votes; the closed form keeps them.
pub fn outside_45_degree_zone(r: &DVector<f64>, n: &DVector<f64>) -> bool {
    r.dot(n).abs() > std::f64::consts::FRAC_1_SQRT_2
}

/// Asymmetric closed-form vote `S_ij` cast by `kj` at `xj` onto `xi`.
pub fn cftv_vote(xi: &Point, xj: &Point, kj: &SymTensor, scale: &Scale) -> Result<VoteTensor> {
    let frame = VoteFrame::new(xi, xj, scale)?;
    check_dim(frame.dim(), kj.dim())?;
    Ok(frame.vote(kj))
}

/// Symmetric closed-form vote.
pub fn cftv_vote_symmetric(xi: &Point, xj: &Point, kj: &SymTensor, scale: &Scale) -> Result<SymTensor> {
    let frame = VoteFrame::new(xi, xj, scale)?;
    check_dim(frame.dim(), kj.dim())?;
    Ok(frame.vote_symmetric(kj))
}

/// Inverse vote `S'_ij` built from the (regularized) inverse tensor `kj_inv`.
pub fn cftv_vote_inverse(xi: &Point, xj: &Point, kj_inv: &SymTensor, scale: &Scale) -> Result<VoteTensor> {
    let frame = VoteFrame::new(xi, xj, scale)?;
    check_dim(frame.dim(), kj_inv.dim())?;
    frame.inverse_vote(kj_inv)
}

/// Structure-aware tensor `K_i = sum_j S_ij` at `site`.
///
/// Voters coincident with the site or with `c_ij < PRUNE_WEIGHT` are skipped.
/// Without any contributing voter the result is `epsilon * I`.
pub fn accumulate<'a, I>(site: &Point, neighbors: I, scale: &Scale, mode: VoteMode) -> Result<SymTensor>
where
    I: IntoIterator<Item = (&'a Point, &'a SymTensor)>,
{
    let d = site.dim();
    let mut sum = DMatrix::zeros(d, d);
    let mut voters = 0usize;
    for (xj, kj) in neighbors {
        check_dim(d, xj.dim())?;
        check_dim(d, kj.dim())?;
        let frame = match VoteFrame::new(site, xj, scale) {
            Ok(f) => f,
            Err(TvError::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        if frame.weight < PRUNE_WEIGHT {
            continue;
        }
        match mode {
            VoteMode::Symmetric => frame.add_vote_symmetric(&mut sum, 1.0, kj),
            VoteMode::Asymmetric => sum += frame.vote(kj).psd_representative().m,
        }
        voters += 1;
    }
    if voters == 0 {
        return Ok(SymTensor::identity(d).scaled(scale.epsilon));
    }
    Ok(SymTensor::from_matrix_unchecked(sum))
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(TvError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() < 2 {
        return Err(TvError::InvalidInput(format!(
            "tensor must be square with d >= 2, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(TvError::InvalidInput("tensor has non-finite entries".into()));
    }
    Ok(())
}

/// Angle in degrees between two lines with directions `a` and `b`, in `[0, 90]`.
pub fn line_angle_deg(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let cos = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    cos.acos().to_degrees()
}
