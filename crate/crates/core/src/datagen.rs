//! Seeded synthetic data and robustness sweeps.
//!
//! # Random streams
//!
//! Every random draw comes from ChaCha8 (`rand_chacha::ChaCha8Rng`). The key is
//! `ChaCha8Rng::seed_from_u64(seed)` and the 64-bit stream id is
//! `4 * trial + purpose`, with purpose 0 for inliers, 1 for outliers, 2 for
//! RANSAC sampling and 3 for two-view geometry. Trials are therefore
//! independent of execution order, and for a given trial the outlier positions
//! do not depend on the inlier noise level.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emtv::{self, EmtvConfig};
use crate::error::{Result, TvError};
use crate::robustfit::{self, Correspondence, RansacConfig};
use crate::spatial::PointSet;
use crate::tensor::{line_angle_deg, Point, Scale, SymTensor};

/// Purpose of a random stream, see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Inliers = 0,
    Outliers = 1,
    Ransac = 2,
    Geometry = 3,
}

/// The ChaCha8 stream for `(seed, trial, purpose)`.
pub fn substream(seed: u64, trial: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial.wrapping_mul(4).wrapping_add(purpose as u64));
    rng
}

/// Outlier fraction `Z = R / (R + 1)` for an outlier/inlier ratio `R`.
pub fn oi_to_percent(r: f64) -> f64 {
    r / (r + 1.0)
}

/// Inverse of [`oi_to_percent`]; `z` must lie in `[0, 1)`.
pub fn percent_to_oi(z: f64) -> f64 {
    z / (1.0 - z)
}

/// Parameters of a noisy hyperplane through the origin plus uniform outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineInstanceSpec {
    pub n_inliers: usize,
    /// Standard deviation of the displacement along the normal.
    pub noise_sd: f64,
    pub oi_ratio: f64,
    /// Outliers are uniform in the ball of this radius.
    pub outlier_radius: f64,
    /// Ground-truth normal; normalized before use.
    pub normal: Vec<f64>,
    pub seed: u64,
    pub trial: u64,
}

impl Default for LineInstanceSpec {
    fn default() -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self { n_inliers: 44, noise_sd: 0.1, oi_ratio: 0.0, outlier_radius: 2.0, normal: vec![-h, h], seed: 0, trial: 0 }
    }
}

impl LineInstanceSpec {
    pub fn n_outliers(&self) -> usize {
        (self.oi_ratio * self.n_inliers as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct LineInstance {
    /// Inliers first, then outliers.
    pub points: PointSet,
    /// `true` for inliers.
    pub labels: Vec<bool>,
    pub normal: DVector<f64>,
}

/// Orthonormal basis of the complement of the unit vector `n`, as columns.
fn complement_basis(n: &DVector<f64>) -> DMatrix<f64> {
    let d = n.len();
    // Gram-Schmidt on n followed by the axes, skipping the axis closest to n.
    let drop = (0..d).max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs())).unwrap_or(0);
    let mut cols = vec![n.clone()];
    for k in (0..d).filter(|&k| k != drop) {
        let mut e = DVector::zeros(d);
        e[k] = 1.0;
        cols.push(e);
    }
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d);
    for c in cols {
        let mut v = c;
        for b in &basis {
            v -= b * b.dot(&v);
        }
        basis.push(v.normalize());
    }
    DMatrix::from_columns(&basis[1..])
}

/// Inliers uniform on the hyperplane inside `[-1, 1]^d`, displaced along the normal
/// by Gaussian noise; outliers uniform in the ball of `outlier_radius`.
pub fn gen_line(spec: &LineInstanceSpec) -> Result<LineInstance> {
    let d = spec.normal.len();
    if d < 2 {
        return Err(TvError::InvalidInput("normal needs at least 2 components".into()));
    }
    let normal = DVector::from_vec(spec.normal.clone());
    let norm = normal.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(TvError::InvalidInput("normal must be non-zero".into()));
    }
    let normal = normal / norm;
    if !(spec.noise_sd >= 0.0 && spec.oi_ratio >= 0.0 && spec.outlier_radius > 0.0) {
        return Err(TvError::InvalidInput("noise_sd, oi_ratio must be >= 0 and outlier_radius > 0".into()));
    }
    let basis = complement_basis(&normal);
    let half = (d as f64).sqrt();
    let mut rng = substream(spec.seed, spec.trial, Stream::Inliers);
    let mut rows = Vec::with_capacity(spec.n_inliers + spec.n_outliers());
    while rows.len() < spec.n_inliers {
        let a = DVector::from_fn(d - 1, |_, _| rng.random_range(-half..half));
        let x = &basis * a;
        if x.iter().all(|c| c.abs() <= 1.0) {
            let e: f64 = StandardNormal.sample(&mut rng);
            rows.push(x + &normal * (e * spec.noise_sd));
        }
    }
    let mut rng = substream(spec.seed, spec.trial, Stream::Outliers);
    for _ in 0..spec.n_outliers() {
        let g = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let g: DVector<f64> = g.normalize();
        let u: f64 = rng.random();
        rows.push(g * (spec.outlier_radius * u.powf(1.0 / d as f64)));
    }
    let labels = (0..rows.len()).map(|i| i < spec.n_inliers).collect();
    let points = PointSet::new(rows.into_iter().map(Point::from_vector).collect::<Result<_>>()?)?;
    Ok(LineInstance { points, labels, normal })
}

/// Two perpendicular rows of evenly spaced points meeting at the origin.
#[derive(Debug, Clone)]
pub struct LJunction {
    /// Observations are the true sticks plus `ball * I`.
    pub points: PointSet,
    /// True surface normal per point; the corner carries the first row's normal.
    pub normals: Vec<DVector<f64>>,
    /// Index of the point at the origin.
    pub corner: usize,
}

/// Points `(k h, 0)` for `k = 0..=n` and `(0, k h)` for `k = 1..=n`, with `n = round(1 / h)`.
pub fn l_junction(spacing: f64, ball: f64) -> Result<LJunction> {
    if !(spacing > 0.0 && spacing <= 0.5) || !(ball >= 0.0) {
        return Err(TvError::InvalidInput(format!("spacing must lie in (0, 0.5] and ball >= 0, got {spacing}, {ball}")));
    }
    let n = (1.0 / spacing).round() as usize;
    let horizontal = DVector::from_vec(vec![0.0, 1.0]);
    let vertical = DVector::from_vec(vec![1.0, 0.0]);
    let mut points = Vec::with_capacity(2 * n + 1);
    let mut normals = Vec::with_capacity(2 * n + 1);
    for k in 0..=n {
        points.push(Point::new(vec![k as f64 * spacing, 0.0])?);
        normals.push(horizontal.clone());
    }
    for k in 1..=n {
        points.push(Point::new(vec![0.0, k as f64 * spacing])?);
        normals.push(vertical.clone());
    }
    let tensors = normals
        .iter()
        .map(|nv| SymTensor::new(nv * nv.transpose() + DMatrix::identity(2, 2) * ball))
        .collect::<Result<_>>()?;
    Ok(LJunction { points: PointSet::with_tensors(points, tensors)?, normals, corner: 0 })
}

/// Two calibrated views of a random scene with a known fundamental matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoViewSpec {
    pub n_inliers: usize,
    pub oi_ratio: f64,
    /// Gaussian pixel noise added to both images.
    pub noise_px: f64,
    pub width: f64,
    pub height: f64,
    pub focal: f64,
    pub seed: u64,
    pub trial: u64,
}

impl Default for TwoViewSpec {
    fn default() -> Self {
        Self { n_inliers: 100, oi_ratio: 10.0, noise_px: 0.5, width: 640.0, height: 480.0, focal: 500.0, seed: 0, trial: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TwoViewInstance {
    /// Noisy inliers first, then outliers.
    pub correspondences: Vec<Correspondence>,
    /// Noise-free projections of the inliers.
    pub clean: Vec<Correspondence>,
    pub labels: Vec<bool>,
    /// Rank 2, unit Frobenius norm.
    pub f: Matrix3<f64>,
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t[2], t[1], t[2], 0.0, -t[0], -t[1], t[0], 0.0)
}

/// Scene points in front of both cameras; the second camera is rotated by a few
/// degrees and translated mostly sideways.
pub fn gen_two_view(spec: &TwoViewSpec) -> Result<TwoViewInstance> {
    let mut rng = substream(spec.seed, spec.trial, Stream::Geometry);
    let k = Matrix3::new(spec.focal, 0.0, spec.width / 2.0, 0.0, spec.focal, spec.height / 2.0, 0.0, 0.0, 1.0);
    let k_inv = k.try_inverse().ok_or_else(|| TvError::InvalidInput("focal length must be non-zero".into()))?;
    let angles = Vector3::from_fn(|_, _| rng.random_range(-0.15..0.15));
    let rot = Rotation3::from_scaled_axis(angles).into_inner();
    let t = Vector3::new(rng.random_range(0.5..1.0), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let f = robustfit::rank2_unit(&(k_inv.transpose() * skew(&t) * rot * k_inv))?;

    let project = |p: &Vector3<f64>| -> Option<[f64; 2]> {
        let q = k * p;
        let (u, v) = (q[0] / q[2], q[1] / q[2]);
        (q[2] > 0.0 && (0.0..spec.width).contains(&u) && (0.0..spec.height).contains(&v)).then_some([u, v])
    };
    let mut clean = Vec::with_capacity(spec.n_inliers);
    let mut attempts = 0usize;
    while clean.len() < spec.n_inliers {
        attempts += 1;
        if attempts > 1000 * spec.n_inliers.max(1) {
            return Err(TvError::Degenerate("could not place scene points in both views".into()));
        }
        let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
        if let (Some(a), Some(b)) = (project(&x), project(&(rot * x + t))) {
            clean.push(Correspondence { u: a, u_prime: b });
        }
    }
    let mut noise = substream(spec.seed, spec.trial, Stream::Inliers);
    let mut jitter = |p: [f64; 2]| -> [f64; 2] {
        let a: f64 = StandardNormal.sample(&mut noise);
        let b: f64 = StandardNormal.sample(&mut noise);
        [p[0] + a * spec.noise_px, p[1] + b * spec.noise_px]
    };
    let mut correspondences: Vec<Correspondence> =
        clean.iter().map(|c| Correspondence { u: jitter(c.u), u_prime: jitter(c.u_prime) }).collect();
    let n_out = (spec.oi_ratio * spec.n_inliers as f64).round() as usize;
    let mut out_rng = substream(spec.seed, spec.trial, Stream::Outliers);
    for _ in 0..n_out {
        let mut pick = || [out_rng.random_range(0.0..spec.width), out_rng.random_range(0.0..spec.height)];
        correspondences.push(Correspondence { u: pick(), u_prime: pick() });
    }
    let labels = (0..correspondences.len()).map(|i| i < spec.n_inliers).collect();
    Ok(TwoViewInstance { correspondences, clean, labels, f })
}

/// Random rotation, distributed uniformly over the orthogonal group.
pub fn random_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (k, mut col) in q.column_iter_mut().enumerate() {
        if r[(k, k)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// `Q diag(lambda) Q^T` with a uniformly random rotation and eigenvalues uniform in `(0, 1]`.
pub fn random_psd<R: Rng + ?Sized>(d: usize, rng: &mut R) -> SymTensor {
    let q = random_rotation(d, rng);
    let lambda = DVector::from_fn(d, |_, _| 1.0 - rng.random::<f64>());
    SymTensor::from_matrix_unchecked(&q * DMatrix::from_diagonal(&lambda) * q.transpose())
}

/// Unit vector, uniform on the sphere.
pub fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let g = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
        let n = g.norm();
        if n > 1e-12 {
            return g / n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Emtv,
    Ransac,
    Tls,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Emtv => "emtv",
            Method::Ransac => "ransac",
            Method::Tls => "tls",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = TvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emtv" => Ok(Method::Emtv),
            "ransac" => Ok(Method::Ransac),
            "tls" => Ok(Method::Tls),
            _ => Err(TvError::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    OiRatio,
    NoiseSd,
    SigmaD,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::OiRatio => "oi_ratio",
            SweepVariable::NoiseSd => "noise_sd",
            SweepVariable::SigmaD => "sigma_d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub seed: u64,
    /// Instance parameters not overridden by the swept variable.
    pub base: LineInstanceSpec,
    pub sigma_d: f64,
    pub emtv: EmtvConfig,
    /// RANSAC threshold in units of the instance noise level.
    pub ransac_scale_factor: f64,
    pub ransac: RansacConfig,
}

impl SweepSpec {
    fn with_values(variable: SweepVariable, values: Vec<f64>) -> Self {
        Self {
            variable,
            values,
            methods: vec![Method::Emtv, Method::Ransac, Method::Tls],
            trials: 100,
            seed: 0,
            base: LineInstanceSpec::default(),
            sigma_d: 0.1,
            emtv: EmtvConfig::default(),
            ransac_scale_factor: 2.5,
            ransac: RansacConfig::default(),
        }
    }

    /// OI ratio 0.1 to 1 in steps of 0.1.
    pub fn set1() -> Self {
        Self::with_values(SweepVariable::OiRatio, (1..=10).map(|k| k as f64 / 10.0).collect())
    }

    /// OI ratio 1 to 100 in steps of 1.
    pub fn set2() -> Self {
        Self::with_values(SweepVariable::OiRatio, (1..=100).map(f64::from).collect())
    }

    /// Inlier noise 0.01 to 0.29 in steps of 0.01 at OI ratio 1.
    pub fn noise() -> Self {
        let mut s = Self::with_values(SweepVariable::NoiseSd, (1..=29).map(|k| k as f64 / 100.0).collect());
        s.base.oi_ratio = 1.0;
        s
    }

    /// Scale of analysis 0.05 to 0.5 at OI ratio 10.
    pub fn scale() -> Self {
        let mut s = Self::with_values(SweepVariable::SigmaD, vec![0.05, 0.1, 0.2, 0.3, 0.5]);
        s.base.oi_ratio = 10.0;
        s
    }
}

/// Aggregated errors of one method in one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub variable: SweepVariable,
    pub value: f64,
    pub method: Method,
    pub trials: usize,
    pub mean_err_deg: f64,
    pub min_err_deg: f64,
    pub max_err_deg: f64,
    pub fail_count: usize,
}

/// Angle reported for a trial whose fit failed.
pub const FAILURE_ANGLE_DEG: f64 = 90.0;

/// Angular error of a single fit, or `None` on failure.
pub fn run_method(method: Method, inst: &LineInstance, spec: &SweepSpec, sigma_d: f64, trial: u64) -> Option<f64> {
    let v = match method {
        Method::Tls => robustfit::tls_fit(&inst.points).ok()?,
        Method::Ransac => {
            let noise = spec.base.noise_sd.max(1e-3);
            let cfg = RansacConfig { inlier_scale: spec.ransac_scale_factor * noise, ..spec.ransac };
            let mut rng = substream(spec.seed, trial, Stream::Ransac);
            robustfit::ransac_fit(&inst.points, &cfg, &mut rng).ok()?.normal
        }
        Method::Emtv => {
            let scale = Scale::new(sigma_d).ok()?;
            DVector::from_vec(emtv::fit(&inst.points, &scale, &spec.emtv).ok()?.v)
        }
    };
    Some(line_angle_deg(&v, &inst.normal))
}

/// Runs every (cell, method, trial); trials execute in parallel, rows come out sorted by cell then method.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if spec.trials == 0 {
        return Err(TvError::InvalidInput("trials must be positive".into()));
    }
    let mut rows = Vec::new();
    for &value in &spec.values {
        let mut cell = spec.clone();
        let mut sigma_d = spec.sigma_d;
        match spec.variable {
            SweepVariable::OiRatio => cell.base.oi_ratio = value,
            SweepVariable::NoiseSd => cell.base.noise_sd = value,
            SweepVariable::SigmaD => sigma_d = value,
        }
        cell.base.seed = spec.seed;
        let instances = (0..spec.trials as u64)
            .into_par_iter()
            .map(|t| gen_line(&LineInstanceSpec { trial: t, ..cell.base.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let mut methods = spec.methods.clone();
        methods.sort();
        methods.dedup();
        for method in methods {
            let errs: Vec<Option<f64>> = instances
                .par_iter()
                .enumerate()
                .map(|(t, inst)| run_method(method, inst, &cell, sigma_d, t as u64))
                .collect();
            let fail_count = errs.iter().filter(|e| e.is_none()).count();
            let vals: Vec<f64> = errs.iter().map(|e| e.unwrap_or(FAILURE_ANGLE_DEG)).collect();
            rows.push(SweepRow {
                variable: spec.variable,
                value,
                method,
                trials: spec.trials,
                mean_err_deg: vals.iter().sum::<f64>() / vals.len() as f64,
                min_err_deg: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max_err_deg: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                fail_count,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "variable,value,method,trials,mean_err_deg,min_err_deg,max_err_deg,fail_count";

/// CSV with [`SWEEP_CSV_HEADER`]; floats use Rust's shortest round-trip formatting.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variable.name(),
            r.value,
            r.method.name(),
            r.trials,
            r.mean_err_deg,
            r.min_err_deg,
            r.max_err_deg,
            r.fail_count
        );
    }
    out
}
