//! EM estimation of a hyperplane `x^T v = 0` with tensor-voting constraints.
//!
//! Each point is an inlier with probability `w_i`. Inliers satisfy the data
//! constraint `x_i^T v ~ 0`, the orientation constraint `v^T K_i^-1 v ~ 0` and
//! the neighborhood constraint `K_i^-1 ~ S'_ij`; outliers are uniform with
//! density `1 / C`. The E-step evaluates `w_i`; the M-step updates, in order,
//! `alpha`, `K_i^-1`, `v` and the three noise scales, then refreshes the
//! inverse votes `S'_ij`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TvError};
use crate::spatial::{NeighborIndex, PointSet};
use crate::tensor::{Decompose, Scale, SymTensor, VoteFrame, INVERSE_WEIGHT_FLOOR, PRUNE_WEIGHT};

/// Orientation scale used before any estimate exists; it silences the tensor term.
pub const INITIAL_SIGMA1: f64 = 1e6;
/// Lower bound applied to `sigma` and `sigma1` in the E-step.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// How the inverse tensors are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmtvInit {
    /// One pass of ball votes gives `K_i`; its regularized inverse seeds `K_i^-1`.
    /// The initial model is the principal direction of `sum_i (lambda_1 - lambda_2) e_1 e_1^T`.
    #[default]
    StructureAware,
    /// `K_j = I`, inverse votes averaged with unit weights; the initial model
    /// minimizes `|M v|` with the tensor term switched off.
    Ball,
}

/// Per-edge weight in the `K_i^-1` update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InverseVoteWeight {
    /// `sum_j S'_ij w_j / sum_j w_j`.
    Plain,
    /// `sum_j c_ij S'_ij w_j / sum_j c_ij w_j`, cancelling the `1 / c_ij` growth of far votes.
    /// `sigma2` is measured against the same `c_ij S'_ij` with weights `c_ij w_i w_j`.
    #[default]
    Proximity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmtvConfig {
    /// Outlier density constant; `None` uses the largest bounding-box side.
    pub c: Option<f64>,
    /// Pin `alpha` to this value; `None` re-estimates it as the mean of `w`.
    pub alpha_fixed: Option<f64>,
    pub alpha_init: f64,
    pub max_iters: usize,
    /// Relative change of the observed-data log-likelihood that ends the iteration.
    pub tol: f64,
    pub inlier_threshold: f64,
    pub init: EmtvInit,
    pub inverse_weight: InverseVoteWeight,
}

impl Default for EmtvConfig {
    fn default() -> Self {
        Self {
            c: None,
            alpha_fixed: Some(0.5),
            alpha_init: 0.5,
            max_iters: 100,
            tol: 1e-8,
            inlier_threshold: 0.8,
            init: EmtvInit::default(),
            inverse_weight: InverseVoteWeight::default(),
        }
    }
}

impl EmtvConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                Err(TvError::InvalidInput(format!("{name} must lie in (0, 1), got {x}")))
            }
        };
        unit("inlier_threshold", self.inlier_threshold)?;
        unit("alpha_init", self.alpha_init)?;
        if let Some(a) = self.alpha_fixed {
            unit("alpha_fixed", a)?;
        }
        if let Some(c) = self.c {
            if !(c.is_finite() && c > 0.0) {
                return Err(TvError::InvalidInput(format!("C must be positive, got {c}")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(TvError::InvalidInput(format!("tol must be non-negative, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Parameters and per-point quantities of an EM run.
#[derive(Debug, Clone)]
pub struct EmtvState {
    pub v: DVector<f64>,
    pub k_inv: Vec<SymTensor>,
    /// Tensors the current inverse votes `S'_ij` are built from.
    vote_source: Vec<SymTensor>,
    pub w: Vec<f64>,
    pub alpha: f64,
    pub sigma2: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub c: f64,
    frames: Vec<Vec<(usize, VoteFrame)>>,
    pub log_likelihood: Vec<f64>,
    /// The rule-2 subtraction was capped at least once.
    pub cap_active: bool,
    /// A noise scale hit [`SIGMA_FLOOR`] at least once.
    pub sigma_clamped: bool,
}

impl EmtvState {
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.frames[i].iter().map(|(j, _)| *j)
    }
}

/// Builds neighbor frames, seeds `K_i^-1` and runs the first M-step rules.
pub fn init(ps: &PointSet, scale: &Scale, cfg: &EmtvConfig) -> Result<EmtvState> {
    cfg.validate()?;
    let n = ps.len();
    let d = ps.dim();
    if n < d {
        return Err(TvError::Underdetermined { needed: d, got: n });
    }
    let idx = NeighborIndex::build(ps, scale);
    let frames: Vec<Vec<(usize, VoteFrame)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            for j in idx.neighbors(i, None) {
                match VoteFrame::new(ps.point(i), ps.point(j), scale) {
                    Ok(f) if f.weight() >= PRUNE_WEIGHT.max(INVERSE_WEIGHT_FLOOR) => out.push((j, f)),
                    Ok(_) | Err(TvError::Degenerate(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let c = match cfg.c {
        Some(c) => c,
        None => bounding_box_side(ps),
    };
    let eps = scale.epsilon();
    let mut state = EmtvState {
        v: DVector::zeros(d),
        k_inv: Vec::new(),
        vote_source: Vec::new(),
        w: vec![1.0; n],
        alpha: cfg.alpha_fixed.unwrap_or(cfg.alpha_init),
        sigma2: 1.0,
        sigma1_sq: INITIAL_SIGMA1 * INITIAL_SIGMA1,
        sigma2_sq: 0.0,
        c,
        frames,
        log_likelihood: Vec::new(),
        cap_active: false,
        sigma_clamped: false,
    };

    match cfg.init {
        EmtvInit::Ball => {
            let ball_inv = SymTensor::identity(d).regularized_inverse(eps)?;
            state.vote_source = vec![ball_inv; n];
            // Rule 2 without the model term, which the huge sigma1 suppresses.
            state.k_inv = update_inverse_tensors(&state, cfg, eps, false)?.0;
            state.v = least_eigenvector(&model_matrix(ps, &state))?;
        }
        EmtvInit::StructureAware => {
            let ball = SymTensor::identity(d);
            let seeded: Vec<(SymTensor, DMatrix<f64>)> = state
                .frames
                .par_iter()
                .map(|nb| {
                    let mut k = DMatrix::zeros(d, d);
                    for (_, f) in nb {
                        f.add_vote_symmetric(&mut k, 1.0, &ball);
                    }
                    if nb.is_empty() {
                        return Ok((SymTensor::identity(d), DMatrix::zeros(d, d)));
                    }
                    let k = SymTensor::from_matrix_unchecked(k);
                    let stick = stick_component(&k);
                    Ok((k.regularized_inverse(eps)?.normalized(eps, false), stick))
                })
                .collect::<Result<_>>()?;
            let sticks = seeded.iter().fold(DMatrix::zeros(d, d), |acc, (_, s)| acc + s);
            state.k_inv = seeded.into_iter().map(|(k, _)| k).collect();
            state.v = least_eigenvector(&(-sticks))?;
            state.vote_source = state.k_inv.clone();
        }
    }
    update_scales(ps, &mut state, cfg.inverse_weight);
    state.vote_source = state.k_inv.clone();
    Ok(state)
}

/// `(lambda_1 - lambda_2) e_1 e_1^T` of a tensor.
fn stick_component(k: &SymTensor) -> DMatrix<f64> {
    let sal = k.decompose();
    let e1 = sal.principal();
    &e1 * e1.transpose() * sal.gap(0)
}

fn bounding_box_side(ps: &PointSet) -> f64 {
    let d = ps.dim();
    let side = (0..d)
        .map(|k| {
            let (lo, hi) = ps.points().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.as_slice()[k]), hi.max(p.as_slice()[k]))
            });
            hi - lo
        })
        .fold(0.0, f64::max);
    if side > 0.0 {
        side
    } else {
        1.0
    }
}

fn inlier_density(state: &EmtvState, x: &DVector<f64>, k_inv: &SymTensor) -> f64 {
    let sigma = state.sigma2.sqrt().max(SIGMA_FLOOR);
    let sigma1 = state.sigma1_sq.sqrt().max(SIGMA_FLOOR);
    let beta = 1.0 / (2.0 * sigma * sigma1 * std::f64::consts::PI);
    let res = x.dot(&state.v);
    let orient = state.v.dot(&(k_inv.matrix() * &state.v)).abs();
    state.alpha * beta * (-res * res / (2.0 * sigma * sigma)).exp() * (-orient / (2.0 * sigma1 * sigma1)).exp()
}

/// Observed-data log-likelihood `sum_i log(p_i + (1 - alpha) / C)`.
pub fn log_likelihood(ps: &PointSet, state: &EmtvState) -> f64 {
    let floor = (1.0 - state.alpha) / state.c;
    ps.points()
        .iter()
        .zip(&state.k_inv)
        .map(|(p, k)| (inlier_density(state, p.coords(), k) + floor).ln())
        .sum()
}

/// Updates the inlier posteriors and returns the observed-data log-likelihood.
pub fn e_step(ps: &PointSet, state: &mut EmtvState) -> f64 {
    if state.sigma2.sqrt() < SIGMA_FLOOR || state.sigma1_sq.sqrt() < SIGMA_FLOOR {
        state.sigma_clamped = true;
    }
    let floor = (1.0 - state.alpha) / state.c;
    let mut ll = 0.0;
    for (i, p) in ps.points().iter().enumerate() {
        let inlier = inlier_density(state, p.coords(), &state.k_inv[i]);
        let total = inlier + floor;
        state.w[i] = if total > 0.0 { inlier / total } else { 0.0 };
        ll += total.ln();
    }
    ll
}

/// Rule 2: new `K_i^-1` from the inverse votes of the current vote sources.
fn update_inverse_tensors(state: &EmtvState, cfg: &EmtvConfig, eps: f64, with_model: bool) -> Result<(Vec<SymTensor>, bool)> {
    let d = state.dim();
    let coef = if with_model { state.sigma2_sq / (2.0 * state.sigma1_sq) } else { 0.0 };
    let vv = &state.v * state.v.transpose();
    let results: Vec<(SymTensor, bool)> = state
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut acc = DMatrix::zeros(d, d);
            let mut norm = 0.0;
            for (j, f) in nb {
                let weight = match cfg.inverse_weight {
                    InverseVoteWeight::Plain => state.w[*j],
                    InverseVoteWeight::Proximity => state.w[*j] * f.weight(),
                };
                if weight > 0.0 {
                    f.add_inverse_vote(&mut acc, weight, &state.vote_source[*j])?;
                    norm += weight;
                }
            }
            if !(norm > 0.0) {
                return Ok((SymTensor::identity(d), false));
            }
            let mut sub = coef * state.w[i];
            let mut capped = false;
            if sub > 0.0 {
                let acc_norm = acc.clone().svd(false, false).singular_values.max();
                if sub > acc_norm {
                    sub = acc_norm;
                    capped = true;
                }
            }
            let raw = (acc - &vv * sub) / norm;
            Ok((SymTensor::from_matrix_unchecked(raw).normalized(eps, false), capped))
        })
        .collect::<Result<_>>()?;
    let capped = results.iter().any(|(_, c)| *c);
    Ok((results.into_iter().map(|(k, _)| k).collect(), capped))
}

fn model_matrix(ps: &PointSet, state: &EmtvState) -> DMatrix<f64> {
    let d = state.dim();
    let ratio = state.sigma2 / state.sigma1_sq;
    let mut m = DMatrix::zeros(d, d);
    for ((p, k), &w) in ps.points().iter().zip(&state.k_inv).zip(&state.w) {
        if w == 0.0 {
            continue;
        }
        let x = p.coords();
        m += x * x.transpose() * w + k.matrix() * (ratio * w);
    }
    m
}

fn least_eigenvector(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let mut v = eig.eigenvectors.column(k).into_owned();
    let norm = v.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(TvError::Numerical("model matrix eigenvector is degenerate".into()));
    }
    v /= norm;
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
    Ok(v)
}

fn update_scales(ps: &PointSet, state: &mut EmtvState, weighting: InverseVoteWeight) {
    let wsum: f64 = state.w.iter().sum();
    let (mut s2, mut s1) = (0.0, 0.0);
    for ((p, k), &w) in ps.points().iter().zip(&state.k_inv).zip(&state.w) {
        let res = p.coords().dot(&state.v);
        s2 += res * res * w;
        s1 += state.v.dot(&(k.matrix() * &state.v)).abs() * w;
    }
    state.sigma2 = s2 / wsum;
    state.sigma1_sq = s1 / wsum;
    let d = state.dim();
    let mut vote = DMatrix::zeros(d, d);
    let mut s3 = 0.0;
    for (i, nb) in state.frames.iter().enumerate() {
        for (j, f) in nb {
            let ww = state.w[i] * state.w[*j];
            if ww == 0.0 {
                continue;
            }
            vote.fill(0.0);
            let c = match weighting {
                InverseVoteWeight::Plain => 1.0,
                InverseVoteWeight::Proximity => f.weight(),
            };
            // Frames were filtered by INVERSE_WEIGHT_FLOOR, so this cannot underflow.
            let _ = f.add_inverse_vote(&mut vote, c, &state.vote_source[*j]);
            s3 += (state.k_inv[i].matrix() - &vote).norm_squared() * ww * c;
        }
    }
    state.sigma2_sq = s3 / wsum;
}

/// Closed-form parameter updates, ending with the refresh of `S'_ij`.
pub fn m_step(ps: &PointSet, state: &mut EmtvState, scale: &Scale, cfg: &EmtvConfig) -> Result<()> {
    let d = state.dim();
    let wsum: f64 = state.w.iter().sum();
    if !(wsum >= d as f64) {
        return Err(TvError::DegenerateSupport { weight: wsum, needed: d });
    }
    state.alpha = cfg.alpha_fixed.unwrap_or(wsum / state.len() as f64);
    let (k_inv, capped) = update_inverse_tensors(state, cfg, scale.epsilon(), true)?;
    state.k_inv = k_inv;
    state.cap_active |= capped;
    state.v = least_eigenvector(&model_matrix(ps, state))?;
    update_scales(ps, state, cfg.inverse_weight);
    state.vote_source = state.k_inv.clone();
    Ok(())
}

/// Result of [`fit`].
#[derive(Debug, Clone, Serialize)]
pub struct EmtvReport {
    pub v: Vec<f64>,
    pub alpha: f64,
    pub sigma: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: Vec<f64>,
    pub w: Vec<f64>,
    pub inliers: Vec<bool>,
    pub cap_active: bool,
    pub sigma_clamped: bool,
}

/// Alternates E- and M-steps until the log-likelihood settles.
pub fn fit(ps: &PointSet, scale: &Scale, cfg: &EmtvConfig) -> Result<EmtvReport> {
    let mut state = init(ps, scale, cfg)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut prev: Option<f64> = None;
    while iterations < cfg.max_iters {
        let ll = e_step(ps, &mut state);
        state.log_likelihood.push(ll);
        if let Some(p) = prev {
            if (ll - p).abs() <= cfg.tol * p.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        prev = Some(ll);
        m_step(ps, &mut state, scale, cfg)?;
        iterations += 1;
    }
    let inliers = state.w.iter().map(|&w| w > cfg.inlier_threshold).collect();
    Ok(EmtvReport {
        v: state.v.iter().copied().collect(),
        alpha: state.alpha,
        sigma: state.sigma2.sqrt(),
        sigma1: state.sigma1_sq.sqrt(),
        sigma2: state.sigma2_sq.sqrt(),
        iterations,
        converged,
        log_likelihood: state.log_likelihood,
        w: state.w,
        inliers,
        cap_active: state.cap_active,
        sigma_clamped: state.sigma_clamped,
    })
}
