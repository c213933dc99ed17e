//! Iterative refinement of structure-aware tensors on a Markov random field.
//!
//! Each site `i` holds a hidden tensor `K_i` and an observation `~K_i`. The energy
//!
//! ```text
//! E = sum_i |K_i - ~K_i|_F^2 + g sum_i sum_{j in N(i)} |K_i - S_ij|_F^2
//! ```
//!
//! uses symmetric closed-form votes `S_ij` cast by the current `K_j`. Sites are
//! updated in ascending order with the Gauss-Seidel rule
//! `K_i* = (~K_i + 2g sum_j S_ij) (I + g sum_j (I + c_ij^2 R'^T R'))^-1`,
//! relaxed by `K_i <- (1 - q) K_i + q K_i*`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TvError};
use crate::spatial::{NeighborIndex, PointSet};
use crate::tensor::{accumulate, Decompose, Saliency, Scale, SymTensor, VoteFrame, VoteMode, PRUNE_WEIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrfConfig {
    /// Smoothness weight relative to the data term.
    pub g: f64,
    /// Over-relaxation weight.
    pub q: f64,
    pub max_iters: usize,
    /// Stop once the relative energy change falls below this.
    pub tol: f64,
    /// Cast votes from the observations instead of the current estimates.
    pub freeze_votes: bool,
}

impl Default for MrfConfig {
    fn default() -> Self {
        Self { g: 1.0, q: 1.5, max_iters: 100, tol: 1e-8, freeze_votes: false }
    }
}

impl MrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.g.is_finite() && self.g > 0.0) {
            return Err(TvError::InvalidInput(format!("g must be positive, got {}", self.g)));
        }
        // q = 1 (plain Gauss-Seidel) is accepted as the boundary case.
        if !(self.q >= 1.0 && self.q < 2.0) {
            return Err(TvError::InvalidInput(format!("q must lie in [1, 2), got {}", self.q)));
        }
        if !(self.tol >= 0.0) {
            return Err(TvError::InvalidInput(format!("tol must be non-negative, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Hidden and observed tensors per site, with neighbor geometry.
#[derive(Debug, Clone)]
pub struct MrfState {
    current: Vec<SymTensor>,
    observed: Vec<SymTensor>,
    frames: Vec<Vec<(usize, VoteFrame)>>,
    pub energy_trace: Vec<f64>,
}

impl MrfState {
    /// Starts from `K_i = ~K_i`. Observations default to [`observations_from_votes`].
    pub fn new(ps: &PointSet, idx: &NeighborIndex, scale: &Scale) -> Result<Self> {
        let observed = match ps.tensors() {
            Some(t) => t.to_vec(),
            None => observations_from_votes(ps, idx, scale)?,
        };
        let frames = (0..ps.len())
            .map(|i| {
                idx.neighbors(i, None)
                    .into_iter()
                    .map(|j| VoteFrame::new(ps.point(i), ps.point(j), scale).map(|f| (j, f)))
                    .filter(|f| !matches!(f, Ok((_, f)) if f.weight() < PRUNE_WEIGHT))
                    .filter(|f| !matches!(f, Err(TvError::Degenerate(_))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { current: observed.clone(), observed, frames, energy_trace: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn tensors(&self) -> &[SymTensor] {
        &self.current
    }

    pub fn observations(&self) -> &[SymTensor] {
        &self.observed
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.frames[i].iter().map(|(j, _)| *j)
    }

    pub fn saliencies(&self) -> Vec<Saliency> {
        self.current.iter().map(Decompose::decompose).collect()
    }

    fn voter(&self, j: usize, cfg: &MrfConfig) -> &SymTensor {
        if cfg.freeze_votes {
            &self.observed[j]
        } else {
            &self.current[j]
        }
    }
}

/// Observed tensors from one pass of ball votes, divided by the largest eigenvalue over all sites.
///
/// The shared divisor keeps weakly supported sites (outliers) weak.
pub fn observations_from_votes(ps: &PointSet, idx: &NeighborIndex, scale: &Scale) -> Result<Vec<SymTensor>> {
    let ball = SymTensor::identity(ps.dim());
    let raw = (0..ps.len())
        .map(|i| {
            let nb = idx.neighbors(i, None);
            accumulate(ps.point(i), nb.iter().map(|&j| (ps.point(j), &ball)), scale, VoteMode::Symmetric)
        })
        .collect::<Result<Vec<_>>>()?;
    let lmax = raw.iter().map(SymTensor::largest_eigenvalue).fold(0.0, f64::max);
    let divisor = if lmax > 0.0 { lmax } else { 1.0 };
    Ok(raw.iter().map(|k| normalize_site(&k.scaled(1.0 / divisor))).collect())
}

/// Divides by the largest eigenvalue when it exceeds 1; eigenvalues below machine epsilon are raised to it.
///
/// The floor must stay tiny: a larger floor traps over-relaxed sites whose target eigenvalue lies below it.
fn normalize_site(k: &SymTensor) -> SymTensor {
    let eig = k.matrix().clone().symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let divisor = if lmax > 1.0 { lmax } else { 1.0 };
    let values = eig.eigenvalues.map(|l| (l / divisor).max(f64::EPSILON));
    let q = &eig.eigenvectors;
    SymTensor::from_matrix_unchecked(q * DMatrix::from_diagonal(&values) * q.transpose())
}

/// Total energy of the current state.
pub fn energy(state: &MrfState, cfg: &MrfConfig) -> f64 {
    let d = state.current.first().map_or(0, SymTensor::dim);
    let mut total = 0.0;
    let mut vote = DMatrix::zeros(d, d);
    for (i, ki) in state.current.iter().enumerate() {
        total += ki.frobenius_distance(state.observed[i].matrix()).powi(2);
        for (j, frame) in &state.frames[i] {
            vote.fill(0.0);
            frame.add_vote_symmetric(&mut vote, 1.0, state.voter(*j, cfg));
            total += cfg.g * (ki.matrix() - &vote).norm_squared();
        }
    }
    total
}

/// Gauss-Seidel target `K_i*` for site `i` with all neighbors held fixed.
pub fn gauss_seidel_update(state: &MrfState, i: usize, cfg: &MrfConfig) -> Result<SymTensor> {
    let d = state.observed[i].dim();
    let mut lhs = state.observed[i].matrix().clone();
    let mut rhs = DMatrix::<f64>::identity(d, d);
    for (j, frame) in &state.frames[i] {
        frame.add_vote_symmetric(&mut lhs, 2.0 * cfg.g, state.voter(*j, cfg));
        let c2 = frame.weight() * frame.weight();
        rhs += (DMatrix::identity(d, d) + frame.right_factor_gram() * c2) * cfg.g;
    }
    let inv = rhs
        .cholesky()
        .ok_or_else(|| TvError::Numerical("normal matrix is not positive definite".into()))?
        .inverse();
    Ok(SymTensor::from_matrix_unchecked(lhs * inv))
}

/// One over-relaxed Gauss-Seidel pass in ascending site order, followed by per-site normalization.
pub fn sor_sweep(state: &mut MrfState, cfg: &MrfConfig) -> Result<()> {
    for i in 0..state.len() {
        let target = gauss_seidel_update(state, i, cfg)?;
        let relaxed = state.current[i].matrix() * (1.0 - cfg.q) + target.matrix() * cfg.q;
        state.current[i] = normalize_site(&SymTensor::from_matrix_unchecked(relaxed));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct MrfReport {
    /// Energy before the first sweep, then after every sweep.
    pub energy_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Sweeps until the relative energy change drops below `cfg.tol` or `cfg.max_iters` is reached.
pub fn run(ps: &PointSet, scale: &Scale, cfg: &MrfConfig) -> Result<(MrfState, MrfReport)> {
    cfg.validate()?;
    let idx = NeighborIndex::build(ps, scale);
    let mut state = MrfState::new(ps, &idx, scale)?;
    let report = run_state(&mut state, cfg)?;
    Ok((state, report))
}

/// As [`run`], on an already initialized state.
pub fn run_state(state: &mut MrfState, cfg: &MrfConfig) -> Result<MrfReport> {
    cfg.validate()?;
    let mut prev = energy(state, cfg);
    state.energy_trace.push(prev);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_iters {
        sor_sweep(state, cfg)?;
        sweeps += 1;
        let e = energy(state, cfg);
        state.energy_trace.push(e);
        let change = (prev - e).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = e;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("MRF refinement did not converge in {} sweeps", cfg.max_iters);
    }
    Ok(MrfReport { energy_trace: state.energy_trace.clone(), sweeps, converged })
}

/// Keeps site `i` iff its surface saliency `lambda_1 - lambda_2` is at least `threshold`.
pub fn filter(state: &MrfState, threshold: f64) -> Vec<bool> {
    state.saliencies().iter().map(|s| s.surface_saliency() >= threshold).collect()
}

/// Otsu threshold of `values` over a 256-bin histogram.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) {
        return lo;
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(k, &h)| k as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    // Bins between well-separated modes tie; the threshold sits mid-plateau.
    let (mut best, mut first_k, mut last_k) = (-1.0, 0, 0);
    for (k, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += k as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best * (1.0 + 1e-12) {
            best = between;
            first_k = k;
            last_k = k;
        } else if between >= best * (1.0 - 1e-12) {
            last_k = k;
        }
    }
    lo + ((first_k + last_k) as f64 / 2.0 + 1.0) * width
}
