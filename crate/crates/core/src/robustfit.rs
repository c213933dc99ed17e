//! Baseline hyperplane fitters and fundamental-matrix estimation.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::emtv::{self, EmtvConfig};
use crate::error::{Result, TvError};
use crate::spatial::PointSet;
use crate::tensor::{Point, Scale};

fn scatter<'a>(points: impl Iterator<Item = (&'a Point, f64)>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for (p, w) in points {
        let x = p.coords();
        m += x * x.transpose() * w;
    }
    m
}

fn least_eigenvector(m: &DMatrix<f64>) -> DVector<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut v = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
    v
}

/// Unit normal of the hyperplane through the origin minimizing `sum_i (x_i^T v)^2`.
pub fn tls_fit(ps: &PointSet) -> Result<DVector<f64>> {
    tls_fit_subset(ps, &vec![true; ps.len()])
}

/// [`tls_fit`] restricted to points with `mask[i]`.
pub fn tls_fit_subset(ps: &PointSet, mask: &[bool]) -> Result<DVector<f64>> {
    let d = ps.dim();
    let count = mask.iter().filter(|&&m| m).count();
    if count + 1 < d {
        return Err(TvError::Underdetermined { needed: d - 1, got: count });
    }
    let m = scatter(ps.points().iter().zip(mask).filter(|(_, &k)| k).map(|(p, _)| (p, 1.0)), d);
    Ok(least_eigenvector(&m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Points with `|x^T v|` at most this are counted as consensus.
    pub inlier_scale: f64,
    /// Probability of drawing at least one outlier-free sample.
    pub confidence: f64,
    pub max_trials: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_scale: 0.25, confidence: 0.99, max_trials: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct RansacFit {
    pub normal: DVector<f64>,
    pub inliers: Vec<bool>,
    pub trials: usize,
}

/// Hypotheses from `d - 1` sampled points; the best consensus set is refit with TLS.
///
/// Ties in consensus size keep the earlier hypothesis, so the result depends only on `rng`.
pub fn ransac_fit<R: Rng + ?Sized>(ps: &PointSet, cfg: &RansacConfig, rng: &mut R) -> Result<RansacFit> {
    if !(cfg.inlier_scale > 0.0) || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(TvError::InvalidInput("RANSAC needs inlier_scale > 0 and confidence in (0, 1)".into()));
    }
    let d = ps.dim();
    let n = ps.len();
    let s = d - 1;
    if n < s {
        return Err(TvError::Underdetermined { needed: s, got: n });
    }
    let consensus = |v: &DVector<f64>| -> Vec<bool> {
        ps.points().iter().map(|p| p.coords().dot(v).abs() <= cfg.inlier_scale).collect()
    };
    let mut best: Option<(usize, DVector<f64>)> = None;
    let mut needed = cfg.max_trials;
    let mut trials = 0;
    while trials < needed.min(cfg.max_trials) {
        trials += 1;
        let idx = sample(rng, n, s);
        let m = scatter(idx.iter().map(|i| (ps.point(i), 1.0)), d);
        let v = least_eigenvector(&m);
        let score = consensus(&v).iter().filter(|&&k| k).count();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, v));
            let frac = score as f64 / n as f64;
            let p_good = frac.powi(s as i32);
            needed = if p_good >= 1.0 {
                trials
            } else if p_good <= 0.0 {
                cfg.max_trials
            } else {
                let t = (1.0 - cfg.confidence).ln() / (1.0 - p_good).ln();
                t.ceil().min(cfg.max_trials as f64) as usize
            };
        }
    }
    let (_, v) = best.expect("at least one trial runs");
    let mut inliers = consensus(&v);
    let normal = match tls_fit_subset(ps, &inliers) {
        Ok(refit) => {
            inliers = consensus(&refit);
            refit
        }
        Err(_) => v,
    };
    Ok(RansacFit { normal, inliers, trials })
}

/// A point match between two images, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub u: [f64; 2],
    pub u_prime: [f64; 2],
}

impl Correspondence {
    pub fn new(u: f64, v: f64, u_prime: f64, v_prime: f64) -> Self {
        Self { u: [u, v], u_prime: [u_prime, v_prime] }
    }

    /// `(uu', uv', u, vu', vv', v, u', v', 1)`, so that `U^T h = u'^T F u` for column-major `h`.
    pub fn design_vector(&self) -> [f64; 9] {
        let [u, v] = self.u;
        let [up, vp] = self.u_prime;
        [u * up, u * vp, u, v * up, v * vp, v, up, vp, 1.0]
    }
}

/// `F` flattened column-major: `(f11, f21, f31, f12, ..., f33)`.
pub fn column_major(f: &Matrix3<f64>) -> [f64; 9] {
    let mut h = [0.0; 9];
    h.copy_from_slice(f.as_slice());
    h
}

fn normalizing_transform(pts: impl Iterator<Item = [f64; 2]> + Clone) -> Result<Matrix3<f64>> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = pts.map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if !(mean_dist > 0.0) {
        return Err(TvError::Degenerate("points coincide; normalization scale is undefined".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let q = t * Vector3::new(p[0], p[1], 1.0);
    [q[0] / q[2], q[1] / q[2]]
}

/// Centroid to the origin and mean distance `sqrt(2)`, independently per image.
///
/// Returns the normalized matches and the transforms `T`, `T'` of the first and second image.
pub fn hartley_normalize(corrs: &[Correspondence]) -> Result<(Vec<Correspondence>, Matrix3<f64>, Matrix3<f64>)> {
    if corrs.len() < 2 {
        return Err(TvError::Underdetermined { needed: 2, got: corrs.len() });
    }
    let t = normalizing_transform(corrs.iter().map(|c| c.u))?;
    let tp = normalizing_transform(corrs.iter().map(|c| c.u_prime))?;
    let out = corrs.iter().map(|c| Correspondence { u: apply(&t, c.u), u_prime: apply(&tp, c.u_prime) }).collect();
    Ok((out, t, tp))
}

/// Zeroes the smallest singular value, scales to unit Frobenius norm and fixes the sign.
pub fn rank2_unit(f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let mut svd = f.svd(true, true);
    let k = svd.singular_values.imin();
    svd.singular_values[k] = 0.0;
    let g = svd.recompose().map_err(|e| TvError::Numerical(e.to_string()))?;
    let norm = g.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(TvError::Numerical("fundamental matrix vanished".into()));
    }
    let mut g = g / norm;
    if let Some(first) = g.as_slice().iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            g = -g;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FundamentalMethod {
    Emtv,
    Ransac,
    Tls,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FundamentalOptions {
    /// Scale of analysis in the space of normalized design vectors.
    pub sigma_d: f64,
    pub emtv: EmtvConfig,
    /// Consensus threshold on the algebraic residual of normalized design vectors.
    pub ransac: RansacConfig,
    pub seed: u64,
}

impl Default for FundamentalOptions {
    fn default() -> Self {
        Self {
            sigma_d: 0.5,
            emtv: EmtvConfig::default(),
            ransac: RansacConfig { inlier_scale: 0.01, ..RansacConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FundamentalFit {
    /// Rank 2, unit Frobenius norm.
    pub f: Matrix3<f64>,
    pub inliers: Vec<bool>,
    pub iterations: usize,
    /// False only when EM stopped at its iteration cap.
    pub converged: bool,
    pub method: FundamentalMethod,
}

/// Linear fundamental-matrix estimation on Hartley-normalized design vectors.
pub fn fit_fundamental(corrs: &[Correspondence], method: FundamentalMethod, opts: &FundamentalOptions) -> Result<FundamentalFit> {
    if corrs.len() < 8 {
        return Err(TvError::Underdetermined { needed: 8, got: corrs.len() });
    }
    let (normed, t, tp) = hartley_normalize(corrs)?;
    let ps = PointSet::new(normed.iter().map(|c| Point::new(c.design_vector().to_vec())).collect::<Result<_>>()?)?;
    let (h, inliers, iterations, converged) = match method {
        FundamentalMethod::Tls => (tls_fit(&ps)?, vec![true; corrs.len()], 1, true),
        FundamentalMethod::Ransac => {
            let mut rng = crate::datagen::substream(opts.seed, 0, crate::datagen::Stream::Ransac);
            let fit = ransac_fit(&ps, &opts.ransac, &mut rng)?;
            (fit.normal, fit.inliers, fit.trials, true)
        }
        FundamentalMethod::Emtv => {
            let scale = Scale::new(opts.sigma_d)?;
            let report = emtv::fit(&ps, &scale, &opts.emtv)?;
            (DVector::from_vec(report.v), report.inliers, report.iterations, report.converged)
        }
    };
    let f_hat = Matrix3::from_column_slice(h.as_slice());
    let f = rank2_unit(&(tp.transpose() * f_hat * t))?;
    Ok(FundamentalFit { f, inliers, iterations, converged, method })
}

/// `sqrt(mean_i (U_i^T h)^2)` over `clean`, with `h` the column-major entries of `f`.
pub fn rms_error(f: &Matrix3<f64>, clean: &[Correspondence]) -> f64 {
    if clean.is_empty() {
        return 0.0;
    }
    let h = column_major(f);
    let sum: f64 = clean
        .iter()
        .map(|c| {
            let r: f64 = c.design_vector().iter().zip(&h).map(|(a, b)| a * b).sum();
            r * r
        })
        .sum();
    (sum / clean.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rows(r: &[[f64; 2]]) -> PointSet {
        PointSet::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tls_axis_aligned_line() {
        let ps = rows(&[[1.0, 0.0], [-2.0, 0.0], [0.5, 0.0]]);
        let v = tls_fit(&ps).unwrap();
        assert!((v[1].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tls_two_points_and_underdetermined() {
        let ps = rows(&[[1.0, 1.0], [2.0, 2.0]]);
        let v = tls_fit(&ps).unwrap();
        assert!(v.dot(&DVector::from_vec(vec![1.0, 1.0])).abs() < 1e-12);
        let ps3 = PointSet::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(tls_fit(&ps3), Err(TvError::Underdetermined { .. })));
    }

    #[test]
    fn ransac_without_outliers_keeps_everything() {
        let ps = rows(&[[1.0, 1.0], [-0.5, -0.5], [0.2, 0.2], [0.9, 0.9]]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let fit = ransac_fit(&ps, &RansacConfig::default(), &mut rng).unwrap();
        assert!(fit.inliers.iter().all(|&k| k));
    }

    #[test]
    fn epipolar_identity() {
        let f = Matrix3::new(0.1, -0.4, 0.3, 0.7, 0.2, -0.5, 0.05, 0.6, 0.9);
        let c = Correspondence::new(12.0, -3.5, 7.25, 40.0);
        let u = Vector3::new(12.0, -3.5, 1.0);
        let up = Vector3::new(7.25, 40.0, 1.0);
        let direct = up.dot(&(f * u));
        let h = column_major(&f);
        let via: f64 = c.design_vector().iter().zip(&h).map(|(a, b)| a * b).sum();
        assert!((direct - via).abs() < 1e-12);
    }

    #[test]
    fn hartley_single_point_fails() {
        assert!(hartley_normalize(&[Correspondence::new(1.0, 2.0, 3.0, 4.0)]).is_err());
    }

    #[test]
    fn rank2_projection() {
        let f = Matrix3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0);
        let g = rank2_unit(&f).unwrap();
        let sv = g.svd(false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!(s[2] < 1e-12 * s[0]);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rms_scales_linearly() {
        let f = rank2_unit(&Matrix3::new(0.0, -1.0, 0.2, 1.0, 0.0, -0.3, -0.1, 0.4, 0.01)).unwrap();
        let data = [Correspondence::new(1.0, 2.0, 1.5, 2.5), Correspondence::new(-1.0, 0.5, -0.7, 0.8)];
        let a = rms_error(&f, &data);
        let b = rms_error(&(f * 3.0), &data);
        assert!((b - 3.0 * a).abs() < 1e-12);
        let manual = data
            .iter()
            .map(|c| {
                let r = Vector3::new(c.u_prime[0], c.u_prime[1], 1.0).dot(&(f * Vector3::new(c.u[0], c.u[1], 1.0)));
                r * r
            })
            .sum::<f64>();
        assert!((a - (manual / 2.0).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hartley_statistics(pts in prop::collection::vec((-500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0), 3..40)) {
            let corrs: Vec<_> = pts.iter().map(|&(a, b, c, d)| Correspondence::new(a, b, c, d)).collect();
            let (n, t, tp) = hartley_normalize(&corrs).unwrap();
            for pick in [0usize, 1] {
                let get = |c: &Correspondence| if pick == 0 { c.u } else { c.u_prime };
                let m = n.len() as f64;
                let cx = n.iter().map(|c| get(c)[0]).sum::<f64>() / m;
                let cy = n.iter().map(|c| get(c)[1]).sum::<f64>() / m;
                let md = n.iter().map(|c| (get(c)[0].powi(2) + get(c)[1].powi(2)).sqrt()).sum::<f64>() / m;
                prop_assert!(cx.abs() < 1e-9 && cy.abs() < 1e-9);
                prop_assert!((md - std::f64::consts::SQRT_2).abs() < 1e-9);
            }
            prop_assert!(t.try_inverse().is_some() && tp.try_inverse().is_some());
            // Denormalizing a normalized-space F and normalizing back is the identity.
            let f = Matrix3::new(0.3, -0.1, 0.2, 0.5, 0.4, -0.6, 0.1, 0.2, 0.7);
            let den = tp.transpose() * f * t;
            let back = tp.try_inverse().unwrap().transpose() * den * t.try_inverse().unwrap();
            prop_assert!((back - f).amax() < 1e-10);
        }
    }
}
