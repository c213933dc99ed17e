use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde_json::{json, Value};
use tensorvote::datagen::{self, gen_two_view, Method, SweepSpec, SweepVariable, TwoViewSpec};
use tensorvote::emtv::{self, EmtvConfig};
use tensorvote::mrftv::{self, MrfConfig};
use tensorvote::oracle::{generate_field, FieldKind, FieldMethod, GridSpec};
use tensorvote::robustfit::{self, Correspondence, FundamentalMethod, FundamentalOptions};
use tensorvote::tensor::{line_angle_deg, outside_45_degree_zone};
use tensorvote::{PointSet, Scale, TvError};

use crate::input::{parse_vector, read_rows};
use crate::{
    CliError, EmtvArgs, FieldMode, FileConfig, FilterArgs, FitFundamentalArgs, FitLineArgs, FitMethod, Kind, Outcome,
    SetArg, SweepArgs, VoteFieldArgs,
};

fn usage(e: TvError) -> CliError {
    CliError::Usage(e.to_string())
}

fn positive(flag: &str, x: f64) -> Result<f64, CliError> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(CliError::Usage(format!("{flag} must be positive, got {x}")))
    }
}

fn non_negative(flag: &str, x: f64) -> Result<f64, CliError> {
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(CliError::Usage(format!("{flag} must be non-negative, got {x}")))
    }
}

fn scale(sigma_d: f64) -> Result<Scale, CliError> {
    Scale::new(positive("--sigma-d", sigma_d)?).map_err(usage)
}

/// Pretty JSON with object keys in sorted order.
fn render(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

fn to_value<T: serde::Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("library types serialize to JSON")
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn rows_of3(m: &Matrix3<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

fn emtv_config(file: &FileConfig, args: &EmtvArgs) -> Result<EmtvConfig, CliError> {
    let mut cfg = file.emtv.unwrap_or_default();
    if let Some(m) = args.max_iters {
        cfg.max_iters = m;
    }
    if let Some(t) = args.tol {
        cfg.tol = non_negative("--tol", t)?;
    }
    if let Some(i) = args.init {
        cfg.init = i.into();
    }
    if cfg.max_iters == 0 {
        return Err(CliError::Usage("--max-iters must be positive".into()));
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn seed(flag: Option<u64>, file: &FileConfig) -> u64 {
    flag.or(file.seed).unwrap_or(0)
}

pub fn vote_field(a: &VoteFieldArgs) -> Result<Outcome, CliError> {
    let scale = scale(a.sigma_d)?;
    let d = a.dim;
    if !(2..=3).contains(&d) {
        return Err(CliError::Usage(format!("--dim must be 2 or 3, got {d}")));
    }
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be positive".into()));
    }
    let kind = match a.kind {
        Kind::Stick => FieldKind::Stick,
        Kind::Plate if d < 3 => return Err(CliError::Usage("plate fields need --dim 3".into())),
        Kind::Plate => FieldKind::Plate,
        Kind::Ball => FieldKind::Ball,
    };
    if a.cutoff_45 && kind != FieldKind::Stick {
        return Err(CliError::Usage("--cutoff-45 applies to stick fields only".into()));
    }
    let mut grid = GridSpec::for_scale(&scale, a.steps);
    if let Some(h) = a.half_extent {
        if positive("--half-extent", h)? < grid.half_extent {
            return Err(CliError::Usage(format!("--half-extent must be at least 3 sqrt(sigma_d) = {}", grid.half_extent)));
        }
        grid.half_extent = h;
    }
    let method = match a.mode {
        FieldMode::Asymmetric => FieldMethod::ClosedForm,
        FieldMode::Symmetric => FieldMethod::Symmetric,
        FieldMode::Discrete => FieldMethod::Discrete,
    };
    let field = generate_field(kind, d, &scale, &grid, method, None)?;
    let normal = DVector::from_fn(d, |k, _| if k == d - 1 { 1.0 } else { 0.0 });

    let mut out = String::new();
    let cols = ["x", "lambda", "o"].iter().flat_map(|p| (0..d).map(move |k| format!("{p}{k}"))).collect::<Vec<_>>();
    out.push_str(&cols.join(","));
    out.push('\n');
    for (site, orientation) in field.sites.iter().zip(field.orientations()) {
        let x = site.position.coords();
        let silenced = a.cutoff_45 && outside_45_degree_zone(&(x / x.norm()), &normal);
        let values = x
            .iter()
            .copied()
            .chain(site.saliency.eigenvalues.iter().map(|&l| if silenced { 0.0 } else { l }))
            .chain(orientation.iter().map(|&o| if silenced { 0.0 } else { o }))
            .map(|v| v.to_string())
            .collect::<Vec<_>>();
        let _ = writeln!(out, "{}", values.join(","));
    }
    Ok(Outcome { body: out, converged: true })
}

pub fn filter(a: &FilterArgs, file: &FileConfig) -> Result<Outcome, CliError> {
    let sigma_d = a.sigma_d.or(file.sigma_d).ok_or_else(|| CliError::Usage("--sigma-d is required".into()))?;
    let scale = scale(sigma_d)?;
    let mut cfg: MrfConfig = file.mrf.unwrap_or_default();
    if let Some(g) = a.g {
        cfg.g = g;
    }
    if let Some(q) = a.q {
        cfg.q = q;
    }
    if let Some(m) = a.max_iters {
        cfg.max_iters = m;
    }
    if let Some(t) = a.tol {
        cfg.tol = t;
    }
    cfg.validate().map_err(usage)?;
    let threshold = a.threshold.or(file.threshold).map(|t| non_negative("--threshold", t)).transpose()?;

    let ps = PointSet::from_rows(&read_rows(&a.input)?)?;
    let (state, report) = mrftv::run(&ps, &scale, &cfg)?;
    let saliencies = state.saliencies();
    let values: Vec<f64> = saliencies.iter().map(|s| s.surface_saliency()).collect();
    let threshold = threshold.unwrap_or_else(|| mrftv::otsu_threshold(&values));
    let keep = mrftv::filter(&state, threshold);
    let sites: Vec<Value> = state
        .tensors()
        .iter()
        .zip(&saliencies)
        .zip(&keep)
        .enumerate()
        .map(|(i, ((k, s), kept))| {
            json!({
                "index": i,
                "tensor": rows_of(k.matrix()),
                "eigenvalues": s.eigenvalues,
                "saliency": s.surface_saliency(),
                "kept": kept,
            })
        })
        .collect();
    let body = json!({
        "sigma_d": sigma_d,
        "config": to_value(&cfg),
        "converged": report.converged,
        "sweeps": report.sweeps,
        "energy_trace": report.energy_trace,
        "threshold": threshold,
        "kept_count": keep.iter().filter(|&&k| k).count(),
        "sites": sites,
    });
    Ok(Outcome { body: render(&body), converged: report.converged })
}

pub fn fit_line(a: &FitLineArgs, file: &FileConfig) -> Result<Outcome, CliError> {
    let truth = a.truth.as_deref().map(parse_vector).transpose().map_err(CliError::Usage)?;
    let sigma_d = a.sigma_d.or(file.sigma_d).unwrap_or(0.1);
    let scale = scale(sigma_d)?;
    let emtv_cfg = emtv_config(file, &a.emtv)?;
    let mut ransac_cfg = file.ransac.unwrap_or_default();
    if let Some(t) = a.ransac_threshold {
        ransac_cfg.inlier_scale = t;
    }
    positive("--ransac-threshold", ransac_cfg.inlier_scale)?;
    let seed = seed(a.seed, file);

    let mut rows = read_rows(&a.input)?;
    if a.homogeneous {
        rows.iter_mut().for_each(|r| r.push(1.0));
    }
    let ps = PointSet::from_rows(&rows)?;
    if let Some(t) = &truth {
        if t.len() != ps.dim() {
            return Err(CliError::Usage(format!("--truth has {} components, the fit has {}", t.len(), ps.dim())));
        }
    }

    let mut body = json!({ "dim": ps.dim(), "points": ps.len(), "homogeneous": a.homogeneous });
    let (normal, inliers, converged) = match a.method {
        FitMethod::Tls => {
            body["method"] = json!("tls");
            (robustfit::tls_fit(&ps)?, vec![true; ps.len()], true)
        }
        FitMethod::Ransac => {
            let mut rng = datagen::substream(seed, 0, datagen::Stream::Ransac);
            let fit = robustfit::ransac_fit(&ps, &ransac_cfg, &mut rng)?;
            body["method"] = json!("ransac");
            body["trials"] = json!(fit.trials);
            body["ransac"] = to_value(&ransac_cfg);
            body["seed"] = json!(seed);
            (fit.normal, fit.inliers, true)
        }
        FitMethod::Emtv => {
            let report = emtv::fit(&ps, &scale, &emtv_cfg)?;
            body["method"] = json!("emtv");
            body["sigma_d"] = json!(sigma_d);
            body["emtv"] = to_value(&emtv_cfg);
            for key in ["alpha", "sigma", "sigma1", "sigma2", "iterations", "converged", "log_likelihood", "w", "cap_active", "sigma_clamped"] {
                body[key] = to_value(&report)[key].clone();
            }
            (DVector::from_vec(report.v.clone()), report.inliers.clone(), report.converged)
        }
    };
    body["normal"] = json!(normal.as_slice());
    body["inliers"] = json!(indices(&inliers));
    body["inlier_count"] = json!(inliers.iter().filter(|&&k| k).count());
    if let Some(t) = truth {
        body["angular_error_deg"] = json!(line_angle_deg(&normal, &DVector::from_vec(t)));
    }
    Ok(Outcome { body: render(&body), converged })
}

pub fn fit_fundamental(a: &FitFundamentalArgs, file: &FileConfig) -> Result<Outcome, CliError> {
    let seed = seed(a.seed, file);
    let sigma_d = a.sigma_d.or(file.sigma_d).unwrap_or(FundamentalOptions::default().sigma_d);
    positive("--sigma-d", sigma_d)?;
    let mut opts = FundamentalOptions { sigma_d, emtv: emtv_config(file, &a.emtv)?, seed, ..FundamentalOptions::default() };
    if let Some(r) = file.ransac {
        opts.ransac = r;
    }
    if let Some(t) = a.ransac_threshold {
        opts.ransac.inlier_scale = t;
    }
    positive("--ransac-threshold", opts.ransac.inlier_scale)?;

    let (corrs, synthetic) = match &a.input {
        Some(path) => {
            let rows = read_rows(path)?;
            if rows[0].len() != 4 {
                return Err(CliError::Data(format!("{}: expected 4 columns (u, v, u', v'), found {}", path.display(), rows[0].len())));
            }
            (rows.iter().map(|r| Correspondence::new(r[0], r[1], r[2], r[3])).collect::<Vec<_>>(), None)
        }
        None => {
            if a.inliers < 8 {
                return Err(CliError::Usage(format!("--inliers must be at least 8, got {}", a.inliers)));
            }
            let spec = TwoViewSpec {
                n_inliers: a.inliers,
                oi_ratio: non_negative("--oi", a.oi)?,
                noise_px: non_negative("--noise-px", a.noise_px)?,
                seed,
                ..TwoViewSpec::default()
            };
            let inst = gen_two_view(&spec)?;
            (inst.correspondences.clone(), Some(inst))
        }
    };
    let method = match a.method {
        FitMethod::Emtv => FundamentalMethod::Emtv,
        FitMethod::Ransac => FundamentalMethod::Ransac,
        FitMethod::Tls => FundamentalMethod::Tls,
    };
    let fit = robustfit::fit_fundamental(&corrs, method, &opts)?;
    let singular = fit.f.singular_values();
    let rank = singular.iter().filter(|&&s| s > 1e-12 * singular.max()).count();
    let mut body = json!({
        "method": to_value(&method),
        "matches": corrs.len(),
        "f": rows_of3(&fit.f),
        "singular_values": singular.as_slice(),
        "rank": rank,
        "frobenius_norm": fit.f.norm(),
        "inliers": indices(&fit.inliers),
        "inlier_count": fit.inliers.iter().filter(|&&k| k).count(),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "options": to_value(&opts),
    });
    if let Some(inst) = synthetic {
        body["synthetic"] = json!({ "inliers": a.inliers, "oi": a.oi, "noise_px": a.noise_px, "seed": seed });
        body["rms_error"] = json!(robustfit::rms_error(&fit.f, &inst.clean));
        body["truth_distance"] = json!((fit.f - inst.f).norm().min((fit.f + inst.f).norm()));
        body["truth_f"] = json!(rows_of3(&inst.f));
    }
    Ok(Outcome { body: render(&body), converged: fit.converged })
}

pub fn sweep(a: &SweepArgs, file: &FileConfig) -> Result<Outcome, CliError> {
    let mut spec = match a.set {
        SetArg::One => SweepSpec::set1(),
        SetArg::Two => SweepSpec::set2(),
        SetArg::Noise => SweepSpec::noise(),
        SetArg::Scale => SweepSpec::scale(),
    };
    let mut methods: Vec<Method> = a
        .methods
        .iter()
        .map(|m| match m {
            FitMethod::Emtv => Method::Emtv,
            FitMethod::Ransac => Method::Ransac,
            FitMethod::Tls => Method::Tls,
        })
        .collect();
    methods.sort();
    methods.dedup();
    spec.methods = methods;
    spec.trials = a.trials.or(file.trials).unwrap_or(100);
    if spec.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    spec.seed = seed(a.seed, file);
    spec.sigma_d = positive("--sigma-d", a.sigma_d.or(file.sigma_d).unwrap_or(spec.sigma_d))?;
    if let Some(m) = a.max_oi {
        if spec.variable != SweepVariable::OiRatio {
            return Err(CliError::Usage("--max-oi applies to sets 1 and 2 only".into()));
        }
        spec.values.retain(|&v| v <= m);
        if spec.values.is_empty() {
            return Err(CliError::Usage(format!("--max-oi {m} leaves no cells")));
        }
    }
    spec.emtv = emtv_config(file, &a.emtv)?;
    if let Some(r) = file.ransac {
        spec.ransac = r;
    }
    let rows = datagen::run_sweep(&spec)?;
    Ok(Outcome { body: datagen::sweep_csv(&rows), converged: true })
}
