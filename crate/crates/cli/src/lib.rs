//! Command-line front end for the `tensorvote` library.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
//! (degenerate support or non-convergence; the report is still written).

mod commands;
pub mod input;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use tensorvote::emtv::{EmtvConfig, EmtvInit};
use tensorvote::mrftv::MrfConfig;
use tensorvote::robustfit::RansacConfig;
use tensorvote::TvError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}:{line}: {msg}")]
    Parse { origin: String, line: usize, msg: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Library(#[from] TvError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Parse { .. } | CliError::Data(_) => 2,
            CliError::Library(TvError::InvalidInput(_) | TvError::DimensionMismatch { .. }) => 2,
            CliError::Library(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tvote", version, about = "Closed-form tensor voting, MRF tensor refinement and EM robust fitting")]
pub struct Cli {
    /// Worker threads [default: available cores]. Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file overriding built-in defaults; explicit flags override the file.
    /// Keys: sigma_d, seed, trials, threshold, emtv, mrf, ransac.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Write the result to FILE instead of standard output.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Votes cast by a canonical tensor at the origin onto a lattice, as CSV.
    VoteField(VoteFieldArgs),
    /// MRF refinement of ball-vote tensors and saliency filtering, as JSON.
    Filter(FilterArgs),
    /// Robust hyperplane fit through the origin, as JSON.
    FitLine(FitLineArgs),
    /// Fundamental matrix from point matches or a synthetic two-view instance, as JSON.
    FitFundamental(FitFundamentalArgs),
    /// Seeded robustness sweep over synthetic lines, as CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Stick,
    Plate,
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FieldMode {
    /// Closed-form vote, saliency from its left singular vectors.
    Asymmetric,
    /// Symmetric part of the closed-form vote.
    Symmetric,
    /// Sum of osculating-arc stick votes over sampled directions.
    Discrete,
}

#[derive(Debug, Args)]
pub struct VoteFieldArgs {
    #[arg(long, value_enum, default_value = "stick")]
    pub kind: Kind,
    /// Dimension, 2 or 3 (plates need 3).
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Scale of analysis sigma_d, in squared length units.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_d: f64,
    /// Lattice steps on each side of the origin.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Half-width of the lattice in length units [default: 3 sqrt(sigma_d), also the minimum].
    #[arg(long)]
    pub half_extent: Option<f64>,
    #[arg(long, value_enum, default_value = "asymmetric")]
    pub mode: FieldMode,
    /// Zero stick votes at sites more than 45 degrees off the voter's tangent plane.
    #[arg(long)]
    pub cutoff_45: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Points CSV, one point per row.
    #[arg(long)]
    pub input: PathBuf,
    /// Scale of analysis sigma_d, in squared length units [required unless in --config].
    #[arg(long)]
    pub sigma_d: Option<f64>,
    /// Smoothness weight g [default: 1.0].
    #[arg(long)]
    pub g: Option<f64>,
    /// Over-relaxation weight q in [1, 2) [default: 1.5].
    #[arg(long)]
    pub q: Option<f64>,
    /// Sweep limit [default: 100].
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative energy change that stops the sweeps [default: 1e-8].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Keep sites whose saliency lambda_1 - lambda_2 reaches this [default: Otsu split].
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMethod {
    Emtv,
    Ransac,
    Tls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Structure,
    Ball,
}

impl From<InitArg> for EmtvInit {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Structure => EmtvInit::StructureAware,
            InitArg::Ball => EmtvInit::Ball,
        }
    }
}

/// EM settings shared by the fitting subcommands.
#[derive(Debug, Args)]
pub struct EmtvArgs {
    /// EM iteration limit [default: 100].
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative log-likelihood change that stops EM [default: 1e-8].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Initialization of the inverse tensors [default: structure].
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
}

#[derive(Debug, Args)]
pub struct FitLineArgs {
    /// Points CSV, one point per row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "emtv")]
    pub method: FitMethod,
    /// Scale of analysis sigma_d, in squared length units [default: 0.1].
    #[arg(long)]
    pub sigma_d: Option<f64>,
    /// Ground-truth normal, comma-separated; adds the angular error in degrees.
    #[arg(long, allow_hyphen_values = true, value_name = "A,B,..")]
    pub truth: Option<String>,
    /// Append a constant 1 to every point so the hyperplane may miss the origin.
    #[arg(long)]
    pub homogeneous: bool,
    /// RANSAC consensus distance, in length units [default: 0.25].
    #[arg(long)]
    pub ransac_threshold: Option<f64>,
    /// Seed of the RANSAC sampling stream [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub emtv: EmtvArgs,
}

#[derive(Debug, Args)]
pub struct FitFundamentalArgs {
    /// Matches CSV with columns u, v, u', v' in pixels [default: synthetic instance].
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "emtv")]
    pub method: FitMethod,
    /// Scale of analysis on normalized design vectors [default: 0.5].
    #[arg(long)]
    pub sigma_d: Option<f64>,
    /// RANSAC threshold on the normalized algebraic residual [default: 0.01].
    #[arg(long)]
    pub ransac_threshold: Option<f64>,
    /// Seed of the synthetic scene and of RANSAC sampling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic instance: clean matches.
    #[arg(long, default_value_t = 100)]
    pub inliers: usize,
    /// Synthetic instance: outlier/inlier ratio.
    #[arg(long, default_value_t = 10.0)]
    pub oi: f64,
    /// Synthetic instance: Gaussian image noise, in pixels.
    #[arg(long, default_value_t = 0.5)]
    pub noise_px: f64,
    #[command(flatten)]
    pub emtv: EmtvArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetArg {
    /// OI ratio 0.1..1, step 0.1.
    #[value(name = "1")]
    One,
    /// OI ratio 1..100, step 1.
    #[value(name = "2")]
    Two,
    /// Inlier noise 0.01..0.29 at OI ratio 1.
    Noise,
    /// sigma_d in {0.05, 0.1, 0.2, 0.3, 0.5} at OI ratio 10.
    Scale,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub set: SetArg,
    /// Comma-separated methods.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "emtv,ransac,tls")]
    pub methods: Vec<FitMethod>,
    /// Trials per cell [default: 100].
    #[arg(long)]
    pub trials: Option<usize>,
    /// Base seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scale of analysis for cells that do not sweep it [default: 0.1].
    #[arg(long)]
    pub sigma_d: Option<f64>,
    /// Drop OI cells above this ratio.
    #[arg(long)]
    pub max_oi: Option<f64>,
    #[command(flatten)]
    pub emtv: EmtvArgs,
}

/// Contents of the `--config` file; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub sigma_d: Option<f64>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub threshold: Option<f64>,
    pub emtv: Option<EmtvConfig>,
    pub mrf: Option<MrfConfig>,
    pub ransac: Option<RansacConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Rendered output and whether the computation converged.
pub struct Outcome {
    pub body: String,
    pub converged: bool,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return 1;
            }
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            if let Err(e) = emit(&cli, &outcome.body, stdout) {
                let _ = writeln!(stderr, "error: {e}");
                return e.exit_code();
            }
            if outcome.converged {
                0
            } else {
                let _ = writeln!(stderr, "error: iteration limit reached before convergence");
                3
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn emit(cli: &Cli, body: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &cli.output {
        Some(path) => std::fs::write(path, body).map_err(|source| CliError::Io { path: path.clone(), source }),
        None => stdout
            .write_all(body.as_bytes())
            .map_err(|source| CliError::Io { path: PathBuf::from("<stdout>"), source }),
    }
}

fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::VoteField(a) => commands::vote_field(a),
        Command::Filter(a) => commands::filter(a, &file),
        Command::FitLine(a) => commands::fit_line(a, &file),
        Command::FitFundamental(a) => commands::fit_fundamental(a, &file),
        Command::Sweep(a) => commands::sweep(a, &file),
    })
}
