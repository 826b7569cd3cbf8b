//! Command-line surface and the optional JSON config file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "dpflow", version, about = "Differentially private chance-constrained dispatch for radial feeders")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Case file (JSON); the bundled 15-node feeder when omitted.
    #[arg(long, global = true)]
    pub case: Option<PathBuf>,
    /// JSON file with default values for any flag; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write results here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, global = true, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    /// Units for powers in the output.
    #[arg(long, value_enum, global = true)]
    pub units: Option<Units>,
    /// Sides of the polygon replacing each circular flow limit.
    #[arg(long, global = true)]
    pub sides: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Units {
    Mw,
    PerUnit,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the deterministic dispatch.
    SolveDopf,
    /// Solve a chance-constrained dispatch with privacy noise.
    SolveCcopf(CcopfArgs),
    /// Run a privacy mechanism and release one dispatch.
    #[command(subcommand)]
    Mechanism(MechanismCommand),
    /// Monte-Carlo and brute-force checks.
    #[command(subcommand)]
    Validate(ValidateCommand),
    /// Print the per-line noise deviations for a privacy setting.
    Calibrate(PrivacyArgs),
}

#[derive(Debug, Args, Clone)]
pub struct PrivacyArgs {
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Defaults to one over the number of customers.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Adjacency as a fraction of each protected load.
    #[arg(long)]
    pub beta_frac: Option<f64>,
    /// Protected nodes, comma separated; all load nodes when omitted.
    #[arg(long, value_delimiter = ',')]
    pub protect: Option<Vec<usize>>,
}

#[derive(Debug, Args, Clone)]
pub struct LevelArgs {
    #[arg(long)]
    pub eta_g: Option<f64>,
    #[arg(long)]
    pub eta_u: Option<f64>,
    #[arg(long)]
    pub eta_f: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantKind {
    Base,
    Tov,
    Tav,
    Cvar,
    Meanstd,
}

#[derive(Debug, Args)]
pub struct CcopfArgs {
    #[command(flatten)]
    pub privacy: PrivacyArgs,
    #[command(flatten)]
    pub levels: LevelArgs,
    #[arg(long, value_enum, default_value_t = VariantKind::Base)]
    pub variant: VariantKind,
    /// Penalty weight on flow deviations (tov, tav).
    #[arg(long, default_value_t = 1e5)]
    pub psi: f64,
    /// JSON array of injected deviations per line, in output units (tav).
    #[arg(long)]
    pub sigma_hat_file: Option<PathBuf>,
    /// Add the conditions keeping each flow deviation at its floor (tav).
    #[arg(long)]
    pub anchored: bool,
    /// Risk weight in [0, 1] (cvar, meanstd).
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
    /// Tail fraction of the CVaR (cvar).
    #[arg(long, default_value_t = 0.1)]
    pub varrho: f64,
}

#[derive(Debug, Subcommand)]
pub enum MechanismCommand {
    /// Chance-constrained mechanism: solve, draw once, release.
    Run(MechanismArgs),
    /// Output perturbation: solve, noise the flows, re-dispatch.
    OpBaseline(OpArgs),
}

#[derive(Debug, Args)]
pub struct MechanismArgs {
    #[command(flatten)]
    pub privacy: PrivacyArgs,
    #[command(flatten)]
    pub levels: LevelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra draws after an infeasible one; each spends another epsilon.
    #[arg(long, default_value_t = 0)]
    pub resamples: u32,
}

#[derive(Debug, Args)]
pub struct OpArgs {
    #[command(flatten)]
    pub privacy: PrivacyArgs,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum ValidateCommand {
    /// Sample the chance-constrained policy and tally violations.
    Mc(McArgs),
    /// Largest flow change when one load moves within its adjacency.
    Sensitivity(SensitivityArgs),
    /// Check every flow deviation against its noise floor.
    Stdfloor(StdFloorArgs),
    /// Histogram test of the privacy inequality on one node.
    Dpratio(DpRatioArgs),
    /// Expected cost and CVaR across risk weights.
    CvarSweep(CvarSweepArgs),
    /// Periodic load at one node and the released flow trace.
    Timeseries(TimeseriesArgs),
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[command(flatten)]
    pub privacy: PrivacyArgs,
    #[command(flatten)]
    pub levels: LevelArgs,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    pub varrho: f64,
    /// Line (0-based) whose realized flow is histogrammed.
    #[arg(long, default_value_t = 0)]
    pub histogram_line: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub beta_frac: Option<f64>,
    /// Probe offsets per direction.
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct StdFloorArgs {
    #[command(flatten)]
    pub privacy: PrivacyArgs,
    #[command(flatten)]
    pub levels: LevelArgs,
}

#[derive(Debug, Args)]
pub struct DpRatioArgs {
    #[arg(long, default_value_t = 7)]
    pub node: usize,
    /// Load shift in MW.
    #[arg(long, default_value_t = 0.3)]
    pub beta_mw: f64,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[command(flatten)]
    pub levels: LevelArgs,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CvarSweepArgs {
    #[command(flatten)]
    pub privacy: PrivacyArgs,
    #[command(flatten)]
    pub levels: LevelArgs,
    /// Risk weights, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7")]
    pub thetas: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub varrho: f64,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TimeseriesArgs {
    #[arg(long, default_value_t = 7)]
    pub node: usize,
    /// Adjacency at the node in MW.
    #[arg(long, default_value_t = 0.07)]
    pub beta_mw: f64,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[command(flatten)]
    pub levels: LevelArgs,
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Defaults read from `--config`; any field may be omitted.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub case: Option<PathBuf>,
    pub units: Option<Units>,
    pub sides: Option<usize>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub beta_frac: Option<f64>,
    pub eta_g: Option<f64>,
    pub eta_u: Option<f64>,
    pub eta_f: Option<f64>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
