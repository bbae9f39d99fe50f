use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use datasuff_core::ghr::{generate_dataset, Scenario};
use datasuff_core::{AnalysisMode, ColumnMap, MultivariateWeighting, ScenarioRules, SufficiencyConfig, Variable};

mod input;
mod report;

#[derive(Parser)]
#[command(name = "datasuff", version, about = "How much naturalistic driving data is enough to model a driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the sufficient sample count for each driver and write a report.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Convergence threshold on consecutive KL values.
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
    },
    /// Re-run the threshold test for several epsilons on one set of traces.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated thresholds, e.g. 1e-3,5e-4,1e-4.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        epsilons: Vec<f64>,
    },
    /// Simulate car-following data in the log format.
    Generate {
        /// Scenario file; the bundled scenario is used when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Destination CSV file.
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Univariate,
    Multivariate,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    GridSum,
    VolumeWeighted,
}

#[derive(Args)]
struct Common {
    /// Driving logs (CSV or TSV with a header row).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    block_size: usize,
    #[arg(long, default_value_t = 10.0)]
    rate_hz: f64,
    /// Grid points for univariate estimates.
    #[arg(long, default_value_t = 256)]
    grid_points: usize,
    /// Grid points per dimension for the joint estimate.
    #[arg(long, default_value_t = 15)]
    grid_points_per_dim: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Univariate)]
    mode: ModeArg,
    /// How the joint KL sums over grid points.
    #[arg(long, value_enum, default_value_t = WeightingArg::GridSum)]
    weighting: WeightingArg,
    /// Comma-separated subset of v_e,a_e,delta_v,delta_d.
    #[arg(long, value_delimiter = ',', default_value = "v_e,a_e,delta_v,delta_d")]
    variables: Vec<Variable>,
    /// Largest gap to the lead vehicle still counted as car following (m).
    #[arg(long, default_value_t = 120.0)]
    max_distance: f64,
    /// Ego speed must exceed this (m/s).
    #[arg(long, default_value_t = 5.0)]
    min_speed: f64,
    /// Shortest car-following event kept (s).
    #[arg(long, default_value_t = 30.0)]
    min_duration: f64,
    /// Analyze all drivers together instead of one by one.
    #[arg(long)]
    pool_drivers: bool,
    /// Map a field to a differently named input column, e.g. v_e=speed.
    #[arg(long = "column", value_name = "FIELD=NAME")]
    columns: Vec<String>,
    #[arg(long, default_value = "datasuff-out")]
    out: PathBuf,
}

impl Common {
    fn config(&self, epsilon: f64) -> SufficiencyConfig {
        SufficiencyConfig {
            block_size: self.block_size,
            epsilon,
            rate_hz: self.rate_hz,
            grid_points: self.grid_points,
            grid_points_per_dim: self.grid_points_per_dim,
            mode: match self.mode {
                ModeArg::Univariate => AnalysisMode::Univariate,
                ModeArg::Multivariate => AnalysisMode::Multivariate,
            },
            variables: dedup(&self.variables),
            weighting: match self.weighting {
                WeightingArg::GridSum => MultivariateWeighting::GridSum,
                WeightingArg::VolumeWeighted => MultivariateWeighting::VolumeWeighted,
            },
            ..SufficiencyConfig::default()
        }
    }

    fn rules(&self) -> ScenarioRules {
        ScenarioRules {
            max_distance: self.max_distance,
            min_speed: self.min_speed,
            min_duration: self.min_duration,
            sample_rate_hz: self.rate_hz,
            ..ScenarioRules::default()
        }
    }

    fn column_map(&self) -> Result<ColumnMap> {
        let mut map = ColumnMap::default();
        for spec in &self.columns {
            let Some((field, column)) = spec.split_once('=') else {
                bail!("--column expects FIELD=NAME, got `{spec}`");
            };
            map.rename(field.trim(), column.trim())?;
        }
        Ok(map)
    }
}

fn dedup(variables: &[Variable]) -> Vec<Variable> {
    let mut out = Vec::new();
    for v in variables {
        if !out.contains(v) {
            out.push(*v);
        }
    }
    out
}

fn main() -> ExitCode {
    // Usage errors exit with 1; status 2 is reserved for "not converged".
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Analyze { common, epsilon } => {
            let config = common.config(epsilon);
            let data = input::load(&common.inputs, &common.column_map()?, &common.rules())?;
            let report = report::analyze(&data, &config, &common)?;
            report.write(&common.out)?;
            report.print_summary();
            Ok(exit_for(report.converged()))
        }
        Command::Sweep { common, epsilons } => {
            let config = common.config(epsilons[0]);
            let data = input::load(&common.inputs, &common.column_map()?, &common.rules())?;
            let sweep = report::sweep(&data, &config, &common, &epsilons)?;
            sweep.write(&common.out)?;
            sweep.print_summary();
            Ok(exit_for(sweep.converged()))
        }
        Command::Generate { scenario, seed, output } => {
            let scenario = match &scenario {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
                    Scenario::from_toml(&text).with_context(|| format!("{}", path.display()))?
                }
                None => Scenario::bundled(),
            };
            let bytes = generate_dataset(&scenario, seed)?;
            write_atomic(&output, &bytes)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_for(converged: bool) -> ExitCode {
    if converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

/// Writes through a temporary file in the destination directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
