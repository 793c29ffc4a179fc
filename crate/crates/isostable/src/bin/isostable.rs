//! CLI for isostable/isochron computation, driven by JSON configs.
//!
//! Exit codes: 0 success, 1 validation failure, 2 config/schema error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use isostable::config::{
    read_field, write_field, write_trajectory_csv, ConfigError, RunConfig, SpectrumReport,
};
use isostable::dynamics::DynamicsError;
use isostable::field::{self, FieldError, Quantity};
use isostable::flow::{sample_trajectory, Termination};
use isostable::laplace::LaplaceError;
use isostable::validate;
use isostable::{Spectrum, VectorFieldModel};

#[derive(Parser)]
#[command(
    name = "isostable",
    version,
    about = "Isostables, isochrons, and Koopman-eigenfunction diagnostics for ODE fixed points"
)]
struct Cli {
    /// Worker threads for grid evaluation (default: hardware parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Locate the fixed point and print the Jacobian spectrum as JSON.
    Spectrum {
        /// JSON run config.
        config: PathBuf,
    },
    /// Locate the fixed point and print it as JSON.
    FixedPoint { config: PathBuf },
    /// Integrate a trajectory and write `t, x1..xn` CSV.
    Trajectory {
        config: PathBuf,
        /// Output CSV path (stdout if omitted).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the eigenfunction field over the configured grid.
    Field {
        config: PathBuf,
        /// Output base path; writes `<base>.csv` and `<base>.json`.
        #[arg(short, long)]
        output: PathBuf,
        /// Omit the timestamp from the JSON header (byte-identical reruns).
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Extract level sets from a previously computed field.
    Contour {
        config: PathBuf,
        /// Base path of the field files written by `field`.
        #[arg(long)]
        field: PathBuf,
        /// Output base path; writes `<base>.level<k>.json` per level.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the invariant suite; exit 0 iff every check passes.
    Validate { config: PathBuf },
}

enum CliError {
    Config(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<isostable::spectrum::SpectrumError> for CliError {
    fn from(e: isostable::spectrum::SpectrumError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::InvalidGrid(_) | FieldError::UnavailableQuantity { .. } => {
                CliError::Config(e.to_string())
            }
            FieldError::Laplace(LaplaceError::Dynamics(DynamicsError::InvalidConfig(m))) => {
                CliError::Config(m)
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not configure thread pool: {e}");
            std::process::exit(2);
        }
    }
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

struct Prepared {
    model: VectorFieldModel,
    config: RunConfig,
}

fn prepare(config_path: &Path) -> Result<Prepared, CliError> {
    let config = RunConfig::from_path(config_path)?;
    let model = VectorFieldModel::from_config(&config.model)?;
    Ok(Prepared { model, config })
}

fn spectrum_of(prepared: &Prepared) -> Result<Spectrum, CliError> {
    let guess = prepared.config.guess_vector(prepared.model.dim())?;
    let fp = prepared.model.find_fixed_point(&guess)?;
    Ok(Spectrum::compute(&prepared.model, &fp)?)
}

fn run(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Spectrum { config } => {
            let prepared = prepare(&config)?;
            let spectrum = spectrum_of(&prepared)?;
            print_json(&SpectrumReport::new(&spectrum))?;
            Ok(0)
        }
        Command::FixedPoint { config } => {
            let prepared = prepare(&config)?;
            let guess = prepared.config.guess_vector(prepared.model.dim())?;
            let fp = prepared.model.find_fixed_point(&guess)?;
            print_json(&fp)?;
            Ok(0)
        }
        Command::Trajectory { config, output } => {
            let prepared = prepare(&config)?;
            let x0 = prepared
                .config
                .initial_state
                .as_ref()
                .ok_or_else(|| {
                    CliError::Config("trajectory requires \"initial_state\"".to_string())
                })
                .map(|v| DVector::from_column_slice(v))?;
            if x0.len() != prepared.model.dim() {
                return Err(CliError::Config(format!(
                    "initial_state has {} entries, model dimension is {}",
                    x0.len(),
                    prepared.model.dim()
                )));
            }
            let opts = &prepared.config.opts.integration;
            let times = match &prepared.config.times {
                Some(times) => times.clone(),
                None => (0..=100).map(|k| opts.horizon * k as f64 / 100.0).collect(),
            };
            let trajectory = sample_trajectory(&prepared.model, &x0, &times, opts)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            match &trajectory.terminated {
                Termination::Completed => {}
                Termination::Escaped { point } => {
                    eprintln!("warning: trajectory escaped near {point:?}")
                }
                Termination::Stalled => eprintln!("warning: trajectory stalled"),
            }
            match output {
                Some(path) => {
                    let file = std::fs::File::create(&path).map_err(ConfigError::from)?;
                    write_trajectory_csv(
                        &trajectory.times,
                        &trajectory.states,
                        prepared.model.dim(),
                        std::io::BufWriter::new(file),
                    )?;
                }
                None => write_trajectory_csv(
                    &trajectory.times,
                    &trajectory.states,
                    prepared.model.dim(),
                    std::io::stdout().lock(),
                )?,
            }
            Ok(0)
        }
        Command::Field { config, output, no_timestamp } => {
            let prepared = prepare(&config)?;
            let spectrum = spectrum_of(&prepared)?;
            let grid = prepared
                .config
                .grid
                .clone()
                .ok_or_else(|| CliError::Config("field requires \"grid\"".to_string()))?;
            let quantity = prepared.config.quantity.unwrap_or(Quantity::Magnitude);
            let start = Instant::now();
            let result = field::evaluate_field(
                &prepared.model,
                &spectrum,
                &grid,
                quantity,
                &prepared.config.opts,
            )?;
            let elapsed = start.elapsed();
            write_field(&result, &output, !no_timestamp)?;
            let (converged, diverged, truncated) = result.status_counts();
            println!(
                "field: {} points, {converged} converged, {diverged} diverged, \
                 {truncated} truncated, {:.3} s",
                result.values.len(),
                elapsed.as_secs_f64()
            );
            Ok(0)
        }
        Command::Contour { config, field: field_base, output } => {
            let prepared = prepare(&config)?;
            let levels = prepared
                .config
                .levels
                .clone()
                .ok_or_else(|| CliError::Config("contour requires \"levels\"".to_string()))?;
            let base = strip_field_extension(&field_base);
            let scalar_field = read_field(&base)?;
            let contours = field::extract_contours(&scalar_field, &levels)?;
            for (index, level_set) in contours.levels.iter().enumerate() {
                if level_set.empty {
                    eprintln!(
                        "warning: level {} is outside the field range",
                        level_set.level
                    );
                }
                let path = output.with_extension(format!("level{index}.json"));
                let file = std::fs::File::create(&path).map_err(ConfigError::from)?;
                serde_json::to_writer_pretty(std::io::BufWriter::new(file), level_set)
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            println!("contour: wrote {} level files", contours.levels.len());
            Ok(0)
        }
        Command::Validate { config } => {
            let prepared = prepare(&config)?;
            let spectrum = spectrum_of(&prepared)?;
            let report = validate::run_suite(
                &prepared.model,
                &spectrum,
                prepared.config.grid.as_ref(),
                &prepared.config.opts,
            )?;
            print_json(&report)?;
            Ok(if report.passed { 0 } else { 1 })
        }
    }
}

fn strip_field_extension(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), CliError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}
