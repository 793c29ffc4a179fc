//! JSON run configuration and file formats for the CLI.
//!
//! Configs are strict: unknown keys anywhere in the document are rejected
//! before any numerics run. Field output is a CSV table plus a JSON header
//! carrying the grid, model, and spectrum fingerprint, and the pair can be
//! read back to drive contour extraction.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{FixedPoint, ModelConfig};
use crate::field::{
    fmt_g17, FieldMetadata, GridSpec, PointValue, Quantity, ScalarField,
};
use crate::laplace::{EvalStatus, LaplaceOptions};
use crate::spectrum::{LeadingClass, Spectrum, Stability};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One JSON document drives every subcommand; command-specific fields are
/// optional and ignored by commands that do not use them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// Integration and Laplace-evaluation options.
    #[serde(default)]
    pub opts: LaplaceOptions,
    /// Newton starting point for the fixed-point search (defaults to the
    /// origin).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess: Option<Vec<f64>>,
    /// Field quantity to evaluate (defaults to magnitude).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantity: Option<Quantity>,
    /// Contour levels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    /// Trajectory sample times; defaults to 101 uniform samples over the
    /// horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    /// Trajectory initial state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn guess_vector(&self, dim: usize) -> Result<DVector<f64>, ConfigError> {
        match &self.guess {
            None => Ok(DVector::zeros(dim)),
            Some(g) if g.len() == dim => Ok(DVector::from_column_slice(g)),
            Some(g) => Err(ConfigError::Invalid(format!(
                "guess has {} entries, model dimension is {dim}",
                g.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ComplexRepr {
    pub re: f64,
    pub im: f64,
}

impl From<Complex64> for ComplexRepr {
    fn from(c: Complex64) -> Self {
        Self { re: c.re, im: c.im }
    }
}

/// JSON report for the `spectrum` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub fixed_point: FixedPoint,
    pub eigenvalues: Vec<ComplexRepr>,
    pub right_vectors: Vec<Vec<ComplexRepr>>,
    pub left_vectors: Vec<Vec<ComplexRepr>>,
    pub leading_class: LeadingClass,
    pub stability: Stability,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spiral_axes: Option<[Vec<f64>; 2]>,
    pub fingerprint: String,
}

impl SpectrumReport {
    pub fn new(spectrum: &Spectrum) -> Self {
        let n = spectrum.dim();
        let vectors = |which: &dyn Fn(usize) -> Vec<ComplexRepr>| -> Vec<Vec<ComplexRepr>> {
            (0..n).map(which).collect()
        };
        Self {
            fixed_point: spectrum.fixed_point.clone(),
            eigenvalues: spectrum.eigenvalues().iter().map(|&l| l.into()).collect(),
            right_vectors: vectors(&|j| {
                spectrum.right_vector(j).iter().map(|&c| c.into()).collect()
            }),
            left_vectors: vectors(&|j| {
                spectrum.left_vector(j).iter().map(|&c| c.into()).collect()
            }),
            leading_class: spectrum.leading_class,
            stability: spectrum.stability,
            reduced_period: spectrum.reduced_period().ok(),
            spiral_axes: spectrum
                .spiral_axes()
                .ok()
                .map(|(a, b)| [a.as_slice().to_vec(), b.as_slice().to_vec()]),
            fingerprint: spectrum.fingerprint(),
        }
    }
}

/// JSON header written alongside the field CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub grid: GridSpec,
    pub quantity: Quantity,
    pub model: String,
    pub params: BTreeMap<String, f64>,
    pub spectrum_fingerprint: String,
    pub opts: LaplaceOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

/// Write `{base}.csv` and `{base}.json` for a field.
pub fn write_field(
    field: &ScalarField,
    base: &Path,
    timestamp: bool,
) -> Result<(), ConfigError> {
    let csv_path = base.with_extension("csv");
    let json_path = base.with_extension("json");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    field
        .write_csv(&mut csv)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    csv.flush()?;
    let header = FieldHeader {
        grid: field.grid.clone(),
        quantity: field.quantity,
        model: field.metadata.model.clone(),
        params: field.metadata.params.clone(),
        spectrum_fingerprint: field.metadata.spectrum_fingerprint.clone(),
        opts: field.metadata.opts.clone(),
        created_unix: timestamp.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        }),
    };
    let mut json = std::fs::File::create(&json_path)?;
    serde_json::to_writer_pretty(&mut json, &header)?;
    json.write_all(b"\n")?;
    Ok(())
}

/// Read a field back from `{base}.csv` + `{base}.json`.
pub fn read_field(base: &Path) -> Result<ScalarField, ConfigError> {
    let header: FieldHeader =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
    header
        .grid
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let file = std::fs::File::open(base.with_extension("csv"))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| ConfigError::Invalid("empty field CSV".to_string()))??;
    let dim = header.grid.dim();
    let expected_columns = dim + 4;
    if first.split(',').count() != expected_columns {
        return Err(ConfigError::Invalid(format!(
            "field CSV header has wrong column count (expected {expected_columns})"
        )));
    }
    let parse_opt = |cell: &str| -> Result<Option<f64>, ConfigError> {
        if cell.is_empty() {
            Ok(None)
        } else {
            cell.parse::<f64>()
                .map(Some)
                .map_err(|e| ConfigError::Invalid(format!("bad float {cell:?}: {e}")))
        }
    };
    let mut values = Vec::with_capacity(header.grid.len());
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected_columns {
            return Err(ConfigError::Invalid(format!(
                "field CSV row has {} cells, expected {expected_columns}",
                cells.len()
            )));
        }
        let status = match cells[dim + 3] {
            "converged" => EvalStatus::Converged,
            "diverged" => EvalStatus::Diverged,
            "truncated" => EvalStatus::Truncated { t_stop: f64::NAN },
            other => {
                return Err(ConfigError::Invalid(format!("unknown status {other:?}")))
            }
        };
        values.push(PointValue {
            magnitude: parse_opt(cells[dim])?,
            phase: parse_opt(cells[dim + 1])?,
            tau: parse_opt(cells[dim + 2])?,
            status,
        });
    }
    if values.len() != header.grid.len() {
        return Err(ConfigError::Invalid(format!(
            "field CSV has {} records, grid expects {}",
            values.len(),
            header.grid.len()
        )));
    }
    Ok(ScalarField {
        grid: header.grid.clone(),
        quantity: header.quantity,
        values,
        metadata: FieldMetadata {
            model: header.model,
            params: header.params,
            spectrum_fingerprint: header.spectrum_fingerprint,
            opts: header.opts,
        },
    })
}

/// Trajectory CSV: `t, x1..xn`, full precision.
pub fn write_trajectory_csv(
    times: &[f64],
    states: &[DVector<f64>],
    dim: usize,
    mut out: impl Write,
) -> Result<(), ConfigError> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=dim).map(|i| format!("x{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (t, state) in times.iter().zip(states) {
        let mut row = vec![fmt_g17(*t)];
        row.extend(state.iter().map(|v| fmt_g17(*v)));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
