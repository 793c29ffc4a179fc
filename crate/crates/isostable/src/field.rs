//! Grid evaluation of eigenfunction quantities, level-set extraction, and
//! linearizing coordinates.
//!
//! `evaluate_field` fans independent pointwise evaluations out across the
//! rayon pool; every point is a pure function of immutable inputs and the
//! output vector is assembled in index order, so results are bitwise
//! identical across runs and thread counts. Contours come from marching
//! squares with asymptotic-decider tie-breaking (2D) or cell-edge crossings
//! (3D point clouds); cells touching diverged points are skipped rather than
//! interpolated across.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VectorFieldModel;
use crate::laplace::{
    self, EigenfunctionValue, EvalStatus, LaplaceError, LaplaceOptions, Observable,
};
use crate::spectrum::{LeadingClass, Spectrum};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Laplace(#[from] LaplaceError),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("operation supports {expected}D fields, got {got}D")]
    UnsupportedDim { expected: &'static str, got: usize },
    #[error("quantity {quantity:?} is not defined for this spectrum")]
    UnavailableQuantity { quantity: Quantity },
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Regular evaluation grid: per-axis bounds and point counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bounds: Vec<[f64; 2]>,
    pub resolution: Vec<usize>,
}

impl GridSpec {
    pub fn new(bounds: Vec<[f64; 2]>, resolution: Vec<usize>) -> Result<Self, FieldError> {
        let grid = Self { bounds, resolution };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.bounds.len() != self.resolution.len() || self.bounds.is_empty() {
            return Err(FieldError::InvalidGrid(
                "bounds and resolution must be non-empty and of equal length".to_string(),
            ));
        }
        for (axis, (b, &r)) in self.bounds.iter().zip(&self.resolution).enumerate() {
            if !(b[0] < b[1]) {
                return Err(FieldError::InvalidGrid(format!(
                    "axis {axis}: min {} must be below max {}",
                    b[0], b[1]
                )));
            }
            if r < 2 {
                return Err(FieldError::InvalidGrid(format!(
                    "axis {axis}: resolution {r} must be at least 2"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis_step(&self, axis: usize) -> f64 {
        (self.bounds[axis][1] - self.bounds[axis][0]) / (self.resolution[axis] - 1) as f64
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        self.bounds[axis][0] + self.axis_step(axis) * i as f64
    }

    /// Axis 0 varies fastest.
    pub fn indices(&self, mut index: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dim());
        for &r in &self.resolution {
            out.push(index % r);
            index /= r;
        }
        out
    }

    pub fn flat_index(&self, indices: &[usize]) -> usize {
        let mut index = 0;
        for (axis, &i) in indices.iter().enumerate().rev() {
            index = index * self.resolution[axis] + i;
        }
        index
    }

    pub fn point(&self, index: usize) -> DVector<f64> {
        let indices = self.indices(index);
        DVector::from_fn(self.dim(), |axis, _| self.coordinate(axis, indices[axis]))
    }

    pub fn diagonal(&self) -> f64 {
        self.bounds
            .iter()
            .map(|b| (b[1] - b[0]) * (b[1] - b[0]))
            .sum::<f64>()
            .sqrt()
    }
}

/// Which scalar the field's contours are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    Magnitude,
    Phase,
    Tau,
}

/// Per-point eigenfunction record. Diverged points carry no values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointValue {
    pub magnitude: Option<f64>,
    pub phase: Option<f64>,
    pub tau: Option<f64>,
    pub status: EvalStatus,
}

impl PointValue {
    fn diverged() -> Self {
        Self { magnitude: None, phase: None, tau: None, status: EvalStatus::Diverged }
    }

    fn from_value(value: EigenfunctionValue) -> Self {
        Self {
            magnitude: Some(value.magnitude),
            phase: value.phase,
            tau: Some(value.tau),
            status: value.status,
        }
    }

    pub fn quantity(&self, quantity: Quantity) -> Option<f64> {
        match quantity {
            Quantity::Magnitude => self.magnitude,
            Quantity::Phase => self.phase,
            Quantity::Tau => self.tau,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMetadata {
    pub model: String,
    pub params: BTreeMap<String, f64>,
    pub spectrum_fingerprint: String,
    pub opts: LaplaceOptions,
}

/// Eigenfunction data over a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub quantity: Quantity,
    pub values: Vec<PointValue>,
    pub metadata: FieldMetadata,
}

/// Level-set geometry at one level: polylines in 2D, edge-crossing point
/// clouds in 3D. `empty` marks levels outside the field range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSet {
    pub level: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub polylines: Vec<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub points: Vec<[f64; 3]>,
    pub empty: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContourSet {
    pub levels: Vec<LevelSet>,
}

/// Eigen-coordinates at one point: `y_j = s_j(x)`, the recovered state-space
/// offset `z = V y` when every `y_j` is available, and the action-angle pair
/// of the leading eigenfunction.
#[derive(Debug, Clone)]
pub struct LinearizedCoordinates {
    pub y: Vec<Option<Complex64>>,
    pub z: Option<DVector<f64>>,
    pub r: f64,
    pub theta: Option<f64>,
    pub status: EvalStatus,
}

/// Evaluate the leading eigenfunction at one point, dispatching on the
/// leading class (default observable for the real case).
pub fn eigenfunction_at(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    x: &DVector<f64>,
    opts: &LaplaceOptions,
) -> Result<EigenfunctionValue, LaplaceError> {
    match spectrum.leading_class {
        LeadingClass::Real => {
            let f = Observable::leading_left(spectrum);
            laplace::eigenfunction_real(model, spectrum, &f, x, opts)
        }
        LeadingClass::ComplexPair => laplace::eigenfunction_complex(model, spectrum, x, opts),
    }
}

/// Evaluate the eigenfunction over a grid, in parallel. Per-point failures
/// become `Diverged` records; only configuration errors abort.
pub fn evaluate_field(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    grid: &GridSpec,
    quantity: Quantity,
    opts: &LaplaceOptions,
) -> Result<ScalarField, FieldError> {
    grid.validate()?;
    if grid.dim() != model.dim() {
        return Err(FieldError::InvalidGrid(format!(
            "grid dimension {} does not match model dimension {}",
            grid.dim(),
            model.dim()
        )));
    }
    if quantity == Quantity::Phase && spectrum.leading_class != LeadingClass::ComplexPair {
        return Err(FieldError::UnavailableQuantity { quantity });
    }
    let mut opts = opts.clone();
    if !opts.integration.escape_radius.is_finite() {
        opts.integration.escape_radius = 1e3 * grid.diagonal();
    }
    if opts.integration.escape_center.is_none() {
        opts.integration.escape_center = Some(spectrum.fixed_point.location.clone());
    }

    let results: Vec<Result<PointValue, LaplaceError>> = (0..grid.len())
        .into_par_iter()
        .map(|index| {
            let x = grid.point(index);
            match eigenfunction_at(model, spectrum, &x, &opts) {
                Ok(value) => Ok(PointValue::from_value(value)),
                Err(
                    LaplaceError::Diverged { .. }
                    | LaplaceError::GuardTriggered { .. }
                    | LaplaceError::Stalled { .. },
                ) => Ok(PointValue::diverged()),
                Err(fatal) => Err(fatal),
            }
        })
        .collect();

    let mut values = Vec::with_capacity(results.len());
    for result in results {
        values.push(result?);
    }
    Ok(ScalarField {
        grid: grid.clone(),
        quantity,
        values,
        metadata: FieldMetadata {
            model: model.name().to_string(),
            params: model.params().clone(),
            spectrum_fingerprint: spectrum.fingerprint(),
            opts,
        },
    })
}

impl ScalarField {
    pub fn value_at(&self, index: usize) -> Option<f64> {
        self.values[index].quantity(self.quantity)
    }

    pub fn status_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for v in &self.values {
            match v.status {
                EvalStatus::Converged => counts.0 += 1,
                EvalStatus::Diverged => counts.1 += 1,
                EvalStatus::Truncated { .. } => counts.2 += 1,
            }
        }
        counts
    }

    /// CSV rows `x1..xn, magnitude, phase, tau, status` with 17-significant-
    /// digit floats; missing values are empty cells.
    pub fn write_csv(&self, mut out: impl Write) -> Result<(), FieldError> {
        let dim = self.grid.dim();
        let mut header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
        header.extend(["magnitude", "phase", "tau", "status"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for index in 0..self.grid.len() {
            let point = self.grid.point(index);
            let record = &self.values[index];
            let mut row: Vec<String> = point.iter().map(|v| fmt_g17(*v)).collect();
            for value in [record.magnitude, record.phase, record.tau] {
                row.push(value.map(fmt_g17).unwrap_or_default());
            }
            row.push(status_label(&record.status).to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn status_label(status: &EvalStatus) -> &'static str {
    match status {
        EvalStatus::Converged => "converged",
        EvalStatus::Diverged => "diverged",
        EvalStatus::Truncated { .. } => "truncated",
    }
}

/// 17 significant digits: round-trip exact for f64.
pub fn fmt_g17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

// ---------------------------------------------------------------------------
// Level-set extraction.
// ---------------------------------------------------------------------------

/// Level sets of the field's quantity: marching-squares polylines (2D) or
/// cell-edge crossing point clouds (3D). Levels outside the field range are
/// reported `empty`, never fatal.
pub fn extract_contours(field: &ScalarField, levels: &[f64]) -> Result<ContourSet, FieldError> {
    match field.grid.dim() {
        2 => Ok(ContourSet {
            levels: levels.iter().map(|&level| marching_squares(field, level)).collect(),
        }),
        3 => Ok(ContourSet {
            levels: levels.iter().map(|&level| edge_crossings_3d(field, level)).collect(),
        }),
        got => Err(FieldError::UnsupportedDim { expected: "2D or 3", got }),
    }
}

/// Per-level view of the scalar data. Phase fields are rotated so `level`
/// maps to pi, turning the branch cut into an ordinary out-of-range region
/// away from the contour.
struct LevelView<'f> {
    field: &'f ScalarField,
    level: f64,
    circular: bool,
}

impl LevelView<'_> {
    fn new(field: &ScalarField, level: f64) -> LevelView<'_> {
        LevelView { field, level, circular: field.quantity == Quantity::Phase }
    }

    /// The effective contour level in transformed coordinates.
    fn target(&self) -> f64 {
        if self.circular {
            std::f64::consts::PI
        } else {
            self.level
        }
    }

    fn value(&self, indices: &[usize]) -> Option<f64> {
        let raw = self.field.value_at(self.field.grid.flat_index(indices))?;
        if !raw.is_finite() {
            return None;
        }
        if self.circular {
            Some(
                (raw - self.level + std::f64::consts::PI)
                    .rem_euclid(std::f64::consts::TAU),
            )
        } else {
            Some(raw)
        }
    }

    /// Edges straddling the branch cut carry no contour at this level.
    fn edge_ok(&self, v0: f64, v1: f64) -> bool {
        !self.circular || (v1 - v0).abs() <= std::f64::consts::PI
    }
}

fn marching_squares(field: &ScalarField, level: f64) -> LevelSet {
    let view = LevelView::new(field, level);
    let target = view.target();
    let grid = &field.grid;
    let (nx, ny) = (grid.resolution[0], grid.resolution[1]);

    // Crossing points keyed by grid edge: (axis, ix, iy). Axis 0 edges run
    // from (ix, iy) to (ix + 1, iy).
    #[derive(Clone, Copy, PartialEq, Eq, Hash)]
    struct EdgeKey {
        axis: u8,
        ix: usize,
        iy: usize,
    }
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    let mut crossings: HashMap<EdgeKey, [f64; 2]> = HashMap::new();

    let cross = |key: EdgeKey, v0: f64, v1: f64| -> [f64; 2] {
        let theta = if v1 == v0 { 0.5 } else { (target - v0) / (v1 - v0) };
        let (x0, y0) = (grid.coordinate(0, key.ix), grid.coordinate(1, key.iy));
        match key.axis {
            0 => [x0 + theta * grid.axis_step(0), y0],
            _ => [x0, y0 + theta * grid.axis_step(1)],
        }
    };

    for iy in 0..ny - 1 {
        for ix in 0..nx - 1 {
            let corners = [
                view.value(&[ix, iy]),
                view.value(&[ix + 1, iy]),
                view.value(&[ix + 1, iy + 1]),
                view.value(&[ix, iy + 1]),
            ];
            let Some(values) = corners.into_iter().collect::<Option<Vec<f64>>>() else {
                continue; // diverged corner: skip the cell
            };
            let edges = [
                (EdgeKey { axis: 0, ix, iy }, values[0], values[1]),
                (EdgeKey { axis: 1, ix: ix + 1, iy }, values[1], values[2]),
                (EdgeKey { axis: 0, ix, iy: iy + 1 }, values[3], values[2]),
                (EdgeKey { axis: 1, ix, iy }, values[0], values[3]),
            ];
            if edges.iter().any(|(_, v0, v1)| !view.edge_ok(*v0, *v1)) {
                continue; // phase branch cut crosses this cell
            }
            let mut case = 0usize;
            for (bit, v) in values.iter().enumerate() {
                if *v >= target {
                    case |= 1 << bit;
                }
            }
            if case == 0 || case == 15 {
                continue;
            }
            let mut crossing_on = |edge: usize| -> EdgeKey {
                let (key, v0, v1) = edges[edge];
                crossings.entry(key).or_insert_with(|| cross(key, v0, v1));
                key
            };
            // Edge indices: 0 bottom, 1 right, 2 top, 3 left.
            let pairs: &[(usize, usize)] = match case {
                1 => &[(3, 0)],
                2 => &[(0, 1)],
                3 => &[(3, 1)],
                4 => &[(1, 2)],
                6 => &[(0, 2)],
                7 => &[(3, 2)],
                8 => &[(2, 3)],
                9 => &[(2, 0)],
                11 => &[(2, 1)],
                12 => &[(1, 3)],
                13 => &[(1, 0)],
                14 => &[(0, 3)],
                5 | 10 => {
                    // Saddle: the asymptotic decider compares the level to
                    // the value at the bilinear surface's saddle point.
                    let denom = values[0] + values[2] - values[1] - values[3];
                    let saddle = if denom == 0.0 {
                        0.25 * values.iter().sum::<f64>()
                    } else {
                        (values[0] * values[2] - values[1] * values[3]) / denom
                    };
                    let connect_high = (saddle >= target) == (case == 5);
                    if connect_high {
                        if case == 5 {
                            &[(3, 2), (1, 0)]
                        } else {
                            &[(0, 3), (2, 1)]
                        }
                    } else if case == 5 {
                        &[(3, 0), (1, 2)]
                    } else {
                        &[(0, 1), (2, 3)]
                    }
                }
                _ => unreachable!("all 2-bit cases covered"),
            };
            for &(e0, e1) in pairs {
                segments.push((crossing_on(e0), crossing_on(e1)));
            }
        }
    }

    // Chain segments into polylines via exact edge-key adjacency.
    let mut adjacency: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (i, (a, b)) in segments.iter().enumerate() {
        adjacency.entry(*a).or_default().push(i);
        adjacency.entry(*b).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut polylines = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let mut chain = vec![a, b];
        // Extend both ends until the chain closes or dead-ends.
        for end in 0..2 {
            loop {
                let tip = if end == 0 { *chain.last().unwrap() } else { chain[0] };
                let Some(next) = adjacency
                    .get(&tip)
                    .and_then(|ids| ids.iter().find(|&&i| !used[i]))
                    .copied()
                else {
                    break;
                };
                used[next] = true;
                let (a, b) = segments[next];
                let successor = if a == tip { b } else { a };
                if end == 0 {
                    chain.push(successor);
                } else {
                    chain.insert(0, successor);
                }
            }
        }
        polylines.push(chain.iter().map(|key| crossings[key]).collect::<Vec<_>>());
    }

    let empty = polylines.is_empty();
    LevelSet { level, polylines, points: Vec::new(), empty }
}

fn edge_crossings_3d(field: &ScalarField, level: f64) -> LevelSet {
    let view = LevelView::new(field, level);
    let target = view.target();
    let grid = &field.grid;
    let resolution = &grid.resolution;
    let mut points = Vec::new();
    for axis in 0..3 {
        let mut upper = resolution.clone();
        upper[axis] -= 1;
        for iz in 0..upper[2] {
            for iy in 0..upper[1] {
                for ix in 0..upper[0] {
                    let base = [ix, iy, iz];
                    let mut next = base;
                    next[axis] += 1;
                    let (Some(v0), Some(v1)) = (view.value(&base), view.value(&next))
                    else {
                        continue;
                    };
                    if !view.edge_ok(v0, v1) {
                        continue;
                    }
                    if (v0 >= target) == (v1 >= target) {
                        continue;
                    }
                    let theta = if v1 == v0 { 0.5 } else { (target - v0) / (v1 - v0) };
                    let mut p = [
                        grid.coordinate(0, ix),
                        grid.coordinate(1, iy),
                        grid.coordinate(2, iz),
                    ];
                    p[axis] += theta * grid.axis_step(axis);
                    points.push(p);
                }
            }
        }
    }
    let empty = points.is_empty();
    LevelSet { level, polylines: Vec::new(), points, empty }
}

// ---------------------------------------------------------------------------
// Linearizing coordinates and Lyapunov diagnostics.
// ---------------------------------------------------------------------------

/// Action-angle and linearizing coordinates at a point.
///
/// `y_1 = s_1(x)` always; `y_2` is the conjugate eigenfunction for a 2D
/// spiral, or comes from the generalized Laplace average on linear models.
/// `z = V y` is produced only when every `y_j` is known.
pub fn linearize_point(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    x: &DVector<f64>,
    opts: &LaplaceOptions,
) -> Result<LinearizedCoordinates, FieldError> {
    let n = spectrum.dim();
    let value = eigenfunction_at(model, spectrum, x, opts)?;
    let s1 = match value.phase {
        Some(theta) => Complex64::from_polar(value.magnitude, theta),
        // Real leading class: the limit value is real with sign recovered
        // from the observable direction; magnitude-derived y1 keeps the
        // positive branch.
        None => Complex64::new(value.magnitude, 0.0),
    };
    let mut y: Vec<Option<Complex64>> = vec![None; n];
    y[0] = Some(s1);
    if spectrum.leading_class == LeadingClass::ComplexPair && n == 2 {
        y[1] = Some(s1.conj());
    } else if model.name() == "linear" {
        for j in 1..n {
            y[j] = Some(spectrum.linear_eigenfunction(j, x));
        }
    }
    let z = if y.iter().all(Option::is_some) {
        let mut z = DVector::zeros(n);
        for j in 0..n {
            let yj = y[j].unwrap();
            let vj = spectrum.right_vector(j);
            for i in 0..n {
                z[i] += (vj[i] * yj).re;
            }
        }
        Some(z)
    } else {
        None
    };
    Ok(LinearizedCoordinates {
        y,
        z,
        r: value.magnitude,
        theta: value.phase,
        status: value.status,
    })
}

/// The Lyapunov function `V(x) = |s1(x)|` of a planar spiral sink. Along
/// trajectories `V` decays at the constant rate `sigma_1`.
pub fn lyapunov_value(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    x: &DVector<f64>,
    opts: &LaplaceOptions,
) -> Result<f64, FieldError> {
    if spectrum.leading_class != LeadingClass::ComplexPair || spectrum.dim() != 2 {
        return Err(FieldError::Laplace(LaplaceError::WrongLeadingClass {
            expected: LeadingClass::ComplexPair,
        }));
    }
    let value = laplace::eigenfunction_complex(model, spectrum, x, opts)?;
    Ok(value.magnitude)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FixedPoint;
    use crate::flow::IntegrationOptions;
    use nalgebra::DMatrix;

    fn opts(horizon: f64) -> LaplaceOptions {
        LaplaceOptions {
            integration: IntegrationOptions { horizon, ..Default::default() },
            ..Default::default()
        }
    }

    fn analytic_field(
        bounds: Vec<[f64; 2]>,
        resolution: Vec<usize>,
        f: impl Fn(&DVector<f64>) -> f64,
    ) -> ScalarField {
        let grid = GridSpec::new(bounds, resolution).unwrap();
        let values = (0..grid.len())
            .map(|i| PointValue {
                magnitude: Some(f(&grid.point(i))),
                phase: None,
                tau: None,
                status: EvalStatus::Converged,
            })
            .collect();
        ScalarField {
            grid,
            quantity: Quantity::Magnitude,
            values,
            metadata: FieldMetadata {
                model: "analytic".to_string(),
                params: BTreeMap::new(),
                spectrum_fingerprint: String::new(),
                opts: opts(1.0),
            },
        }
    }

    #[test]
    fn grid_indexing_round_trips() {
        let grid = GridSpec::new(
            vec![[0.0, 1.0], [-1.0, 1.0], [2.0, 3.0]],
            vec![3, 4, 5],
        )
        .unwrap();
        for index in 0..grid.len() {
            assert_eq!(grid.flat_index(&grid.indices(index)), index);
        }
        assert_eq!(grid.len(), 60);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(GridSpec::new(vec![[1.0, 0.0]], vec![4]).is_err());
        assert!(GridSpec::new(vec![[0.0, 1.0]], vec![1]).is_err());
        assert!(GridSpec::new(vec![[0.0, 1.0]], vec![2, 3]).is_err());
    }

    #[test]
    fn abs_x_contours_are_two_vertical_lines() {
        let field = analytic_field(
            vec![[-1.0, 1.0], [-1.0, 1.0]],
            vec![41, 41],
            |p| p[0].abs(),
        );
        let contours = extract_contours(&field, &[0.5]).unwrap();
        let level = &contours.levels[0];
        assert!(!level.empty);
        assert_eq!(level.polylines.len(), 2, "expected two vertical lines");
        let cell = field.grid.axis_step(0);
        for polyline in &level.polylines {
            let x0 = polyline[0][0];
            assert!((x0.abs() - 0.5).abs() <= cell);
            for p in polyline {
                assert!((p[0] - x0).abs() < 1e-12, "line should be vertical");
            }
        }
    }

    #[test]
    fn circle_contour_closes_and_matches_radius() {
        let field = analytic_field(
            vec![[-2.0, 2.0], [-2.0, 2.0]],
            vec![81, 81],
            |p| p.norm(),
        );
        let contours = extract_contours(&field, &[1.0]).unwrap();
        let level = &contours.levels[0];
        assert_eq!(level.polylines.len(), 1);
        let polyline = &level.polylines[0];
        assert_eq!(polyline.first(), polyline.last(), "circle must close");
        for p in polyline {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 1.0).abs() < 0.05, "vertex radius {r}");
        }
    }

    #[test]
    fn contour_vertices_interpolate_to_level() {
        // Closure invariant: along its grid edge, the linearly interpolated
        // field value at each emitted vertex equals the level.
        let field = analytic_field(
            vec![[-1.5, 1.5], [-1.5, 1.5]],
            vec![33, 33],
            |p| (1.3 * p[0]).sin() * (0.7 * p[1] + 0.3).cos() + 0.2 * p[0],
        );
        let grid = &field.grid;
        let (hx, hy) = (grid.axis_step(0), grid.axis_step(1));
        let contours = extract_contours(&field, &[0.25]).unwrap();
        for polyline in &contours.levels[0].polylines {
            for p in polyline {
                // Locate the edge this vertex lies on and interpolate.
                let fx = (p[0] - grid.bounds[0][0]) / hx;
                let fy = (p[1] - grid.bounds[1][0]) / hy;
                let on_x_edge = (fy - fy.round()).abs() < 1e-9;
                let (i0, value) = if on_x_edge {
                    let iy = fy.round() as usize;
                    let ix = fx.floor().min((grid.resolution[0] - 2) as f64) as usize;
                    let v0 = field.value_at(grid.flat_index(&[ix, iy])).unwrap();
                    let v1 = field.value_at(grid.flat_index(&[ix + 1, iy])).unwrap();
                    (fx - ix as f64, v0 + (v1 - v0) * (fx - ix as f64))
                } else {
                    let ix = fx.round() as usize;
                    let iy = fy.floor().min((grid.resolution[1] - 2) as f64) as usize;
                    let v0 = field.value_at(grid.flat_index(&[ix, iy])).unwrap();
                    let v1 = field.value_at(grid.flat_index(&[ix, iy + 1])).unwrap();
                    (fy - iy as f64, v0 + (v1 - v0) * (fy - iy as f64))
                };
                assert!((0.0..=1.0).contains(&i0));
                assert!(
                    (value - 0.25).abs() < 1e-9,
                    "vertex ({}, {}) interpolates to {value}",
                    p[0],
                    p[1]
                );
            }
        }
    }

    #[test]
    fn empty_level_is_flagged_not_fatal() {
        let field = analytic_field(vec![[-1.0, 1.0], [-1.0, 1.0]], vec![11, 11], |p| p[0]);
        let contours = extract_contours(&field, &[5.0, 0.0]).unwrap();
        assert!(contours.levels[0].empty);
        assert!(!contours.levels[1].empty);
    }

    #[test]
    fn sphere_edge_crossings_in_3d() {
        let field = analytic_field(
            vec![[-2.0, 2.0], [-2.0, 2.0], [-2.0, 2.0]],
            vec![21, 21, 21],
            |p| p.norm(),
        );
        let contours = extract_contours(&field, &[1.0]).unwrap();
        let level = &contours.levels[0];
        assert!(!level.empty);
        assert!(level.points.len() > 100);
        for p in &level.points {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 0.1, "crossing radius {r}");
        }
    }

    #[test]
    fn linear_magnitude_field_matches_left_projection() {
        let matrix = DMatrix::from_row_slice(2, 2, &[-0.5, 0.2, 0.1, -1.5]);
        let model = VectorFieldModel::linear(matrix.clone());
        let fp = FixedPoint { location: vec![0.0, 0.0], residual: 0.0 };
        let spectrum = Spectrum::from_jacobian(fp, &matrix).unwrap();
        let grid = GridSpec::new(vec![[-1.0, 1.0], [-1.0, 1.0]], vec![5, 5]).unwrap();
        let field =
            evaluate_field(&model, &spectrum, &grid, Quantity::Magnitude, &opts(80.0))
                .unwrap();
        for index in 0..grid.len() {
            let x = grid.point(index);
            let oracle = spectrum.linear_eigenfunction(0, &x).norm();
            let got = field.values[index].magnitude.unwrap();
            assert!(
                (got - oracle).abs() <= 1e-6 * oracle.max(1e-12),
                "point {:?}: {got} vs {oracle}",
                x.as_slice()
            );
        }
    }

    #[test]
    fn field_at_fixed_point_is_zero() {
        let matrix = DMatrix::from_row_slice(2, 2, &[-0.5, 0.2, 0.1, -1.5]);
        let model = VectorFieldModel::linear(matrix.clone());
        let fp = FixedPoint { location: vec![0.0, 0.0], residual: 0.0 };
        let spectrum = Spectrum::from_jacobian(fp, &matrix).unwrap();
        // Degenerate-looking but valid 2x2 grid centred on the fixed point.
        let grid = GridSpec::new(vec![[-1e-9, 1e-9], [-1e-9, 1e-9]], vec![2, 2]).unwrap();
        let field =
            evaluate_field(&model, &spectrum, &grid, Quantity::Magnitude, &opts(40.0))
                .unwrap();
        assert_eq!(field.values.len(), 4);
        for v in &field.values {
            assert!(v.magnitude.unwrap() < 1e-8);
        }
    }

    #[test]
    fn field_evaluation_is_deterministic_across_thread_counts() {
        let matrix = DMatrix::from_row_slice(2, 2, &[-0.4, -1.1, 1.1, -0.4]);
        let model = VectorFieldModel::linear(matrix.clone());
        let fp = FixedPoint { location: vec![0.0, 0.0], residual: 0.0 };
        let spectrum = Spectrum::from_jacobian(fp, &matrix).unwrap();
        let grid = GridSpec::new(vec![[-1.0, 1.0], [-1.0, 1.0]], vec![6, 6]).unwrap();
        let reference =
            evaluate_field(&model, &spectrum, &grid, Quantity::Magnitude, &opts(60.0))
                .unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| {
                evaluate_field(&model, &spectrum, &grid, Quantity::Magnitude, &opts(60.0))
                    .unwrap()
            });
        for (a, b) in reference.values.iter().zip(&single.values) {
            assert_eq!(a.magnitude, b.magnitude);
            assert_eq!(a.phase, b.phase);
            assert_eq!(a.tau, b.tau);
        }
    }

    #[test]
    fn linearized_coordinates_on_a_spiral() {
        let matrix = DMatrix::from_row_slice(2, 2, &[-0.1, -1.0, 1.0, -0.1]);
        let model = VectorFieldModel::linear(matrix.clone());
        let fp = FixedPoint { location: vec![0.0, 0.0], residual: 0.0 };
        let spectrum = Spectrum::from_jacobian(fp, &matrix).unwrap();
        let x = DVector::from_column_slice(&[0.3, -0.4]);
        let coords = linearize_point(&model, &spectrum, &x, &opts(150.0)).unwrap();
        // For the linear system, z recovers the state offset everywhere.
        let z = coords.z.as_ref().unwrap();
        assert!((z - &x).norm() < 1e-7, "z = {:?}", z.as_slice());
        assert!((coords.r - spectrum.linear_eigenfunction(0, &x).norm()).abs() < 1e-8);
        assert!(coords.theta.is_some());
    }

    #[test]
    fn lyapunov_value_is_zero_at_fixed_point_and_positive_elsewhere() {
        let matrix = DMatrix::from_row_slice(2, 2, &[-0.1, -1.0, 1.0, -0.1]);
        let model = VectorFieldModel::linear(matrix.clone());
        let fp = FixedPoint { location: vec![0.0, 0.0], residual: 0.0 };
        let spectrum = Spectrum::from_jacobian(fp, &matrix).unwrap();
        let at_fp =
            lyapunov_value(&model, &spectrum, &DVector::zeros(2), &opts(100.0)).unwrap();
        assert_eq!(at_fp, 0.0);
        let off = lyapunov_value(
            &model,
            &spectrum,
            &DVector::from_column_slice(&[0.5, 0.0]),
            &opts(100.0),
        )
        .unwrap();
        assert!(off > 0.0);
    }

    #[test]
    fn csv_output_has_full_precision_and_status_column() {
        let field = analytic_field(vec![[0.0, 1.0], [0.0, 1.0]], vec![2, 2], |p| p[0] / 3.0);
        let mut buffer = Vec::new();
        field.write_csv(&mut buffer).unwrap();
        let text = String::from_utf8(buffer).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x1,x2,magnitude,phase,tau,status");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 6);
        assert_eq!(row[5], "converged");
        let value: f64 = row[2].parse().unwrap();
        assert_eq!(value, 0.0);
        let third: Vec<&str> = lines.nth(0).unwrap().split(',').collect();
        let parsed: f64 = third[2].parse().unwrap();
        assert_eq!(parsed, 1.0 / 3.0, "17 digits round-trips exactly");
    }
}
