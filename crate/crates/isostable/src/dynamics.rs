//! Vector-field models: right-hand sides, Jacobians, and fixed-point solving.
//!
//! Models are immutable after construction and safely shareable across
//! threads. Builtins (`fitzhugh_nagumo`, `lorenz`, `linear`) are registered
//! by name so a JSON config can reproduce any run without recompilation.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative agreement required between an analytic Jacobian and central
/// finite differences of the rhs.
pub const JACOBIAN_CHECK_TOL: f64 = 1e-6;

/// Fixed-point residual bound: `||F(x*)|| <= RESIDUAL_TOL * max(1, ||x*||)`.
pub const RESIDUAL_TOL: f64 = 1e-12;

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_MIN_DAMPING: f64 = 9.5367431640625e-7; // 2^-20

type RhsFn = Arc<dyn Fn(&DVector<f64>, &mut DVector<f64>) + Send + Sync>;
type JacFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum DynamicsError {
    /// The rhs or Jacobian produced a non-finite value.
    #[error("vector field is non-finite at {point:?}")]
    NonFiniteField { point: Vec<f64> },
    /// Newton iteration exhausted its iteration budget.
    #[error("fixed-point search did not converge within {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    /// The Newton step could not be solved.
    #[error("singular Jacobian in Newton step at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    /// Model config named an unknown model or carried bad parameters.
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// An autonomous ODE system `x_dot = F(x)` on `R^n`.
#[derive(Clone)]
pub struct VectorFieldModel {
    name: String,
    dim: usize,
    params: BTreeMap<String, f64>,
    rhs: RhsFn,
    jacobian: Option<JacFn>,
}

impl fmt::Debug for VectorFieldModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorFieldModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("params", &self.params)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

/// An equilibrium `x*` together with the rhs residual at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub location: Vec<f64>,
    pub residual: f64,
}

impl FixedPoint {
    pub fn location_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.location)
    }
}

/// JSON model config: `{"model": "...", "params": {...}, "matrix": [[...]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    /// Row-major system matrix, required iff `model == "linear"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
}

impl VectorFieldModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        params: BTreeMap<String, f64>,
        rhs: RhsFn,
        jacobian: Option<JacFn>,
    ) -> Self {
        assert!(dim > 0, "model dimension must be positive");
        Self { name: name.into(), dim, params, rhs, jacobian }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    /// The FitzHugh-Nagumo model
    /// `v_dot = -w - v (v - 1)(v - a) + I`, `w_dot = eps (v - gamma w)`.
    pub fn fitzhugh_nagumo(current: f64, eps: f64, gamma: f64, a: f64) -> Self {
        let params = BTreeMap::from([
            ("I".to_string(), current),
            ("eps".to_string(), eps),
            ("gamma".to_string(), gamma),
            ("a".to_string(), a),
        ]);
        let rhs: RhsFn = Arc::new(move |x, out| {
            let (v, w) = (x[0], x[1]);
            out[0] = -w - v * (v - 1.0) * (v - a) + current;
            out[1] = eps * (v - gamma * w);
        });
        let jac: JacFn = Arc::new(move |x| {
            let v = x[0];
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    -3.0 * v * v + 2.0 * (a + 1.0) * v - a,
                    -1.0,
                    eps,
                    -eps * gamma,
                ],
            )
        });
        Self::new("fitzhugh_nagumo", 2, params, rhs, Some(jac))
    }

    /// The Lorenz model
    /// `x1_dot = a (x2 - x1)`, `x2_dot = x1 (rho - x3) - x2`,
    /// `x3_dot = x1 x2 - b x3`.
    pub fn lorenz(a: f64, rho: f64, b: f64) -> Self {
        let params = BTreeMap::from([
            ("a".to_string(), a),
            ("rho".to_string(), rho),
            ("b".to_string(), b),
        ]);
        let rhs: RhsFn = Arc::new(move |x, out| {
            let (x1, x2, x3) = (x[0], x[1], x[2]);
            out[0] = a * (x2 - x1);
            out[1] = x1 * (rho - x3) - x2;
            out[2] = x1 * x2 - b * x3;
        });
        let jac: JacFn = Arc::new(move |x| {
            let (x1, x2, x3) = (x[0], x[1], x[2]);
            DMatrix::from_row_slice(
                3,
                3,
                &[-a, a, 0.0, rho - x3, -1.0, -x1, x2, x1, -b],
            )
        });
        Self::new("lorenz", 3, params, rhs, Some(jac))
    }

    /// The linear system `x_dot = A x`.
    pub fn linear(matrix: DMatrix<f64>) -> Self {
        assert!(matrix.is_square(), "linear model matrix must be square");
        let dim = matrix.nrows();
        let a = matrix.clone();
        let rhs: RhsFn = Arc::new(move |x, out| out.copy_from(&(&a * x)));
        let jac: JacFn = Arc::new(move |_| matrix.clone());
        Self::new("linear", dim, BTreeMap::new(), rhs, Some(jac))
    }

    /// Instantiate a builtin model from a JSON config.
    pub fn from_config(config: &ModelConfig) -> Result<Self, DynamicsError> {
        fn take(
            params: &BTreeMap<String, f64>,
            key: &str,
            default: f64,
        ) -> f64 {
            params.get(key).copied().unwrap_or(default)
        }
        fn check_keys(
            params: &BTreeMap<String, f64>,
            allowed: &[&str],
        ) -> Result<(), DynamicsError> {
            for key in params.keys() {
                if !allowed.contains(&key.as_str()) {
                    return Err(DynamicsError::InvalidConfig(format!(
                        "unknown parameter {key:?} (allowed: {allowed:?})"
                    )));
                }
            }
            Ok(())
        }

        match config.model.as_str() {
            "fitzhugh_nagumo" => {
                check_keys(&config.params, &["I", "eps", "gamma", "a"])?;
                Ok(Self::fitzhugh_nagumo(
                    take(&config.params, "I", 0.05),
                    take(&config.params, "eps", 0.08),
                    take(&config.params, "gamma", 1.0),
                    take(&config.params, "a", 1.0),
                ))
            }
            "lorenz" => {
                check_keys(&config.params, &["a", "rho", "b"])?;
                Ok(Self::lorenz(
                    take(&config.params, "a", 10.0),
                    take(&config.params, "rho", 0.5),
                    take(&config.params, "b", 8.0 / 3.0),
                ))
            }
            "linear" => {
                check_keys(&config.params, &[])?;
                let rows = config.matrix.as_ref().ok_or_else(|| {
                    DynamicsError::InvalidConfig(
                        "linear model requires \"matrix\"".to_string(),
                    )
                })?;
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(DynamicsError::InvalidConfig(
                        "\"matrix\" must be square and non-empty".to_string(),
                    ));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Ok(Self::linear(DMatrix::from_row_slice(n, n, &flat)))
            }
            other => Err(DynamicsError::InvalidConfig(format!(
                "unknown model {other:?} (expected fitzhugh_nagumo, lorenz, or linear)"
            ))),
        }
    }

    /// Evaluate `F(x)`.
    pub fn evaluate_rhs(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        assert_eq!(x.len(), self.dim, "state dimension mismatch");
        let mut out = DVector::zeros(self.dim);
        (self.rhs)(x, &mut out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(DynamicsError::NonFiniteField { point: x.as_slice().to_vec() })
        }
    }

    /// Infallible rhs evaluation into a caller buffer, for integrator hot loops.
    /// Non-finite values propagate into the output and are caught by the
    /// integrator's step acceptance.
    pub(crate) fn rhs_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        (self.rhs)(x, out);
    }

    /// The Jacobian `dF/dx` at `x`: analytic if registered, otherwise
    /// 4th-order central finite differences with per-coordinate step
    /// `h = 1e-5 * max(1, |x_i|)`.
    pub fn jacobian_at(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let jac = match &self.jacobian {
            Some(jac) => jac(x),
            None => self.finite_difference_jacobian(x)?,
        };
        if jac.iter().all(|v| v.is_finite()) {
            Ok(jac)
        } else {
            Err(DynamicsError::NonFiniteField { point: x.as_slice().to_vec() })
        }
    }

    /// 4th-order central-difference Jacobian, also used to cross-check
    /// analytic Jacobians.
    pub fn finite_difference_jacobian(
        &self,
        x: &DVector<f64>,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        let n = self.dim;
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = x.clone();
        for j in 0..n {
            let h = 1e-5 * x[j].abs().max(1.0);
            let mut column = DVector::zeros(n);
            // (-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / (12 h)
            for (offset, weight) in
                [(2.0, -1.0), (1.0, 8.0), (-1.0, -8.0), (-2.0, 1.0)]
            {
                xp[j] = x[j] + offset * h;
                column += self.evaluate_rhs(&xp)? * (weight / (12.0 * h));
            }
            xp[j] = x[j];
            jac.set_column(j, &column);
        }
        Ok(jac)
    }

    /// Damped Newton iteration on `F(x) = 0`.
    ///
    /// Converged when `||F|| <= 1e-12 * max(1, ||x||)`; the step is halved
    /// while the residual does not decrease, down to a factor of `2^-20`.
    pub fn find_fixed_point(
        &self,
        guess: &DVector<f64>,
    ) -> Result<FixedPoint, DynamicsError> {
        let mut x = guess.clone();
        let mut f = self.evaluate_rhs(&x)?;
        for iteration in 0..NEWTON_MAX_ITER {
            let residual = f.norm();
            if residual <= RESIDUAL_TOL * x.norm().max(1.0) {
                return Ok(FixedPoint {
                    location: x.as_slice().to_vec(),
                    residual,
                });
            }
            let jac = self.jacobian_at(&x)?;
            let step = jac
                .lu()
                .solve(&(-&f))
                .ok_or(DynamicsError::SingularJacobian { iteration })?;
            let mut damping = 1.0;
            loop {
                let candidate = &x + &step * damping;
                match self.evaluate_rhs(&candidate) {
                    Ok(fc) if fc.norm() < residual => {
                        x = candidate;
                        f = fc;
                        break;
                    }
                    _ if damping <= NEWTON_MIN_DAMPING => {
                        return Err(DynamicsError::NoConvergence {
                            iterations: iteration + 1,
                            residual,
                        });
                    }
                    _ => damping *= 0.5,
                }
            }
        }
        let residual = f.norm();
        if residual <= RESIDUAL_TOL * x.norm().max(1.0) {
            Ok(FixedPoint { location: x.as_slice().to_vec(), residual })
        } else {
            Err(DynamicsError::NoConvergence {
                iterations: NEWTON_MAX_ITER,
                residual,
            })
        }
    }
}
