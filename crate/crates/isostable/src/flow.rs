//! Trajectory integration: the flow map `phi(t, x)`.
//!
//! Adaptive Dormand-Prince 5(4) with FSAL, mixed absolute/relative error
//! control, and 4th-order Hermite dense output on accepted steps. Backward
//! direction integrates the sign-flipped field, which is how unstable fixed
//! points are handled throughout the crate. Integration is a pure function
//! of its inputs; sessions hold no shared state and many can run
//! concurrently.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VectorFieldModel;

/// Default mixed tolerance. Laplace limits multiply trajectory values by
/// factors up to ~e^10 at the horizons used on the builtin models, so the
/// integrator must stay far below the quantities being resolved.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const MAX_STEPS_PER_CALL: usize = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on the step size; unbounded by default.
    #[serde(with = "maybe_infinite")]
    pub max_step: f64,
    /// Time horizon used by trajectory sampling and eigenfunction
    /// evaluation.
    pub horizon: f64,
    pub direction: Direction,
    /// Escape test: integration aborts once the state moves farther than
    /// this from `escape_center` (the fixed point, when a caller sets it).
    #[serde(with = "maybe_infinite")]
    pub escape_radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub escape_center: Option<Vec<f64>>,
}

/// JSON has no infinity literal; round-trip unbounded settings as the
/// string `"inf"`.
mod maybe_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(text) => text.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            rel_tol: DEFAULT_TOLERANCE,
            abs_tol: DEFAULT_TOLERANCE,
            max_step: f64::INFINITY,
            horizon: 50.0,
            direction: Direction::Forward,
            escape_radius: f64::INFINITY,
            escape_center: None,
        }
    }
}

impl IntegrationOptions {
    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(FlowError::InvalidOptions("tolerances must be positive"));
        }
        if !(self.horizon > 0.0) {
            return Err(FlowError::InvalidOptions("horizon must be positive"));
        }
        if !(self.max_step > 0.0) {
            return Err(FlowError::InvalidOptions("max_step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    /// The trajectory left the escape ball: outside the basin.
    #[error("trajectory escaped at t = {t:.6e}")]
    Escaped { t: f64, point: Vec<f64> },
    /// Step size underflow, typically a non-finite or non-smooth rhs.
    #[error("step size underflow at t = {t:.6e}")]
    Stalled { t: f64 },
    #[error("invalid integration options: {0}")]
    InvalidOptions(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    Escaped { point: Vec<f64> },
    Stalled,
}

/// Sampled trajectory: strictly increasing times and one state per sample.
/// `terminated` records whether the requested span completed.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub terminated: Termination,
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// 5th-order weights minus the embedded 4th-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// One accepted step with endpoint states and derivatives, supporting
/// 4th-order Hermite interpolation anywhere inside it. Times are session
/// times (non-negative regardless of direction).
pub struct DenseSegment<'a> {
    pub t0: f64,
    pub t1: f64,
    pub x0: &'a DVector<f64>,
    pub x1: &'a DVector<f64>,
    pub f0: &'a DVector<f64>,
    pub f1: &'a DVector<f64>,
}

impl DenseSegment<'_> {
    pub fn eval_into(&self, t: f64, out: &mut DVector<f64>) {
        let h = self.t1 - self.t0;
        let theta = if h == 0.0 { 0.0 } else { (t - self.t0) / h };
        let h00 = (1.0 + 2.0 * theta) * (1.0 - theta) * (1.0 - theta);
        let h10 = theta * (1.0 - theta) * (1.0 - theta);
        let h01 = theta * theta * (3.0 - 2.0 * theta);
        let h11 = theta * theta * (theta - 1.0);
        for i in 0..out.len() {
            out[i] = h00 * self.x0[i]
                + h01 * self.x1[i]
                + h * (h10 * self.f0[i] + h11 * self.f1[i]);
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.x0.len());
        self.eval_into(t, &mut out);
        out
    }
}

/// Resumable integration of one trajectory. Session time is non-negative;
/// for `Direction::Backward` it measures how far backward the physical
/// trajectory has been followed.
pub struct FlowSession<'m> {
    model: &'m VectorFieldModel,
    sign: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_step: f64,
    escape_radius_sq: f64,
    escape_center: DVector<f64>,
    t: f64,
    x: DVector<f64>,
    /// FSAL derivative (already sign-adjusted).
    f: DVector<f64>,
    h: f64,
    x_prev: DVector<f64>,
    f_prev: DVector<f64>,
    stages: [DVector<f64>; 7],
    work: DVector<f64>,
}

impl<'m> FlowSession<'m> {
    pub fn new(
        model: &'m VectorFieldModel,
        x0: &DVector<f64>,
        opts: &IntegrationOptions,
    ) -> Result<Self, FlowError> {
        opts.validate()?;
        assert_eq!(x0.len(), model.dim(), "state dimension mismatch");
        let sign = match opts.direction {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        };
        let n = model.dim();
        let escape_center = match &opts.escape_center {
            Some(c) => DVector::from_column_slice(c),
            None => DVector::zeros(n),
        };
        let mut f = DVector::zeros(n);
        model.rhs_into(x0, &mut f);
        f *= sign;
        if !f.iter().all(|v| v.is_finite()) {
            return Err(FlowError::Stalled { t: 0.0 });
        }
        let mut session = Self {
            model,
            sign,
            rel_tol: opts.rel_tol,
            abs_tol: opts.abs_tol,
            max_step: opts.max_step,
            escape_radius_sq: opts.escape_radius * opts.escape_radius,
            escape_center,
            t: 0.0,
            x: x0.clone(),
            f,
            h: 0.0,
            x_prev: DVector::zeros(n),
            f_prev: DVector::zeros(n),
            stages: std::array::from_fn(|_| DVector::zeros(n)),
            work: DVector::zeros(n),
        };
        session.h = session.initial_step();
        Ok(session)
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    /// Hairer's starting-step heuristic for a 5th-order method.
    fn initial_step(&mut self) -> f64 {
        let scale = |x: &DVector<f64>, v: &DVector<f64>| -> f64 {
            let mut acc = 0.0;
            for i in 0..x.len() {
                let s = self.abs_tol + self.rel_tol * x[i].abs();
                acc += (v[i] / s) * (v[i] / s);
            }
            (acc / x.len() as f64).sqrt()
        };
        let d0 = scale(&self.x, &self.x);
        let d1 = scale(&self.x, &self.f);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        // One explicit Euler probe to estimate the second derivative.
        for i in 0..self.x.len() {
            self.work[i] = self.x[i] + h0 * self.f[i];
        }
        let mut f1 = DVector::zeros(self.x.len());
        self.model.rhs_into(&self.work, &mut f1);
        f1 *= self.sign;
        let mut d2 = 0.0;
        if f1.iter().all(|v| v.is_finite()) {
            for i in 0..self.x.len() {
                let s = self.abs_tol + self.rel_tol * self.x[i].abs();
                d2 += ((f1[i] - self.f[i]) / s).powi(2);
            }
            d2 = (d2 / self.x.len() as f64).sqrt() / h0;
        }
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(self.max_step)
    }

    /// Advance to session time `t_target`, invoking `on_segment` for every
    /// accepted step (dense output visitor).
    pub fn advance_to_with<F>(
        &mut self,
        t_target: f64,
        mut on_segment: F,
    ) -> Result<(), FlowError>
    where
        F: FnMut(&DenseSegment<'_>),
    {
        assert!(
            t_target >= self.t,
            "advance_to_with target must not move backward in session time"
        );
        let n = self.x.len();
        let mut steps = 0usize;
        while self.t < t_target {
            steps += 1;
            if steps > MAX_STEPS_PER_CALL {
                return Err(FlowError::Stalled { t: self.t });
            }
            let mut h = self.h.min(self.max_step).min(t_target - self.t);
            if h <= 16.0 * f64::EPSILON * self.t.abs().max(1.0) {
                // Hitting the target with a microscopic sliver is fine;
                // a genuine underflow mid-span is a stall.
                if t_target - self.t <= 16.0 * f64::EPSILON * self.t.abs().max(1.0) {
                    self.t = t_target;
                    return Ok(());
                }
                return Err(FlowError::Stalled { t: self.t });
            }

            // Stage 1 is the FSAL derivative from the previous step.
            self.stages[0].copy_from(&self.f);
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, a) in A[s - 1].iter().enumerate().take(s) {
                        acc += a * self.stages[j][i];
                    }
                    self.work[i] = self.x[i] + h * acc;
                }
                let _ = C; // stage times unused: the field is autonomous
                let (head, tail) = self.stages.split_at_mut(s);
                let _ = head;
                self.model.rhs_into(&self.work, &mut tail[0]);
                if self.sign < 0.0 {
                    tail[0] *= -1.0;
                }
            }
            // Stage 7 was evaluated at the 5th-order solution (A[5] row equals
            // the b weights), so `work` now holds the candidate endpoint.
            let mut err_sq = 0.0;
            // Scale floor of 1e-3 * ||x||: keeps pure-relative control usable
            // for deeply decaying solutions without stalling on components
            // that cross zero.
            let norm_floor = 1e-3
                * self
                    .work
                    .iter()
                    .chain(self.x.iter())
                    .fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                let mut err = 0.0;
                for (j, e) in E.iter().enumerate() {
                    err += e * self.stages[j][i];
                }
                err *= h;
                let magnitude = self.x[i].abs().max(self.work[i].abs()).max(norm_floor);
                let scale = self.abs_tol + self.rel_tol * magnitude;
                err_sq += (err / scale) * (err / scale);
            }
            let err_norm = (err_sq / n as f64).sqrt();
            let finite = err_norm.is_finite() && self.work.iter().all(|v| v.is_finite());

            if finite && err_norm <= 1.0 {
                self.x_prev.copy_from(&self.x);
                self.f_prev.copy_from(&self.stages[0]);
                let t0 = self.t;
                self.t += h;
                self.x.copy_from(&self.work);
                self.f.copy_from(&self.stages[6]);
                let segment = DenseSegment {
                    t0,
                    t1: self.t,
                    x0: &self.x_prev,
                    x1: &self.x,
                    f0: &self.f_prev,
                    f1: &self.f,
                };
                on_segment(&segment);

                let mut delta_sq = 0.0;
                for i in 0..n {
                    let d = self.x[i] - self.escape_center[i];
                    delta_sq += d * d;
                }
                if delta_sq > self.escape_radius_sq {
                    return Err(FlowError::Escaped {
                        t: self.t,
                        point: self.x.as_slice().to_vec(),
                    });
                }

                let factor = if err_norm == 0.0 {
                    FAC_MAX
                } else {
                    (SAFETY * err_norm.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
                };
                self.h = h * factor;
            } else {
                let factor = if finite {
                    (SAFETY * err_norm.powf(-0.2)).clamp(FAC_MIN, 1.0)
                } else {
                    0.25
                };
                h *= factor;
                if h <= 16.0 * f64::EPSILON * self.t.abs().max(1.0) {
                    return Err(FlowError::Stalled { t: self.t });
                }
                self.h = h;
            }
        }
        Ok(())
    }

    pub fn advance_to(&mut self, t_target: f64) -> Result<(), FlowError> {
        self.advance_to_with(t_target, |_| {})
    }
}

/// Endpoint of the flow: `phi(t, x0)` (or `phi(-t, x0)` for
/// `Direction::Backward`).
pub fn flow_to(
    model: &VectorFieldModel,
    x0: &DVector<f64>,
    t: f64,
    opts: &IntegrationOptions,
) -> Result<DVector<f64>, FlowError> {
    assert!(t >= 0.0, "flow_to takes a non-negative duration");
    let mut session = FlowSession::new(model, x0, opts)?;
    session.advance_to(t)?;
    Ok(session.state().clone())
}

/// States at the requested times (strictly increasing, within
/// `[0, opts.horizon]`), interpolated from dense output. Escape or stall is
/// recorded in `terminated` rather than failing the call.
pub fn sample_trajectory(
    model: &VectorFieldModel,
    x0: &DVector<f64>,
    times: &[f64],
    opts: &IntegrationOptions,
) -> Result<Trajectory, FlowError> {
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FlowError::InvalidOptions("sample times must be strictly increasing"));
    }
    if times.iter().any(|&t| t < 0.0 || t > opts.horizon) {
        return Err(FlowError::InvalidOptions("sample times must lie in [0, horizon]"));
    }
    let mut sampled_times = Vec::with_capacity(times.len());
    let mut states = Vec::with_capacity(times.len());
    let mut cursor = 0usize;
    if let Some(&first) = times.first() {
        if first == 0.0 {
            sampled_times.push(0.0);
            states.push(x0.clone());
            cursor = 1;
        }
    }
    let mut session = FlowSession::new(model, x0, opts)?;
    let end = times.last().copied().unwrap_or(0.0);
    let result = session.advance_to_with(end, |segment| {
        while cursor < times.len() && times[cursor] <= segment.t1 {
            sampled_times.push(times[cursor]);
            states.push(segment.eval(times[cursor]));
            cursor += 1;
        }
    });
    let terminated = match result {
        Ok(()) => Termination::Completed,
        Err(FlowError::Escaped { point, .. }) => Termination::Escaped { point },
        Err(FlowError::Stalled { .. }) => Termination::Stalled,
        Err(e) => return Err(e),
    };
    Ok(Trajectory { times: sampled_times, states, terminated })
}
