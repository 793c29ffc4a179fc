//! Koopman eigenfunction data at a point via Laplace averages.
//!
//! The slowest eigenfunction is evaluated from trajectory data in one of two
//! ways: the direct (finite-horizon) Laplace-average integral, or the
//! accelerated limit forms — `e^(-sigma_1 t) f(phi_t(x))` for a real leading
//! eigenvalue, and strobing with the time-`T_1` map for a complex pair.
//! Both multiply a decaying trajectory observable by a growing exponential,
//! so every evaluation runs under an instability guard: once the successive
//! checkpoint estimates stop improving, the computation is cut off and the
//! last stable estimate is reported.
//!
//! Magnitudes are normalized to the observable-independent `|s1(x)|` by
//! dividing out the leading Koopman mode of the observable (with the extra
//! factor of two in the complex case), so level sets computed with different
//! observables coincide.

use std::ops::ControlFlow;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, VectorFieldModel};
use crate::flow::{Direction, FlowError, FlowSession, IntegrationOptions};
use crate::spectrum::{LeadingClass, Spectrum, SpectrumError, Stability};

/// Projection admissibility threshold: `|<grad f, v_1>| >= 1e-8 ||grad f||`.
pub const PROJECTION_TOL: f64 = 1e-8;

/// Convergence is declared once the relative change stays below this over
/// three consecutive checkpoints.
pub const CONVERGENCE_REL: f64 = 1e-6;

const CONSECUTIVE_CONVERGED: usize = 3;
/// Checkpoint spacing is `min(1/|sigma_1|, horizon / CHECKPOINT_DIVISOR)`.
const CHECKPOINT_DIVISOR: f64 = 50.0;
/// Span angle below which the spiral axes are treated as parallel.
const DEGENERATE_SPAN_ANGLE: f64 = 1e-6;
/// First-mode residual bound for generalized averages, relative to the
/// subtracted term.
const SUBTRACTION_LOSS_REL: f64 = 1e-3;

// 4-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 4] = [
    -0.8611363115940526,
    -0.3399810435848563,
    0.3399810435848563,
    0.8611363115940526,
];
const GL_WEIGHTS: [f64; 4] = [
    0.3478548451374538,
    0.6521451548625461,
    0.6521451548625461,
    0.3478548451374538,
];

#[derive(Debug, Error)]
pub enum LaplaceError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    /// The trajectory left the basin (escape, or settled at a different
    /// attractor).
    #[error("trajectory diverged from the fixed point's basin at t = {t:.6e}")]
    Diverged { t: f64, point: Vec<f64> },
    /// The instability guard tripped before any stable estimate existed.
    #[error("numerical instability guard triggered at t = {t:.6e} with no stable estimate")]
    GuardTriggered { t: f64 },
    /// Integration broke down (step underflow).
    #[error("integration stalled at t = {t:.6e}")]
    Stalled { t: f64 },
    /// The observable has no usable projection on the leading eigenvector.
    #[error("observable projection |<grad f, v1>| = {projection:.3e} below {PROJECTION_TOL:.0e} * ||grad f||")]
    ZeroProjection { projection: f64 },
    /// Spiral axes nearly parallel; the observable pair would be ill-posed.
    #[error("spiral axes are degenerate: span angle {angle:.3e} rad")]
    DegenerateSpan { angle: f64 },
    #[error("tau difference requires strictly positive magnitudes")]
    ZeroMagnitude,
    /// The subtracted first mode left a residual too large for the
    /// generalized average to be meaningful.
    #[error("first-mode subtraction residual {residual:.3e} exceeds {SUBTRACTION_LOSS_REL:.0e} of subtracted term {scale:.3e}")]
    SubtractionLoss { residual: f64, scale: f64 },
    #[error("operation requires the {expected:?} leading class")]
    WrongLeadingClass { expected: LeadingClass },
    #[error("generalized Laplace averages are implemented for j = 2 only (got {j})")]
    UnsupportedIndex { j: usize },
    #[error("horizon {horizon} too short: needs at least {required}")]
    HorizonTooShort { horizon: f64, required: f64 },
}

impl From<FlowError> for LaplaceError {
    fn from(err: FlowError) -> Self {
        match err {
            FlowError::Escaped { t, point } => LaplaceError::Diverged { t, point },
            FlowError::Stalled { t } => LaplaceError::Stalled { t },
            FlowError::InvalidOptions(msg) => {
                LaplaceError::Dynamics(DynamicsError::InvalidConfig(msg.to_string()))
            }
        }
    }
}

/// Termination status of a pointwise eigenfunction evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EvalStatus {
    Converged,
    /// Outside the basin of the fixed point.
    Diverged,
    /// Instability guard hit; the value is the last stable estimate.
    Truncated { t_stop: f64 },
}

/// Eigenfunction data at one point: `|s1|`, the phase for a complex leading
/// pair, and the isostable time coordinate `tau`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenfunctionValue {
    /// Observable-independent `|s1(x)|`.
    pub magnitude: f64,
    /// `angle s1(x)` in `[0, 2 pi)`; complex leading pair only.
    pub phase: Option<f64>,
    /// `tau` with `e^(sigma_1 tau) = |s1|` (real) or `2 |s1|` (complex);
    /// `+inf` on the isostable through the fixed point.
    pub tau: f64,
    pub status: EvalStatus,
}

/// Scalar observable with `f(x*) = 0` and a recorded gradient at the fixed
/// point. The linear form `f(x) = g . (x - x*)` is the default; nonlinear
/// observables carry their own evaluator plus the gradient.
#[derive(Clone)]
pub struct Observable {
    gradient: DVector<Complex64>,
    fixed_point: DVector<f64>,
    evaluator: Option<Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>>,
    /// Value subtracted so that `f(x*) = 0` exactly (nonlinear case).
    offset: f64,
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Observable")
            .field("gradient", &self.gradient.as_slice())
            .field("nonlinear", &self.evaluator.is_some())
            .finish()
    }
}

impl Observable {
    /// `f(x) = g . (x - x*)` with a real gradient.
    pub fn linear_form(gradient: &DVector<f64>, fixed_point: &DVector<f64>) -> Self {
        Self {
            gradient: gradient.map(|v| Complex64::new(v, 0.0)),
            fixed_point: fixed_point.clone(),
            evaluator: None,
            offset: 0.0,
        }
    }

    /// Complex-gradient linear form, e.g. `f(x) = <x - x*, vt_1>`.
    pub fn linear_form_complex(
        gradient: &DVector<Complex64>,
        fixed_point: &DVector<f64>,
    ) -> Self {
        Self {
            gradient: gradient.clone(),
            fixed_point: fixed_point.clone(),
            evaluator: None,
            offset: 0.0,
        }
    }

    /// Registered nonlinear observable; the offset `f(x*)` is subtracted so
    /// the invariant `f(x*) = 0` holds exactly.
    pub fn nonlinear(
        f: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
        gradient_at_fp: &DVector<f64>,
        fixed_point: &DVector<f64>,
    ) -> Self {
        let offset = f(fixed_point);
        Self {
            gradient: gradient_at_fp.map(|v| Complex64::new(v, 0.0)),
            fixed_point: fixed_point.clone(),
            evaluator: Some(f),
            offset,
        }
    }

    /// Default observable for a real leading eigenvalue: the left
    /// eigenvector direction, which has no projection on the faster
    /// eigenfunctions of the linearization and so converges fastest.
    pub fn leading_left(spectrum: &Spectrum) -> Self {
        let g: DVector<f64> = spectrum.left_vector(0).map(|c| c.re);
        let norm = g.norm();
        Self::linear_form(&(g / norm), &spectrum.fixed_point.location_vector())
    }

    pub fn value(&self, x: &DVector<f64>) -> Complex64 {
        match &self.evaluator {
            Some(f) => Complex64::new(f(x) - self.offset, 0.0),
            None => {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..x.len() {
                    acc += self.gradient[i] * (x[i] - self.fixed_point[i]);
                }
                acc
            }
        }
    }

    pub fn gradient(&self) -> &DVector<Complex64> {
        &self.gradient
    }

    /// Bilinear Koopman-mode pairing `g . v` (no conjugation).
    pub fn mode_pairing(&self, v: &DVector<Complex64>) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..v.len() {
            acc += self.gradient[i] * v[i];
        }
        acc
    }

    /// Admissibility on the eigenvector `v`: nonzero projection.
    fn check_projection(&self, v: &DVector<Complex64>) -> Result<Complex64, LaplaceError> {
        let pairing = self.mode_pairing(v);
        let gradient_norm = self.gradient.norm();
        if pairing.norm() < PROJECTION_TOL * gradient_norm {
            return Err(LaplaceError::ZeroProjection {
                projection: pairing.norm() / gradient_norm.max(f64::MIN_POSITIVE),
            });
        }
        Ok(pairing)
    }
}

/// Pointwise evaluation policy on top of the integration options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceOptions {
    pub integration: IntegrationOptions,
    /// Arm the instability guard once the relative change falls below this.
    pub guard_arm_rel: f64,
    /// Growth factor of the relative change that trips the armed guard.
    pub guard_growth: f64,
    /// Basin test: a trajectory that settles (`||F||` small) farther than
    /// `settle_fraction * max(1, ||x0 - x*||)` from the fixed point is
    /// outside the basin.
    pub settle_fraction: f64,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        Self {
            integration: IntegrationOptions::default(),
            guard_arm_rel: 1e-3,
            guard_growth: 1.5,
            settle_fraction: 1e-2,
        }
    }
}

impl LaplaceOptions {
    fn flow_options(&self, spectrum: &Spectrum) -> IntegrationOptions {
        let mut opts = self.integration.clone();
        // Unstable fixed points are handled by time reversal.
        opts.direction = match spectrum.stability {
            Stability::Stable => Direction::Forward,
            Stability::Unstable => Direction::Backward,
        };
        if opts.escape_center.is_none() {
            opts.escape_center = Some(spectrum.fixed_point.location.clone());
        }
        opts
    }
}

/// Raw Laplace-average value (observable units) with its evaluation status.
#[derive(Debug, Clone)]
pub struct LaplaceAverage {
    pub value: Complex64,
    pub status: EvalStatus,
    /// Time at which the reported estimate was taken.
    pub t_stop: f64,
}

/// Generalized (second-mode) Laplace average.
#[derive(Debug, Clone)]
pub struct GeneralizedAverage {
    /// Normalized `s_2(x)` estimate (Koopman mode divided out).
    pub value: Complex64,
    pub status: EvalStatus,
    /// Set on nonlinear models: no accuracy claim is made.
    pub experimental: bool,
}

/// `tau - tau' = ln(v / v') / sigma_1`: the flow time between the isostables
/// holding magnitudes `v` and `v'`.
pub fn tau_difference(v: f64, v_prime: f64, spectrum: &Spectrum) -> Result<f64, LaplaceError> {
    if !(v > 0.0 && v_prime > 0.0) {
        return Err(LaplaceError::ZeroMagnitude);
    }
    Ok((v / v_prime).ln() / spectrum.effective_sigma1())
}

/// Observables `(f1, f2)` for the complex-pair limit: linear forms dual to
/// the spiral axes, `g1 . a = 1`, `g1 . b = 0`, `g2 . b = 1`, `g2 . a = 0`,
/// with no component outside `span{a, b}`.
pub fn build_observable_pair(
    spectrum: &Spectrum,
) -> Result<(Observable, Observable), LaplaceError> {
    let (a, b) = spectrum.spiral_axes().map_err(|_| LaplaceError::WrongLeadingClass {
        expected: LeadingClass::ComplexPair,
    })?;
    let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
    let cross_sq = (aa * bb - ab * ab).max(0.0);
    let angle = cross_sq.sqrt().atan2(ab.abs());
    if angle < DEGENERATE_SPAN_ANGLE {
        return Err(LaplaceError::DegenerateSpan { angle });
    }
    let gram = DMatrix::from_row_slice(2, 2, &[aa, ab, ab, bb]);
    let lu = gram.lu();
    let c1 = lu
        .solve(&DVector::from_column_slice(&[1.0, 0.0]))
        .ok_or(LaplaceError::DegenerateSpan { angle })?;
    let c2 = lu
        .solve(&DVector::from_column_slice(&[0.0, 1.0]))
        .ok_or(LaplaceError::DegenerateSpan { angle })?;
    let fp = spectrum.fixed_point.location_vector();
    let g1 = &a * c1[0] + &b * c1[1];
    let g2 = &a * c2[0] + &b * c2[1];
    Ok((Observable::linear_form(&g1, &fp), Observable::linear_form(&g2, &fp)))
}

// ---------------------------------------------------------------------------
// Checkpoint sequence policy: convergence detection and instability guard.
// ---------------------------------------------------------------------------

struct SequencePolicy {
    arm_rel: f64,
    growth: f64,
    previous: Option<Complex64>,
    /// Ring of the most recent post-arm relative changes. Comparing a new
    /// change against the max of this window tolerates transient dips (one
    /// decaying mode handing over to a slower one passes through a
    /// spuriously small change) while still catching the growth of the
    /// noise floor.
    recent_rels: [f64; 3],
    recent_len: usize,
    below_count: usize,
    armed: bool,
    /// Latest checkpoint, reported when the horizon ends mid-convergence.
    latest: Option<(Complex64, f64)>,
    /// Most stable estimate so far: the checkpoint with the smallest
    /// relative change. Reported on a guard trip, when the latest
    /// checkpoints may already carry amplified noise.
    stable: Option<(Complex64, f64)>,
    stable_rel: f64,
}

enum SequenceStep {
    Continue,
    Converged(Complex64, f64),
    Tripped,
}

impl SequencePolicy {
    fn new(opts: &LaplaceOptions) -> Self {
        Self {
            arm_rel: opts.guard_arm_rel,
            growth: opts.guard_growth,
            previous: None,
            recent_rels: [0.0; 3],
            recent_len: 0,
            below_count: 0,
            armed: false,
            latest: None,
            stable: None,
            stable_rel: f64::INFINITY,
        }
    }

    fn push(&mut self, t: f64, value: Complex64) -> SequenceStep {
        if !value.is_finite() {
            return SequenceStep::Tripped;
        }
        let Some(previous) = self.previous else {
            self.previous = Some(value);
            self.latest = Some((value, t));
            self.stable = Some((value, t));
            return SequenceStep::Continue;
        };
        let delta = (value - previous).norm();
        let rel =
            if delta == 0.0 { 0.0 } else { delta / value.norm().max(f64::MIN_POSITIVE) };
        self.previous = Some(value);

        if rel < CONVERGENCE_REL {
            self.below_count += 1;
        } else {
            self.below_count = 0;
        }
        if rel < self.arm_rel {
            self.armed = true;
        }
        if self.below_count >= CONSECUTIVE_CONVERGED {
            return SequenceStep::Converged(value, t);
        }
        if self.armed {
            if self.recent_len > 0 {
                let recent_max = self.recent_rels[..self.recent_len.min(3)]
                    .iter()
                    .fold(0.0f64, |m, &r| m.max(r));
                if rel > recent_max * self.growth && rel > CONVERGENCE_REL {
                    return SequenceStep::Tripped;
                }
            }
            self.recent_rels[self.recent_len % 3] = rel;
            self.recent_len += 1;
        }
        if rel <= self.stable_rel {
            self.stable_rel = rel;
            self.stable = Some((value, t));
        }
        self.latest = Some((value, t));
        SequenceStep::Continue
    }
}

enum SequenceEnd {
    Converged(Complex64, f64),
    Truncated(Complex64, f64),
    HorizonEnd(Complex64, f64),
}

/// Drive a checkpoint sequence to completion under the guard policy.
///
/// `next` yields `(t_k, value_k)` checkpoints or flow errors; the sequence
/// ends at convergence, guard trip, or horizon exhaustion (`next` returns
/// `Break`).
fn drive_sequence<F>(opts: &LaplaceOptions, mut next: F) -> Result<SequenceEnd, LaplaceError>
where
    F: FnMut() -> Result<ControlFlow<(), (f64, Complex64)>, LaplaceError>,
{
    let mut policy = SequencePolicy::new(opts);
    loop {
        match next()? {
            ControlFlow::Break(()) => {
                let (value, t) =
                    policy.latest.ok_or(LaplaceError::GuardTriggered { t: 0.0 })?;
                return Ok(SequenceEnd::HorizonEnd(value, t));
            }
            ControlFlow::Continue((t, value)) => match policy.push(t, value) {
                SequenceStep::Continue => {}
                SequenceStep::Converged(value, t) => {
                    return Ok(SequenceEnd::Converged(value, t));
                }
                SequenceStep::Tripped => {
                    let (value, t_stop) =
                        policy.stable.ok_or(LaplaceError::GuardTriggered { t })?;
                    return Ok(SequenceEnd::Truncated(value, t_stop));
                }
            },
        }
    }
}

/// Post-run basin test: a trajectory that settled far from the fixed point
/// converged to some other attractor.
fn settled_outside_basin(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    opts: &LaplaceOptions,
    x0: &DVector<f64>,
    x_end: &DVector<f64>,
) -> bool {
    let fp = spectrum.fixed_point.location_vector();
    let distance = (x_end - &fp).norm();
    let radius = opts.settle_fraction * (x0 - &fp).norm().max(1.0);
    if distance <= radius {
        return false;
    }
    let mut f = DVector::zeros(model.dim());
    model.rhs_into(x_end, &mut f);
    f.norm() <= 1e-3 * spectrum.effective_sigma1().abs() * distance
}

fn checkpoint_spacing(sigma: f64, horizon: f64) -> f64 {
    (1.0 / sigma.abs()).min(horizon / CHECKPOINT_DIVISOR)
}

// ---------------------------------------------------------------------------
// Limit forms.
// ---------------------------------------------------------------------------

/// Eigenfunction value via the real-eigenvalue limit
/// `f*(x) = lim e^(-sigma_1 t) f(phi_t(x))`, evaluated at checkpoints under
/// the guard policy, normalized to `|s1|` via the Koopman mode
/// `<grad f, v1>`.
pub fn eigenfunction_real(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    f: &Observable,
    x: &DVector<f64>,
    opts: &LaplaceOptions,
) -> Result<EigenfunctionValue, LaplaceError> {
    if spectrum.leading_class != LeadingClass::Real {
        return Err(LaplaceError::WrongLeadingClass { expected: LeadingClass::Real });
    }
    let mode = f.check_projection(spectrum.right_vector(0))?;
    let sigma = spectrum.effective_sigma1();
    let horizon = opts.integration.horizon;
    let spacing = checkpoint_spacing(sigma, horizon);
    let flow_opts = opts.flow_options(spectrum);
    let mut session = FlowSession::new(model, x, &flow_opts)?;

    let mut k = 0usize;
    let end = drive_sequence(opts, || {
        k += 1;
        let t = k as f64 * spacing;
        if t > horizon * (1.0 + 1e-12) {
            return Ok(ControlFlow::Break(()));
        }
        session.advance_to(t)?;
        let value = f.value(session.state()) * (-sigma * t).exp();
        Ok(ControlFlow::Continue((t, value)))
    });
    finish_eigenfunction(model, spectrum, opts, x, session.state(), end, |raw| {
        (raw.norm() / mode.norm(), None)
    })
}

/// Eigenfunction value via the complex-pair limit: iterate the time-`T_1`
/// map, track `m_n = e^(-sigma_1 n T_1) sqrt(f1^2 + f2^2)` and the phase
/// `atan2(f2, f1)` (the accumulated rotation `n omega_1 T_1` is an exact
/// multiple of `2 pi` by construction of `T_1`, so each iterate observes the
/// t = 0 phase directly).
pub fn eigenfunction_complex(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    x: &DVector<f64>,
    opts: &LaplaceOptions,
) -> Result<EigenfunctionValue, LaplaceError> {
    let period = spectrum.reduced_period().map_err(|_| LaplaceError::WrongLeadingClass {
        expected: LeadingClass::ComplexPair,
    })?;
    let (f1, f2) = build_observable_pair(spectrum)?;
    let sigma = spectrum.effective_sigma1();
    let horizon = opts.integration.horizon;
    if horizon < period {
        return Err(LaplaceError::HorizonTooShort { horizon, required: period });
    }
    let flow_opts = opts.flow_options(spectrum);
    let mut session = FlowSession::new(model, x, &flow_opts)?;

    let strobe = |state: &DVector<f64>, t: f64| -> Complex64 {
        let (u1, u2) = (f1.value(state).re, f2.value(state).re);
        let m = (-sigma * t).exp() * u1.hypot(u2);
        let theta = u2.atan2(u1);
        Complex64::from_polar(m, theta)
    };

    let mut n = 0usize;
    let mut first = true;
    let end = drive_sequence(opts, || {
        if first {
            first = false;
            return Ok(ControlFlow::Continue((0.0, strobe(session.state(), 0.0))));
        }
        n += 1;
        let t = n as f64 * period;
        if t > horizon * (1.0 + 1e-12) {
            return Ok(ControlFlow::Break(()));
        }
        session.advance_to(t)?;
        Ok(ControlFlow::Continue((t, strobe(session.state(), t))))
    });
    finish_eigenfunction(model, spectrum, opts, x, session.state(), end, |raw| {
        // e^(sigma_1 tau) = 2 |s1|: the pair has unit projections, so the
        // raw limit is exactly e^(sigma_1 tau).
        let magnitude = raw.norm() / 2.0;
        let phase = raw.arg().rem_euclid(std::f64::consts::TAU);
        (magnitude, Some(phase))
    })
}

fn finish_eigenfunction(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    opts: &LaplaceOptions,
    x0: &DVector<f64>,
    x_end: &DVector<f64>,
    end: Result<SequenceEnd, LaplaceError>,
    normalize: impl Fn(Complex64) -> (f64, Option<f64>),
) -> Result<EigenfunctionValue, LaplaceError> {
    let end = end?;
    if settled_outside_basin(model, spectrum, opts, x0, x_end) {
        return Err(LaplaceError::Diverged {
            t: opts.integration.horizon,
            point: x_end.as_slice().to_vec(),
        });
    }
    let (raw, status) = match end {
        SequenceEnd::Converged(value, _) => (value, EvalStatus::Converged),
        SequenceEnd::Truncated(value, t_stop) => (value, EvalStatus::Truncated { t_stop }),
        // The horizon ended with the estimate still improving; report it as
        // converged to the horizon's accuracy.
        SequenceEnd::HorizonEnd(value, _) => (value, EvalStatus::Converged),
    };
    let (magnitude, phase) = normalize(raw);
    let sigma = spectrum.effective_sigma1();
    let tau = match phase {
        // e^(sigma tau) = |s1| (real), = 2 |s1| (complex).
        None => magnitude.ln() / sigma,
        Some(_) => (2.0 * magnitude).ln() / sigma,
    };
    Ok(EigenfunctionValue { magnitude, phase, tau, status })
}

// ---------------------------------------------------------------------------
// Integral form.
// ---------------------------------------------------------------------------

/// Shared quadrature walk: integrates `integrand(x(t)) e^(-lambda_i t)` for
/// every requested weight by 4-point Gauss-Legendre on the dense output of
/// each accepted step.
struct QuadratureRun<'m> {
    session: FlowSession<'m>,
    lambdas: Vec<Complex64>,
    integrals: Vec<Complex64>,
    sample: DVector<f64>,
}

impl<'m> QuadratureRun<'m> {
    fn new(
        model: &'m VectorFieldModel,
        x: &DVector<f64>,
        flow_opts: &IntegrationOptions,
        lambdas: Vec<Complex64>,
    ) -> Result<Self, LaplaceError> {
        let session = FlowSession::new(model, x, flow_opts)?;
        let integrals = vec![Complex64::new(0.0, 0.0); lambdas.len()];
        let sample = DVector::zeros(model.dim());
        Ok(Self { session, lambdas, integrals, sample })
    }

    fn advance_to(
        &mut self,
        t: f64,
        integrand: &impl Fn(f64, &DVector<f64>) -> Complex64,
    ) -> Result<(), LaplaceError> {
        let lambdas = &self.lambdas;
        let integrals = &mut self.integrals;
        let sample = &mut self.sample;
        self.session.advance_to_with(t, |segment| {
            let half = 0.5 * (segment.t1 - segment.t0);
            let mid = 0.5 * (segment.t0 + segment.t1);
            for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS) {
                let tq = mid + half * node;
                segment.eval_into(tq, sample);
                let fv = integrand(tq, sample);
                for (lambda, integral) in lambdas.iter().zip(integrals.iter_mut()) {
                    *integral += fv * (-lambda * tq).exp() * (weight * half);
                }
            }
        })?;
        Ok(())
    }
}

/// Finite-horizon approximation of the Laplace average
/// `f*_lambda1(x) = lim (1/T) int_0^T f(phi_t(x)) e^(-lambda_1 t) dt`.
///
/// The reported value is a tail-window mean of the accumulated integral
/// (windows snap to half rotation periods when `lambda_1` is complex,
/// cancelling the persistent `2 omega_1` oscillation), which approaches the
/// same limit exponentially instead of like `1/T`. Checkpoint estimates run
/// under the same guard policy as the limit forms; the last stable estimate
/// is returned.
pub fn laplace_average_integral(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    f: &Observable,
    x: &DVector<f64>,
    horizon: f64,
    opts: &LaplaceOptions,
) -> Result<LaplaceAverage, LaplaceError> {
    let lambda = match spectrum.stability {
        Stability::Stable => spectrum.lambda1(),
        Stability::Unstable => -spectrum.lambda1(),
    };
    windowed_average(model, spectrum, x, horizon, opts, lambda, &|_, state| f.value(state))
}

fn windowed_average(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    x: &DVector<f64>,
    horizon: f64,
    opts: &LaplaceOptions,
    lambda: Complex64,
    integrand: &impl Fn(f64, &DVector<f64>) -> Complex64,
) -> Result<LaplaceAverage, LaplaceError> {
    let mut spacing = checkpoint_spacing(lambda.re, horizon);
    if lambda.im != 0.0 {
        // Snap the checkpoint grid to half rotation periods so every
        // checkpoint-aligned window integrates whole oscillation periods.
        let half_period = std::f64::consts::PI / lambda.im.abs();
        spacing = (spacing / half_period).ceil().max(1.0) * half_period;
    }
    if horizon < 2.0 * spacing {
        return Err(LaplaceError::HorizonTooShort { horizon, required: 2.0 * spacing });
    }
    let flow_opts = opts.flow_options(spectrum);
    let mut run = QuadratureRun::new(model, x, &flow_opts, vec![lambda])?;
    let mut history: Vec<Complex64> = vec![Complex64::new(0.0, 0.0)];

    let mut k = 0usize;
    let end = drive_sequence(opts, || {
        // Two quadrature checkpoints per estimate: the tail window is the
        // latest half of the elapsed time, and both window endpoints must
        // advance together or the estimate sequence zigzags and the guard
        // sees spurious growth.
        k += 2;
        let t = k as f64 * spacing;
        if t > horizon * (1.0 + 1e-12) {
            return Ok(ControlFlow::Break(()));
        }
        run.advance_to((k - 1) as f64 * spacing, integrand)?;
        history.push(run.integrals[0]);
        run.advance_to(t, integrand)?;
        history.push(run.integrals[0]);
        let m = k / 2;
        let window = (k - m) as f64 * spacing;
        let estimate = (history[k] - history[m]) / window;
        Ok(ControlFlow::Continue((t, estimate)))
    })?;
    if settled_outside_basin(model, spectrum, opts, x, run.session.state()) {
        return Err(LaplaceError::Diverged {
            t: horizon,
            point: run.session.state().as_slice().to_vec(),
        });
    }
    let (value, status, t_stop) = match end {
        SequenceEnd::Converged(value, t) => (value, EvalStatus::Converged, t),
        SequenceEnd::Truncated(value, t) => (value, EvalStatus::Truncated { t_stop: t }, t),
        SequenceEnd::HorizonEnd(value, t) => (value, EvalStatus::Converged, t),
    };
    Ok(LaplaceAverage { value, status, t_stop })
}

// ---------------------------------------------------------------------------
// Generalized Laplace averages (second mode).
// ---------------------------------------------------------------------------

/// Second-mode Laplace average with the first-mode term subtracted:
/// the finite-horizon evaluation of
/// `(1/T) int (f(phi_t(x)) - f(x*) - f*_lambda1(x) e^(lambda_1 t)) e^(-lambda_2 t) dt`.
///
/// `first_average` is the raw (observable-units) Laplace average
/// `f*_lambda1(x)`. The result is normalized by the second Koopman mode
/// `<grad f, v2>` to estimate `s_2(x)`. Validated against closed forms on
/// linear systems only; nonlinear models are reported as experimental. A
/// residual first mode larger than `1e-3` of the subtracted term fails with
/// `SubtractionLoss`.
pub fn generalized_laplace_average(
    model: &VectorFieldModel,
    spectrum: &Spectrum,
    f: &Observable,
    x: &DVector<f64>,
    j: usize,
    first_average: Complex64,
    opts: &LaplaceOptions,
) -> Result<GeneralizedAverage, LaplaceError> {
    if j != 2 {
        return Err(LaplaceError::UnsupportedIndex { j });
    }
    let mode2 = f.check_projection(spectrum.right_vector(1))?;
    let (lambda1, lambda2) = match spectrum.stability {
        Stability::Stable => (spectrum.lambda1(), spectrum.eigenvalues()[1]),
        Stability::Unstable => (-spectrum.lambda1(), -spectrum.eigenvalues()[1]),
    };
    let horizon = opts.integration.horizon;
    let integrand = move |t: f64, state: &DVector<f64>| -> Complex64 {
        f.value(state) - first_average * (lambda1 * t).exp()
    };
    let average = windowed_average(model, spectrum, x, horizon, opts, lambda2, &integrand)?;

    // Re-project the subtracted integrand at lambda_1: the tail-window mean
    // estimates the residual first mode directly. The reprojection needs a
    // horizon long enough for the second mode to leave its window, which is
    // longer than the (deliberately short) second-mode horizon.
    let gap = (lambda1.re - lambda2.re).abs().max(1e-6);
    let residual_opts = {
        let mut o = opts.clone();
        o.integration.horizon = horizon.max(24.0 / gap);
        o
    };
    let residual_run = windowed_average(
        model,
        spectrum,
        x,
        residual_opts.integration.horizon,
        &residual_opts,
        lambda1,
        &integrand,
    )?;
    let residual = residual_run.value.norm();
    let scale = first_average.norm();
    if scale > 1e-12 * average.value.norm().max(1.0)
        && residual > SUBTRACTION_LOSS_REL * scale
    {
        return Err(LaplaceError::SubtractionLoss { residual, scale });
    }
    Ok(GeneralizedAverage {
        value: average.value / mode2,
        status: average.status,
        experimental: model.name() != "linear",
    })
}
