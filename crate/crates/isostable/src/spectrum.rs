//! Jacobian eigenstructure at the fixed point: sorted eigenvalues,
//! biorthogonal right/left eigenvectors, and stability classification.
//!
//! Conventions: eigenvalues are sorted slowest-first (largest real part for
//! a stable spectrum), right eigenvectors have unit norm with the
//! largest-magnitude component rotated real-positive, and left eigenvectors
//! are scaled so that `<v_j, vt_j> = vt_j^H v_j = 1`. The left vectors are
//! the gradients of the Koopman eigenfunctions at the fixed point, so the
//! linearized eigenfunction is `s_j(x) ~ vt_j^H (x - x*)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, FixedPoint, VectorFieldModel};

/// Eigenvalues closer than this (relative to the spectral radius) are
/// treated as repeated: below it, left-eigenvector conditioning destroys
/// Laplace-average accuracy.
pub const REPEATED_EIGENVALUE_TOL: f64 = 1e-8;

/// Real parts below this magnitude make the fixed point non-hyperbolic.
pub const HYPERBOLICITY_TOL: f64 = 1e-10;

const BIORTHOGONALITY_TOL: f64 = 1e-10;
const INVERSE_ITERATIONS: usize = 4;

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    /// Eigenvalue spacing below `1e-8 *` spectral radius (star/degenerate
    /// nodes are out of scope).
    #[error("repeated eigenvalue: |lambda_{i} - lambda_{j}| = {distance:.3e} below threshold {threshold:.3e}")]
    RepeatedEigenvalue { i: usize, j: usize, distance: f64, threshold: f64 },
    /// A saddle: no basin of attraction to chart.
    #[error("mixed stability (saddle): eigenvalue real parts span zero")]
    MixedStability,
    /// An eigenvalue real part is numerically zero.
    #[error("non-hyperbolic fixed point: |Re lambda_{index}| = {value:.3e} < {HYPERBOLICITY_TOL:.0e}")]
    Nonhyperbolic { index: usize, value: f64 },
    /// Eigenvector inverse iteration failed to reach its residual target.
    #[error("eigenvector computation failed for lambda_{index}")]
    EigenvectorFailure { index: usize },
    /// Operation requires a complex leading pair.
    #[error("leading eigenvalue is real; no reduced period exists")]
    RealLeadingEigenvalue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeadingClass {
    Real,
    ComplexPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    Stable,
    /// All eigenvalues in the right half plane; downstream modules integrate
    /// backward in time and use `-lambda_1`.
    Unstable,
}

/// Eigenstructure of the Jacobian at a fixed point.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub fixed_point: FixedPoint,
    eigenvalues: Vec<Complex64>,
    right: Vec<DVector<Complex64>>,
    left: Vec<DVector<Complex64>>,
    pub leading_class: LeadingClass,
    pub stability: Stability,
}

impl Spectrum {
    /// Eigendecomposition of `dF/dx` at `fp`, sorted slowest-first.
    pub fn compute(
        model: &VectorFieldModel,
        fp: &FixedPoint,
    ) -> Result<Self, SpectrumError> {
        let jac = model.jacobian_at(&fp.location_vector())?;
        Self::from_jacobian(fp.clone(), &jac)
    }

    /// Eigendecomposition of an explicit Jacobian matrix.
    pub fn from_jacobian(
        fixed_point: FixedPoint,
        jac: &DMatrix<f64>,
    ) -> Result<Self, SpectrumError> {
        let n = jac.nrows();
        assert!(jac.is_square() && n > 0);

        let mut eigenvalues: Vec<Complex64> =
            jac.clone().complex_eigenvalues().iter().copied().collect();

        let radius = eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max);
        let threshold = REPEATED_EIGENVALUE_TOL * radius.max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in (i + 1)..n {
                let distance = (eigenvalues[i] - eigenvalues[j]).norm();
                if distance < threshold {
                    return Err(SpectrumError::RepeatedEigenvalue {
                        i,
                        j,
                        distance,
                        threshold,
                    });
                }
            }
        }
        for (index, lambda) in eigenvalues.iter().enumerate() {
            if lambda.re.abs() < HYPERBOLICITY_TOL {
                return Err(SpectrumError::Nonhyperbolic {
                    index,
                    value: lambda.re.abs(),
                });
            }
        }
        let stability = if eigenvalues.iter().all(|l| l.re < 0.0) {
            Stability::Stable
        } else if eigenvalues.iter().all(|l| l.re > 0.0) {
            Stability::Unstable
        } else {
            return Err(SpectrumError::MixedStability);
        };

        // Slowest direction first: largest real part when stable, smallest
        // when unstable (the reversed-time system is then sorted as stable).
        // Within a conjugate pair the +omega member leads.
        eigenvalues.sort_by(|a, b| {
            let key = |l: &Complex64| match stability {
                Stability::Stable => (-l.re, l.im.abs(), -l.im),
                Stability::Unstable => (l.re, l.im.abs(), -l.im),
            };
            key(a).partial_cmp(&key(b)).expect("finite eigenvalues")
        });

        // Force conjugate pairs to be exactly conjugate: the Schur extraction
        // leaves last-ulp asymmetries that would leak into the pair vectors.
        for j in 0..n.saturating_sub(1) {
            let (a, b) = (eigenvalues[j], eigenvalues[j + 1]);
            if a.im > 0.0 && (a - b.conj()).norm() < threshold.max(1e-14 * radius) {
                eigenvalues[j + 1] = a.conj();
            }
        }

        let mut right: Vec<DVector<Complex64>> = Vec::with_capacity(n);
        let mut left: Vec<DVector<Complex64>> = Vec::with_capacity(n);
        let jc = jac.map(|v| Complex64::new(v, 0.0));
        let jt = jac.transpose().map(|v| Complex64::new(v, 0.0));
        let scale = radius.max(1.0);
        for j in 0..n {
            let lambda = eigenvalues[j];
            if lambda.im < 0.0 && j > 0 && eigenvalues[j - 1] == lambda.conj() {
                // Conjugate partner: mirror the vectors exactly.
                right.push(right[j - 1].map(|v| v.conj()));
                left.push(left[j - 1].map(|v| v.conj()));
                continue;
            }
            let mut v = inverse_iteration(&jc, lambda, scale)
                .ok_or(SpectrumError::EigenvectorFailure { index: j })?;
            normalize_phase(&mut v, lambda.im == 0.0);
            // Left eigenvector: J^H w = conj(lambda) w, i.e. J^T w = conj(lambda) w
            // for a real Jacobian.
            let w = inverse_iteration(&jt, lambda.conj(), scale)
                .ok_or(SpectrumError::EigenvectorFailure { index: j })?;
            // Rescale so that <v_j, vt_j> = vt_j^H v_j = 1.
            let pairing = w.dotc(&v); // w^H v
            if pairing.norm() < 1e-12 {
                return Err(SpectrumError::EigenvectorFailure { index: j });
            }
            let vt = w.map(|c| c / pairing.conj());
            right.push(v);
            left.push(vt);
        }

        let leading_class = if eigenvalues[0].im == 0.0 {
            LeadingClass::Real
        } else {
            LeadingClass::ComplexPair
        };
        let spectrum = Spectrum {
            fixed_point,
            eigenvalues,
            right,
            left,
            leading_class,
            stability,
        };
        spectrum.check_biorthogonality(jac)?;
        Ok(spectrum)
    }

    fn check_biorthogonality(&self, jac: &DMatrix<f64>) -> Result<(), SpectrumError> {
        let n = self.dim();
        let jc = jac.map(|v| Complex64::new(v, 0.0));
        let scale = self.eigenvalues.iter().map(|l| l.norm()).fold(1.0, f64::max);
        for i in 0..n {
            let residual = (&jc * &self.right[i] - &self.right[i] * self.eigenvalues[i]).norm();
            if residual > BIORTHOGONALITY_TOL * scale {
                return Err(SpectrumError::EigenvectorFailure { index: i });
            }
            for j in 0..n {
                let pairing = self.left[j].dotc(&self.right[i]).norm();
                let target = if i == j { 1.0 } else { 0.0 };
                if (pairing - target).abs() > BIORTHOGONALITY_TOL {
                    return Err(SpectrumError::EigenvectorFailure { index: i });
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }

    pub fn right_vector(&self, j: usize) -> &DVector<Complex64> {
        &self.right[j]
    }

    pub fn left_vector(&self, j: usize) -> &DVector<Complex64> {
        &self.left[j]
    }

    /// The slowest eigenvalue `lambda_1` (with `omega_1 >= 0`).
    pub fn lambda1(&self) -> Complex64 {
        self.eigenvalues[0]
    }

    pub fn sigma1(&self) -> f64 {
        self.eigenvalues[0].re
    }

    /// `omega_1 = |Im lambda_1|`; zero for a real leading eigenvalue.
    pub fn omega1(&self) -> f64 {
        self.eigenvalues[0].im.abs()
    }

    /// Decay rate of the eigenfunction magnitude along the flow as actually
    /// integrated (`sigma_1`, or `-sigma_1` under time reversal).
    pub fn effective_sigma1(&self) -> f64 {
        match self.stability {
            Stability::Stable => self.sigma1(),
            Stability::Unstable => -self.sigma1(),
        }
    }

    /// Spiral-plane axes `a = Re v_1`, `b = -Im v_1` of the leading pair.
    pub fn spiral_axes(&self) -> Result<(DVector<f64>, DVector<f64>), SpectrumError> {
        if self.leading_class != LeadingClass::ComplexPair {
            return Err(SpectrumError::RealLeadingEigenvalue);
        }
        let v1 = &self.right[0];
        Ok((v1.map(|c| c.re), v1.map(|c| -c.im)))
    }

    /// `T_1 = 2 pi / omega_1`, the period of the leading rotation.
    pub fn reduced_period(&self) -> Result<f64, SpectrumError> {
        if self.leading_class != LeadingClass::ComplexPair {
            return Err(SpectrumError::RealLeadingEigenvalue);
        }
        Ok(2.0 * std::f64::consts::PI / self.omega1())
    }

    /// Eigenfunction of the linearized dynamics, `s_j(x) = vt_j^H (x - x*)`.
    /// Exact for linear models; the local approximation otherwise.
    pub fn linear_eigenfunction(&self, j: usize, x: &DVector<f64>) -> Complex64 {
        let fp = self.fixed_point.location_vector();
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..self.dim() {
            acc += self.left[j][i].conj() * Complex64::new(x[i] - fp[i], 0.0);
        }
        acc
    }

    /// Deterministic content hash over the fixed point and eigenvalues,
    /// recorded in field metadata so outputs can be traced to a spectrum.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf29ce484222325; // FNV-1a
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for v in &self.fixed_point.location {
            eat(*v);
        }
        for l in &self.eigenvalues {
            eat(l.re);
            eat(l.im);
        }
        format!("{hash:016x}")
    }
}

/// Inverse iteration for the eigenvector of `m` at (already accurate)
/// eigenvalue `lambda`. Deterministic: fixed starting vectors, fixed
/// iteration count, tiny diagonal regularization when the shifted matrix is
/// exactly singular.
fn inverse_iteration(
    m: &DMatrix<Complex64>,
    lambda: Complex64,
    scale: f64,
) -> Option<DVector<Complex64>> {
    let n = m.nrows();
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] -= lambda;
    }
    let mut lu = shifted.clone().lu();
    // Starting vectors: a fixed ramp, then basis vectors in order.
    for start in 0..=n {
        let mut v: DVector<Complex64> = if start == 0 {
            DVector::from_fn(n, |i, _| Complex64::new(1.0 + i as f64 / n as f64, 0.0))
        } else {
            DVector::from_fn(n, |i, _| {
                Complex64::new(if i == start - 1 { 1.0 } else { 0.0 }, 0.0)
            })
        };
        v /= Complex64::new(v.norm(), 0.0);
        let mut ok = true;
        for _ in 0..INVERSE_ITERATIONS {
            let next = match lu.solve(&v) {
                Some(next) => next,
                None => {
                    // Exactly singular shift: nudge it by one part in 1e14.
                    let mut regularized = shifted.clone();
                    let nudge = Complex64::new(1e-14 * scale, 0.0);
                    for i in 0..n {
                        regularized[(i, i)] += nudge;
                    }
                    lu = regularized.lu();
                    match lu.solve(&v) {
                        Some(next) => next,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
            };
            let norm = next.norm();
            if !norm.is_finite() || norm == 0.0 {
                ok = false;
                break;
            }
            v = next / Complex64::new(norm, 0.0);
        }
        if !ok {
            continue;
        }
        let residual = (m * &v - &v * lambda).norm();
        if residual <= 1e-10 * scale {
            return Some(v);
        }
    }
    None
}

/// Rotate the largest-magnitude component real-positive (ties break to the
/// lowest index) and renormalize. For a real eigenvalue the vector is then
/// real; residual imaginary roundoff is dropped.
fn normalize_phase(v: &mut DVector<Complex64>, real_eigenvalue: bool) {
    let mut k = 0;
    for i in 1..v.len() {
        if v[i].norm() > v[k].norm() {
            k = i;
        }
    }
    let pivot = v[k];
    let rotation = pivot.conj() / pivot.norm();
    for c in v.iter_mut() {
        *c *= rotation;
    }
    v[k] = Complex64::new(pivot.norm(), 0.0);
    if real_eigenvalue {
        for c in v.iter_mut() {
            *c = Complex64::new(c.re, 0.0);
        }
    }
    let norm = v.norm();
    for c in v.iter_mut() {
        *c /= norm;
    }
}
