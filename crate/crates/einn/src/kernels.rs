//! Interaction kernels and their empirical convolution estimators.
//!
//! The Coulomb branch sums the (clamped) singular kernel directly over a
//! particle batch. The Biot-Savart branch uses the divergence-form
//! antiderivative `U` contracted against transported scores, which keeps
//! the integrand bounded and removes the singularity from the estimate.

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("kernel evaluated at the singular point x = 0")]
    Singularity,
    #[error("empty particle set")]
    EmptyParticles,
    #[error("Biot-Savart estimator requires particle scores")]
    MissingScores,
    #[error("kernel {kernel:?} incompatible with dimension {dim}")]
    WrongDimension { kernel: KernelKind, dim: usize },
    #[error("every batch particle coincides with the evaluation point")]
    DegenerateBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelKind {
    /// Gradient of the free-space Laplacian fundamental solution, `d >= 2`.
    Coulomb { d: usize },
    /// Perpendicular kernel of the 2D vorticity formulation.
    BiotSavart2D,
    /// No interaction.
    Zero,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Minimum pairwise distance for Coulomb evaluation; closer pairs are
    /// evaluated at a rescaled point of this norm and counted.
    pub clamp_eps: f64,
}

impl KernelSpec {
    pub fn coulomb(d: usize) -> Self {
        Self {
            kind: KernelKind::Coulomb { d },
            clamp_eps: 1e-4,
        }
    }

    pub fn biot_savart() -> Self {
        Self {
            kind: KernelKind::BiotSavart2D,
            clamp_eps: 1e-4,
        }
    }

    pub fn zero() -> Self {
        Self {
            kind: KernelKind::Zero,
            clamp_eps: 1e-4,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), KernelError> {
        let ok = match self.kind {
            KernelKind::Coulomb { d } => d == dim && d >= 2,
            KernelKind::BiotSavart2D => dim == 2,
            KernelKind::Zero => true,
        };
        if ok {
            Ok(())
        } else {
            Err(KernelError::WrongDimension {
                kernel: self.kind,
                dim,
            })
        }
    }

    pub fn needs_scores(&self) -> bool {
        matches!(self.kind, KernelKind::BiotSavart2D)
    }
}

/// Counts kernel clamp events; read and reset between training iterations.
#[derive(Debug, Default)]
pub struct ClampCounter(AtomicU64);

impl ClampCounter {
    pub fn new() -> Self {
        Self(AtomicU64::new(0))
    }
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
    pub fn take(&self) -> u64 {
        self.0.swap(0, Ordering::Relaxed)
    }
}

/// Surface area of the unit sphere in `R^d`.
pub fn unit_sphere_area(d: usize) -> f64 {
    assert!(d >= 2, "surface area defined here for d >= 2");
    match d {
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        _ => 2.0 * std::f64::consts::PI / (d as f64 - 2.0) * unit_sphere_area(d - 2),
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Coulomb potential `g`: fundamental solution of `-Δg = δ_0`.
pub fn coulomb_g(d: usize, x: &[f64]) -> Result<f64, KernelError> {
    let r = norm(x);
    if r == 0.0 {
        return Err(KernelError::Singularity);
    }
    if d == 2 {
        Ok(-r.ln() / (2.0 * std::f64::consts::PI))
    } else {
        Ok(r.powi(-(d as i32 - 2)) / ((d as f64 - 2.0) * unit_sphere_area(d)))
    }
}

/// Coulomb kernel `K = -∇g = x / (S_{d-1}(1) ||x||^d)`, with pairs closer
/// than `clamp_eps` evaluated at a rescaled point of that norm.
pub fn coulomb_k(
    d: usize,
    x: &[f64],
    clamp_eps: f64,
    counter: Option<&ClampCounter>,
    out: &mut [f64],
) -> Result<(), KernelError> {
    let r = norm(x);
    if r == 0.0 {
        return Err(KernelError::Singularity);
    }
    let area = unit_sphere_area(d);
    let r_eff = if r < clamp_eps {
        if let Some(c) = counter {
            c.bump();
        }
        clamp_eps
    } else {
        r
    };
    // K(r_eff * x/||x||) = (x/||x||) / (area * r_eff^(d-1))
    let scale = 1.0 / (area * r_eff.powi(d as i32 - 1) * r);
    for i in 0..d {
        out[i] = x[i] * scale;
    }
    Ok(())
}

/// Jacobian of the Coulomb kernel, `(I - d x̂x̂ᵀ) / (S_{d-1}(1) ||x||^d)`,
/// evaluated at the rescaled point for clamped pairs. Row-major `d x d`.
pub fn coulomb_grad_k(
    d: usize,
    x: &[f64],
    clamp_eps: f64,
    out: &mut [f64],
) -> Result<(), KernelError> {
    let r = norm(x);
    if r == 0.0 {
        return Err(KernelError::Singularity);
    }
    let r_eff = r.max(clamp_eps);
    let area = unit_sphere_area(d);
    let scale = 1.0 / (area * r_eff.powi(d as i32));
    for i in 0..d {
        for j in 0..d {
            let hat = x[i] * x[j] / (r * r);
            let id = if i == j { 1.0 } else { 0.0 };
            out[i * d + j] = (id - d as f64 * hat) * scale;
        }
    }
    Ok(())
}

/// Biot-Savart kernel `K(x) = (1/2π) x⊥ / ||x||²`.
pub fn biot_savart_k(x: &[f64]) -> Result<[f64; 2], KernelError> {
    let r2 = x[0] * x[0] + x[1] * x[1];
    if r2 == 0.0 {
        return Err(KernelError::Singularity);
    }
    let c = 1.0 / (2.0 * std::f64::consts::PI * r2);
    Ok([-x[1] * c, x[0] * c])
}

/// Bounded antiderivative of the Biot-Savart kernel:
/// `U = (1/2π) diag(-arctan(x1/x2), arctan(x2/x1))`, with one-sided
/// arctan limits (±π/2) on the axes. Returns the two diagonal entries.
pub fn biot_savart_u(x: &[f64]) -> Result<[f64; 2], KernelError> {
    if x[0] == 0.0 && x[1] == 0.0 {
        return Err(KernelError::Singularity);
    }
    let half = 0.5 * std::f64::consts::PI;
    let atan_ratio = |num: f64, den: f64| -> f64 {
        if den == 0.0 {
            half.copysign(num)
        } else {
            (num / den).atan()
        }
    };
    let c = 1.0 / (2.0 * std::f64::consts::PI);
    Ok([-c * atan_ratio(x[0], x[1]), c * atan_ratio(x[1], x[0])])
}

/// Monte-Carlo estimate of the convolution field `K∗ρ` at `x` from a
/// particle batch. The Biot-Savart branch contracts `U` against the
/// supplied scores; exact coincidences with `x` are skipped and the
/// normalization reduced accordingly.
pub fn conv_estimate(
    spec: &KernelSpec,
    x: &[f64],
    particles: &[f64],
    scores: Option<&[f64]>,
    counter: Option<&ClampCounter>,
    out: &mut [f64],
) -> Result<(), KernelError> {
    let d = x.len();
    spec.validate(d)?;
    let n = particles.len() / d;
    if n == 0 {
        return Err(KernelError::EmptyParticles);
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    match spec.kind {
        KernelKind::Zero => Ok(()),
        KernelKind::Coulomb { .. } => {
            let mut z = [0.0f64; 3];
            let mut k = [0.0f64; 3];
            let mut used = 0usize;
            for i in 0..n {
                let y = &particles[i * d..(i + 1) * d];
                let mut coincides = true;
                for j in 0..d {
                    z[j] = x[j] - y[j];
                    coincides &= z[j] == 0.0;
                }
                if coincides {
                    continue;
                }
                coulomb_k(d, &z[..d], spec.clamp_eps, counter, &mut k[..d])?;
                for j in 0..d {
                    out[j] += k[j];
                }
                used += 1;
            }
            if used == 0 {
                return Err(KernelError::DegenerateBatch);
            }
            let inv = 1.0 / used as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            Ok(())
        }
        KernelKind::BiotSavart2D => {
            let scores = scores.ok_or(KernelError::MissingScores)?;
            let mut used = 0usize;
            for i in 0..n {
                let y = &particles[i * 2..(i + 1) * 2];
                let z = [x[0] - y[0], x[1] - y[1]];
                if z[0] == 0.0 && z[1] == 0.0 {
                    continue;
                }
                let u = biot_savart_u(&z)?;
                out[0] += u[0] * scores[i * 2];
                out[1] += u[1] * scores[i * 2 + 1];
                used += 1;
            }
            if used == 0 {
                return Err(KernelError::DegenerateBatch);
            }
            let inv = 1.0 / used as f64;
            out[0] *= inv;
            out[1] *= inv;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn xorshift(state: &mut u64) -> f64 {
        *state ^= *state << 13;
        *state ^= *state >> 7;
        *state ^= *state << 17;
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn sphere_areas() {
        assert_relative_eq!(unit_sphere_area(2), 2.0 * PI);
        assert_relative_eq!(unit_sphere_area(3), 4.0 * PI);
        assert_relative_eq!(unit_sphere_area(4), 2.0 * PI * PI);
    }

    #[test]
    fn coulomb_potential_values() {
        assert_relative_eq!(
            coulomb_g(3, &[1.0, 0.0, 0.0]).unwrap(),
            1.0 / (4.0 * PI),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            coulomb_g(2, &[0.6, 0.8]).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            coulomb_g(3, &[0.0, 2.0, 0.0]).unwrap(),
            1.0 / (8.0 * PI),
            epsilon = 1e-15
        );
        assert_eq!(
            coulomb_g(3, &[0.0; 3]).unwrap_err(),
            KernelError::Singularity
        );
    }

    #[test]
    fn coulomb_kernel_matches_gradient_of_potential() {
        let x = [0.4, -0.7, 0.9];
        let mut k = [0.0; 3];
        coulomb_k(3, &x, 1e-4, None, &mut k).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = -(coulomb_g(3, &xp).unwrap() - coulomb_g(3, &xm).unwrap()) / (2.0 * h);
            assert_relative_eq!(k[j], fd, max_relative = 1e-7);
        }
        let mut k1 = [0.0; 3];
        coulomb_k(3, &[1.0, 0.0, 0.0], 1e-4, None, &mut k1).unwrap();
        assert_relative_eq!(k1[0], 1.0 / (4.0 * PI), epsilon = 1e-15);
        assert_relative_eq!(k1[1], 0.0);
    }

    #[test]
    fn coulomb_kernel_2d_log_gradient() {
        let mut k = [0.0; 2];
        coulomb_k(2, &[0.0, 1.0], 1e-4, None, &mut k).unwrap();
        assert_relative_eq!(k[0], 0.0);
        assert_relative_eq!(k[1], 1.0 / (2.0 * PI), epsilon = 1e-15);
    }

    #[test]
    fn kernels_are_odd() {
        let mut state = 0xabcdef12345u64;
        for _ in 0..50 {
            let x = [
                4.0 * xorshift(&mut state) - 2.0,
                4.0 * xorshift(&mut state) - 2.0,
                4.0 * xorshift(&mut state) - 2.0,
            ];
            let neg = [-x[0], -x[1], -x[2]];
            let mut kp = [0.0; 3];
            let mut kn = [0.0; 3];
            coulomb_k(3, &x, 1e-4, None, &mut kp).unwrap();
            coulomb_k(3, &neg, 1e-4, None, &mut kn).unwrap();
            for j in 0..3 {
                assert_eq!(kp[j], -kn[j]);
            }
            let bp = biot_savart_k(&x[..2]).unwrap();
            let bn = biot_savart_k(&neg[..2]).unwrap();
            assert_eq!(bp[0], -bn[0]);
            assert_eq!(bp[1], -bn[1]);
        }
    }

    #[test]
    fn biot_savart_values_and_perpendicularity() {
        let k = biot_savart_k(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(k[0], 0.0);
        assert_relative_eq!(k[1], 1.0 / (2.0 * PI), epsilon = 1e-15);
        let k2 = biot_savart_k(&[0.0, 2.0]).unwrap();
        assert_relative_eq!(k2[0], -1.0 / (4.0 * PI), epsilon = 1e-15);
        assert_relative_eq!(k2[1], 0.0);
        let mut state = 99u64;
        for _ in 0..20 {
            let x = [
                4.0 * xorshift(&mut state) - 2.0,
                4.0 * xorshift(&mut state) - 2.0,
            ];
            let k = biot_savart_k(&x).unwrap();
            assert_relative_eq!(k[0] * x[0] + k[1] * x[1], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn u_matrix_examples_and_bound() {
        let u = biot_savart_u(&[1.0, 1.0]).unwrap();
        assert_relative_eq!(u[0], -0.125, epsilon = 1e-15);
        assert_relative_eq!(u[1], 0.125, epsilon = 1e-15);
        // axis limits: arctan(±inf) = ±π/2 contributes ±1/4
        let ax = biot_savart_u(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(ax[0], -0.25, epsilon = 1e-15);
        assert_relative_eq!(ax[1], 0.0, epsilon = 1e-15);
        let mut state = 7u64;
        for _ in 0..200 {
            let x = [
                4.0 * xorshift(&mut state) - 2.0,
                4.0 * xorshift(&mut state) - 2.0,
            ];
            let u = biot_savart_u(&x).unwrap();
            assert!(u[0].abs() <= 0.25 + 1e-15);
            assert!(u[1].abs() <= 0.25 + 1e-15);
        }
    }

    #[test]
    fn u_row_divergence_recovers_kernel() {
        // finite-difference row divergence of U equals K off the axes
        let mut state = 1234567u64;
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let x = [
                4.0 * xorshift(&mut state) - 2.0,
                4.0 * xorshift(&mut state) - 2.0,
            ];
            if x[0].abs() < 1e-2 || x[1].abs() < 1e-2 {
                continue;
            }
            let k = biot_savart_k(&x).unwrap();
            // K_1 = ∂_1 U_11, K_2 = ∂_2 U_22 (off-diagonal entries are zero)
            let d1 = (biot_savart_u(&[x[0] + h, x[1]]).unwrap()[0]
                - biot_savart_u(&[x[0] - h, x[1]]).unwrap()[0])
                / (2.0 * h);
            let d2 = (biot_savart_u(&[x[0], x[1] + h]).unwrap()[1]
                - biot_savart_u(&[x[0], x[1] - h]).unwrap()[1])
                / (2.0 * h);
            assert_relative_eq!(d1, k[0], max_relative = 1e-6, epsilon = 1e-12);
            assert_relative_eq!(d2, k[1], max_relative = 1e-6, epsilon = 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn grad_k_matches_finite_differences_and_is_traceless() {
        let x = [0.5, -0.3, 0.8];
        let mut gk = [0.0; 9];
        coulomb_grad_k(3, &x, 1e-4, &mut gk).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let mut kp = [0.0; 3];
            let mut km = [0.0; 3];
            coulomb_k(3, &xp, 1e-4, None, &mut kp).unwrap();
            coulomb_k(3, &xm, 1e-4, None, &mut km).unwrap();
            for i in 0..3 {
                let fd = (kp[i] - km[i]) / (2.0 * h);
                assert_relative_eq!(gk[i * 3 + j], fd, max_relative = 1e-6, epsilon = 1e-10);
            }
        }
        let trace = gk[0] + gk[4] + gk[8];
        assert_relative_eq!(trace, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn clamp_fires_and_counts() {
        let counter = ClampCounter::new();
        let mut k = [0.0; 3];
        coulomb_k(3, &[1e-6, 0.0, 0.0], 1e-4, Some(&counter), &mut k).unwrap();
        assert_eq!(counter.count(), 1);
        // magnitude capped at the clamp radius value
        assert_relative_eq!(k[0], 1.0 / (4.0 * PI * 1e-8), max_relative = 1e-12);
        assert!(k.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn conv_estimate_zero_kernel() {
        let spec = KernelSpec::zero();
        let mut out = [1.0; 2];
        conv_estimate(&spec, &[0.3, 0.4], &[1.0, 1.0, 2.0, 2.0], None, None, &mut out).unwrap();
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn conv_estimate_single_coulomb_particle() {
        let spec = KernelSpec::coulomb(3);
        let mut out = [0.0; 3];
        conv_estimate(&spec, &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], None, None, &mut out).unwrap();
        assert_relative_eq!(out[0], 1.0 / (4.0 * PI), epsilon = 1e-15);
        assert_relative_eq!(out[1], 0.0);
        assert_relative_eq!(out[2], 0.0);
    }

    #[test]
    fn conv_estimate_skips_exact_self_interaction() {
        let spec = KernelSpec::coulomb(3);
        let x = [0.5, 0.5, 0.5];
        // batch contains x itself plus one other particle
        let particles = [0.5, 0.5, 0.5, 0.0, 0.0, 0.0];
        let mut out = [0.0; 3];
        conv_estimate(&spec, &x, &particles, None, None, &mut out).unwrap();
        let mut expect = [0.0; 3];
        conv_estimate(&spec, &x, &[0.0, 0.0, 0.0], None, None, &mut expect).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn conv_estimate_empty_batch_is_an_error() {
        let spec = KernelSpec::coulomb(3);
        let mut out = [0.0; 3];
        assert_eq!(
            conv_estimate(&spec, &[1.0, 0.0, 0.0], &[], None, None, &mut out).unwrap_err(),
            KernelError::EmptyParticles
        );
    }

    #[test]
    fn biot_savart_estimator_requires_scores_and_stays_bounded() {
        let spec = KernelSpec::biot_savart();
        let mut out = [0.0; 2];
        assert_eq!(
            conv_estimate(&spec, &[0.0, 0.0], &[1.0, 1.0], None, None, &mut out).unwrap_err(),
            KernelError::MissingScores
        );
        let mut state = 424242u64;
        for _ in 0..50 {
            let n = 16;
            let mut particles = vec![0.0; 2 * n];
            let mut scores = vec![0.0; 2 * n];
            for v in particles.iter_mut() {
                *v = 4.0 * xorshift(&mut state) - 2.0;
            }
            for v in scores.iter_mut() {
                *v = 40.0 * xorshift(&mut state) - 20.0;
            }
            let x = [4.0 * xorshift(&mut state) - 2.0, 4.0 * xorshift(&mut state) - 2.0];
            conv_estimate(&spec, &x, &particles, Some(&scores), None, &mut out).unwrap();
            let max_score = (0..n)
                .map(|i| (scores[2 * i].powi(2) + scores[2 * i + 1].powi(2)).sqrt())
                .fold(0.0f64, f64::max);
            let norm_out = (out[0] * out[0] + out[1] * out[1]).sqrt();
            assert!(
                norm_out <= 0.25 * max_score + 1e-12,
                "estimator {norm_out} exceeds U-bound {}",
                0.25 * max_score
            );
        }
    }

    #[test]
    fn biot_savart_estimator_linear_in_scores() {
        let spec = KernelSpec::biot_savart();
        let particles = [0.4, 0.6, -0.2, 0.9, 1.1, -0.5];
        let zeros = [0.0; 6];
        let mut out = [1.0; 2];
        conv_estimate(&spec, &[0.0, 0.0], &particles, Some(&zeros), None, &mut out).unwrap();
        assert_eq!(out, [0.0, 0.0]);
    }
}
