//! Contraction analysis of the virtual observer `ż = f(z,t) − K(t)(h(z,t) − y_m(t))`
//! in the metric `δzᵀP⁻¹δz`.
//!
//! Along the virtual flow, `d/dt(δzᵀP⁻¹δz) = δzᵀP⁻¹ M P⁻¹δz` with
//!
//! ```text
//! M = PÃᵀ + ÃP + PC̃ᵀR⁻¹C̃P − PCᵀR⁻¹CP − Q,   C = C(z,t)
//! ```
//!
//! so the region where `M ⪯ −2γP` contracts at rate `γ`. This module evaluates
//! `M`, searches for the radius of that region numerically, sizes it from
//! Hessian bounds in closed form, and builds the resulting certificates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ekf::{Assumption1Report, FilterTrajectory};
use crate::error::{Error, Result};
use crate::linalg::{
    is_neg_semidefinite, lambda_max, lambda_min, probe_directions, semidefinite_tolerance, spd_inverse, spectral_norm,
    symmetrize,
};
use crate::model::{tilde_matrices, BoundSource, HessianBounds, SystemModel};

/// Largest admissible rate, `q̲ / (2p̄)`.
pub fn gamma_cap(q_lo: f64, p_hi: f64) -> f64 {
    q_lo / (2.0 * p_hi)
}

/// Default rate `q̲ / (4p̄)`.
pub fn default_gamma(q_lo: f64, p_hi: f64) -> f64 {
    q_lo / (4.0 * p_hi)
}

pub(crate) fn check_gamma(gamma: f64, q_lo: f64, p_hi: f64) -> Result<()> {
    let cap = gamma_cap(q_lo, p_hi);
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Configuration(format!("gamma must be non-negative, got {gamma}")));
    }
    if gamma > cap * (1.0 + 1e-12) {
        return Err(Error::Configuration(format!(
            "gamma = {gamma} exceeds the cap q_lo/(2 p_hi) = {cap}"
        )));
    }
    Ok(())
}

pub(crate) fn contraction_matrix_inv(
    model: &SystemModel,
    z: &DVector<f64>,
    xhat: &DVector<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    let (a_tilde, c_tilde) = tilde_matrices(model, z, xhat, t)?;
    let c = model.jacobian_c(z, t)?;
    let ap = &a_tilde * p;
    let ctp = &c_tilde * p;
    let cp = &c * p;
    let m = &ap + ap.transpose() + ctp.transpose() * r_inv * &ctp - cp.transpose() * r_inv * &cp - q;
    Ok(symmetrize(&m))
}

/// The contraction matrix `M` at `(z, x̂, P, t)`.
pub fn contraction_matrix(
    model: &SystemModel,
    z: &DVector<f64>,
    xhat: &DVector<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    let r_inv = spd_inverse(r, "R")?;
    contraction_matrix_inv(model, z, xhat, p, q, &r_inv, t)
}

/// `λ_max(M + 2γP) ≤ tol`, i.e. `M ⪯ −2γP`.
#[allow(clippy::too_many_arguments)]
pub fn check_lemma1(
    model: &SystemModel,
    z: &DVector<f64>,
    xhat: &DVector<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
    t: f64,
) -> Result<bool> {
    if !(gamma >= 0.0) {
        return Err(Error::Precondition(format!("gamma must be non-negative, got {gamma}")));
    }
    let m = contraction_matrix(model, z, xhat, p, q, r, t)?;
    Ok(is_neg_semidefinite(&(m + p * (2.0 * gamma))))
}

#[allow(clippy::too_many_arguments)]
fn lemma1_holds_inv(
    model: &SystemModel,
    z: &DVector<f64>,
    xhat: &DVector<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    gamma: f64,
    t: f64,
) -> Result<bool> {
    let m = contraction_matrix_inv(model, z, xhat, p, q, r_inv, t)?;
    Ok(is_neg_semidefinite(&(m + p * (2.0 * gamma))))
}

/// Settings for [`empirical_radius`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadiusSearch {
    /// Search ceiling; returned as-is when the inequality holds there.
    pub upper: f64,
    pub iterations: usize,
    /// Random unit directions on top of the `±` coordinate axes.
    pub direction_samples: usize,
    pub seed: u64,
}

impl Default for RadiusSearch {
    fn default() -> Self {
        Self { upper: 100.0, iterations: 60, direction_samples: 64, seed: 0 }
    }
}

/// Bisection for the largest `r` such that `M(x̂ + r·u) ⪯ −2γP` for every
/// sampled unit direction `u`.
///
/// The result over-approximates the true radius whenever the sampled
/// directions miss the worst one, and assumes the region is star-shaped around
/// `x̂` along each direction. Returns 0 when the inequality already fails at
/// `z = x̂`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_radius(
    model: &SystemModel,
    xhat: &DVector<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
    t: f64,
    search: &RadiusSearch,
) -> Result<f64> {
    if !(search.upper > 0.0 && search.upper.is_finite()) {
        return Err(Error::Configuration("radius search ceiling must be positive and finite".into()));
    }
    let r_inv = spd_inverse(r, "R")?;
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let dirs = probe_directions(&mut rng, model.state_dim(), search.direction_samples);
    let holds = |radius: f64| -> Result<bool> {
        for u in &dirs {
            let z = xhat + u * radius;
            if !lemma1_holds_inv(model, &z, xhat, p, q, &r_inv, gamma, t)? {
                return Ok(false);
            }
        }
        Ok(true)
    };
    if !lemma1_holds_inv(model, xhat, xhat, p, q, &r_inv, gamma, t)? {
        return Ok(0.0);
    }
    // Evaluation failures far from x̂ (e.g. overflow) count as "does not hold".
    let safe = |radius: f64| holds(radius).unwrap_or(false);
    if safe(search.upper) {
        return Ok(search.upper);
    }
    let (mut lo, mut hi) = (0.0, search.upper);
    for _ in 0..search.iterations {
        let mid = 0.5 * (lo + hi);
        if safe(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Positive root `ζ⁺` of `(p̄²/r̲)κ_C²ζ² + 2p̄κ_Aζ − (q̲ − 2γp̄) = 0`.
///
/// Falls back to the linear root when `κ_C = 0` and returns `+∞` when both
/// bounds vanish.
pub fn zeta_plus(kappa_a: f64, kappa_c: f64, p_hi: f64, q_lo: f64, r_lo: f64, gamma: f64) -> Result<f64> {
    if !(p_hi > 0.0 && q_lo > 0.0 && r_lo > 0.0) {
        return Err(Error::Configuration("p_hi, q_lo and r_lo must be positive".into()));
    }
    if !(kappa_a >= 0.0 && kappa_c >= 0.0) {
        return Err(Error::Configuration("kappa bounds must be non-negative".into()));
    }
    check_gamma(gamma, q_lo, p_hi)?;
    let quad = p_hi * p_hi * kappa_c * kappa_c / r_lo;
    let lin = 2.0 * p_hi * kappa_a;
    let slack = (q_lo - 2.0 * gamma * p_hi).max(0.0);
    if quad == 0.0 && lin == 0.0 {
        return Ok(f64::INFINITY);
    }
    if quad == 0.0 {
        return Ok(slack / lin);
    }
    // 2c / (b + √(b² + 4ac)) avoids cancellation when b² ≫ 4ac.
    Ok(2.0 * slack / (lin + (lin * lin + 4.0 * quad * slack).sqrt()))
}

/// Everything needed to state a local convergence guarantee for one filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionCertificate {
    pub gamma: f64,
    #[serde(with = "crate::cli::json_f64")]
    pub zeta_plus: f64,
    #[serde(with = "crate::cli::json_f64")]
    pub rho: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    pub q_lo: f64,
    pub r_lo: f64,
    /// Euclidean radius `ρ·√(p̲/p̄)` of certified initial errors.
    #[serde(with = "crate::cli::json_f64")]
    pub basin_euclid: f64,
    /// `√(p̄/p̲)`, the overshoot factor of the Euclidean error envelope.
    pub envelope_factor: f64,
    #[serde(with = "crate::cli::json_f64")]
    pub alpha: f64,
    pub kappa_a: f64,
    pub kappa_c: f64,
    pub kappa_source: BoundSource,
    /// `p_lo`, `p_hi` were observed on the integration grid, not proven.
    pub grid_verified: bool,
}

impl ContractionCertificate {
    /// Radius of the certified ball in the metric `P⁻¹`, `ρ/√p̄`.
    pub fn metric_radius(&self) -> f64 {
        self.rho / self.p_hi.sqrt()
    }
}

pub fn make_certificate(bounds: &Assumption1Report, hess: &HessianBounds, gamma: f64) -> Result<ContractionCertificate> {
    if !(bounds.p_lo > 0.0) {
        return Err(Error::Precondition(format!(
            "certification requires p_lo > 0 (observed {})",
            bounds.p_lo
        )));
    }
    hess.validate()?;
    check_gamma(gamma, bounds.q_lo, bounds.p_hi)?;
    let zeta = zeta_plus(hess.kappa_a, hess.kappa_c, bounds.p_hi, bounds.q_lo, bounds.r_lo, gamma)?;
    let rho = hess.alpha.min(zeta);
    Ok(ContractionCertificate {
        gamma,
        zeta_plus: zeta,
        rho,
        p_lo: bounds.p_lo,
        p_hi: bounds.p_hi,
        q_lo: bounds.q_lo,
        r_lo: bounds.r_lo,
        basin_euclid: rho * (bounds.p_lo / bounds.p_hi).sqrt(),
        envelope_factor: (bounds.p_hi / bounds.p_lo).sqrt(),
        alpha: hess.alpha,
        kappa_a: hess.kappa_a,
        kappa_c: hess.kappa_c,
        kappa_source: hess.source,
        grid_verified: bounds.grid_verified,
    })
}

/// Outcome of the linear-output sufficient condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corollary1Outcome {
    pub passed: bool,
    /// `min (q̲ − 2γp̄) − λ_max(ÃP + PÃᵀ)` over the samples.
    pub worst_margin: f64,
    pub worst_time: f64,
    pub samples: usize,
}

/// Checks `λ_max(ÃP + PÃᵀ) ≤ q̲ − 2γp̄` for every sampled state and every
/// grid time (thinned to at most `time_samples`). Requires `C̃ ≡ 0` on the
/// samples.
pub fn corollary1_check(
    model: &SystemModel,
    traj: &FilterTrajectory,
    sample_states: &[DVector<f64>],
    gamma: f64,
    time_samples: usize,
) -> Result<Corollary1Outcome> {
    if traj.is_empty() || sample_states.is_empty() {
        return Err(Error::Precondition("corollary 1 check needs samples".into()));
    }
    let q_lo = lambda_min(&traj.q);
    let rhs = q_lo - 2.0 * gamma * traj.p_max;
    let last = traj.len() - 1;
    let picks: Vec<usize> = if time_samples == 0 || traj.len() <= time_samples {
        (0..traj.len()).collect()
    } else {
        let m = time_samples.max(2);
        (0..m).map(|i| i * last / (m - 1)).collect()
    };
    let mut worst_margin = f64::INFINITY;
    let mut worst_time = traj.times[0];
    let mut count = 0;
    for &k in &picks {
        let t = traj.times[k];
        let xhat = &traj.xhat[k];
        let p = &traj.p[k];
        for z in sample_states {
            let (a_tilde, c_tilde) = tilde_matrices(model, z, xhat, t)?;
            let c_scale = 1.0 + spectral_norm(&model.jacobian_c(xhat, t)?);
            if spectral_norm(&c_tilde) > 1e-9 * c_scale {
                return Err(Error::Precondition(format!(
                    "output map is not linear: ‖C̃‖ = {:e} at t = {t}",
                    spectral_norm(&c_tilde)
                )));
            }
            let ap = &a_tilde * p;
            let s = &ap + ap.transpose();
            let margin = rhs - lambda_max(&s);
            // Matches the semidefinite tolerance used elsewhere.
            let margin = if margin < 0.0 && -margin <= semidefinite_tolerance(&s) { 0.0 } else { margin };
            if margin < worst_margin {
                worst_margin = margin;
                worst_time = t;
            }
            count += 1;
        }
    }
    Ok(Corollary1Outcome { passed: worst_margin >= 0.0, worst_margin, worst_time, samples: count })
}

/// Inputs of the rate/basin comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Params {
    pub p_lo: f64,
    pub p_hi: f64,
    pub q_lo: f64,
    pub r_lo: f64,
    /// Upper bound on `‖C(t)‖`; only the Lyapunov row uses it.
    #[serde(default)]
    pub c_hi: Option<f64>,
    pub kappa_a: f64,
    pub kappa_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub rate: f64,
    /// Euclidean basin radius in the limit `κ_C = 0`.
    #[serde(with = "crate::cli::json_f64_opt")]
    pub basin_kappa_c_zero: Option<f64>,
    /// Euclidean basin radius in the limit `κ_A = 0`; `None` when it needs a
    /// missing input.
    #[serde(with = "crate::cli::json_f64_opt")]
    pub basin_kappa_a_zero: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub params: Table1Params,
    pub lyapunov: Table1Row,
    pub contraction: Table1Row,
    /// Contraction over Lyapunov, column by column.
    pub ratio: Table1Row,
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        // inf/inf (both basins unbounded) has no meaningful ratio.
        (Some(a), Some(b)) if b != 0.0 && !(a.is_infinite() && b.is_infinite()) => Some(a / b),
        _ => None,
    }
}

/// Convergence rates and basins of the classical Lyapunov analysis next to the
/// contraction-based ones, both in the Euclidean error metric.
pub fn table1_compare(params: &Table1Params) -> Table1 {
    let Table1Params { p_lo, p_hi, q_lo, r_lo, c_hi, kappa_a, kappa_c } = *params;
    let ratio_p = p_lo / p_hi;
    let lyapunov = Table1Row {
        rate: q_lo * p_lo / (4.0 * p_hi * p_hi),
        basin_kappa_c_zero: Some(ratio_p * q_lo / (4.0 * kappa_a * p_hi)),
        basin_kappa_a_zero: c_hi.map(|c| q_lo * r_lo / (4.0 * c * kappa_c * p_hi * p_hi)),
    };
    let contraction = Table1Row {
        rate: q_lo / (4.0 * p_hi),
        basin_kappa_c_zero: Some(ratio_p.sqrt() * q_lo / (4.0 * kappa_a * p_hi)),
        basin_kappa_a_zero: Some((q_lo * p_lo * r_lo).sqrt() / (kappa_c * p_hi.powf(1.5) * std::f64::consts::SQRT_2)),
    };
    let ratio = Table1Row {
        rate: contraction.rate / lyapunov.rate,
        basin_kappa_c_zero: ratio(contraction.basin_kappa_c_zero, lyapunov.basin_kappa_c_zero),
        basin_kappa_a_zero: ratio(contraction.basin_kappa_a_zero, lyapunov.basin_kappa_a_zero),
    };
    Table1 { params: *params, lyapunov, contraction, ratio }
}

/// With the Riccati inflation `+2N`, checks that the contraction inequality
/// tightens to rate `γ + n̲/p̄`: `(M − 2N) + 2(γ + n̲/p̄)P ⪯ 0`.
///
/// Returns `false` when the precondition `M + 2γP ⪯ 0` itself fails.
pub fn inflation_rate_gain(m: &DMatrix<f64>, p: &DMatrix<f64>, n: &DMatrix<f64>, gamma: f64) -> bool {
    if !is_neg_semidefinite(&(m + p * (2.0 * gamma))) {
        return false;
    }
    let n_lo = lambda_min(n);
    let p_hi = lambda_max(p);
    let boosted = gamma + n_lo / p_hi;
    is_neg_semidefinite(&(m - n * 2.0 + p * (2.0 * boosted)))
}
