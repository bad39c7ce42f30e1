//! Plant models `ẋ = f(x, t)`, `y = h(x, t)` with their Jacobians and sampled
//! bounds on the second-derivative tensors.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{probe_directions, spectral_norm};

pub type VectorField = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// Central-difference step `cbrt(ε)·max(1, ‖x‖)`.
pub fn fd_step(x: &DVector<f64>) -> f64 {
    f64::EPSILON.cbrt() * x.norm().max(1.0)
}

/// Step for differencing a Jacobian that is itself a finite difference.
fn nested_fd_step(x: &DVector<f64>) -> f64 {
    f64::EPSILON.powf(0.25) * x.norm().max(1.0)
}

/// A nonlinear plant with state dimension `n` and output dimension `p`.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    state_dim: usize,
    output_dim: usize,
    dynamics: VectorField,
    output: VectorField,
    jacobian_a: Option<MatrixField>,
    jacobian_c: Option<MatrixField>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("output_dim", &self.output_dim)
            .field("analytic_a", &self.jacobian_a.is_some())
            .field("analytic_c", &self.jacobian_c.is_some())
            .finish()
    }
}

impl SystemModel {
    pub fn new<F, H>(name: impl Into<String>, state_dim: usize, output_dim: usize, dynamics: F, output: H) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
        H: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        assert!(state_dim > 0 && output_dim > 0, "model dimensions must be positive");
        Self {
            name: name.into(),
            state_dim,
            output_dim,
            dynamics: Arc::new(dynamics),
            output: Arc::new(output),
            jacobian_a: None,
            jacobian_c: None,
        }
    }

    /// Supplies `∂f/∂x` analytically.
    pub fn with_jacobian_a<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian_a = Some(Arc::new(jac));
        self
    }

    /// Supplies `∂h/∂x` analytically.
    pub fn with_jacobian_c<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian_c = Some(Arc::new(jac));
        self
    }

    /// Drops analytic Jacobians so every derivative goes through finite differences.
    pub fn finite_difference_only(mut self) -> Self {
        self.jacobian_a = None;
        self.jacobian_c = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jacobian_a.is_some() && self.jacobian_c.is_some()
    }

    fn check_state(&self, x: &DVector<f64>, t: f64) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::dims("state vector", self.state_dim, x.len()));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluationDomain { what: "state argument", time: t });
        }
        Ok(())
    }

    pub fn dynamics(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.check_state(x, t)?;
        finite_vector((self.dynamics)(x, t), self.state_dim, "dynamics f(x, t)", t)
    }

    pub fn output(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.check_state(x, t)?;
        finite_vector((self.output)(x, t), self.output_dim, "output h(x, t)", t)
    }

    /// `A(x, t) = ∂f/∂x`.
    pub fn jacobian_a(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        self.check_state(x, t)?;
        match &self.jacobian_a {
            Some(jac) => finite_matrix(jac(x, t), self.state_dim, self.state_dim, "Jacobian A", t),
            None => central_difference(self.dynamics.as_ref(), x, t, self.state_dim, "Jacobian A"),
        }
    }

    /// `C(x, t) = ∂h/∂x`.
    pub fn jacobian_c(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        self.check_state(x, t)?;
        match &self.jacobian_c {
            Some(jac) => finite_matrix(jac(x, t), self.output_dim, self.state_dim, "Jacobian C", t),
            None => central_difference(self.output.as_ref(), x, t, self.output_dim, "Jacobian C"),
        }
    }

    /// Finite-difference Jacobians regardless of analytic availability.
    pub fn fd_jacobians(&self, x: &DVector<f64>, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_state(x, t)?;
        Ok((
            central_difference(self.dynamics.as_ref(), x, t, self.state_dim, "Jacobian A")?,
            central_difference(self.output.as_ref(), x, t, self.output_dim, "Jacobian C")?,
        ))
    }

    /// Second-derivative tensor of `f` contracted with `v`: the `n×n` matrix
    /// `∂A/∂x · v`.
    pub fn dynamics_hessian_along(&self, x: &DVector<f64>, v: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let s = if self.jacobian_a.is_some() { fd_step(x) } else { nested_fd_step(x) };
        let plus = self.jacobian_a(&(x + v * s), t)?;
        let minus = self.jacobian_a(&(x - v * s), t)?;
        finite_matrix((plus - minus) / (2.0 * s), self.state_dim, self.state_dim, "Hessian of f", t)
    }

    /// Second-derivative tensor of `h` contracted with `v`: the `p×n` matrix
    /// `∂C/∂x · v`.
    pub fn output_hessian_along(&self, x: &DVector<f64>, v: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let s = if self.jacobian_c.is_some() { fd_step(x) } else { nested_fd_step(x) };
        let plus = self.jacobian_c(&(x + v * s), t)?;
        let minus = self.jacobian_c(&(x - v * s), t)?;
        finite_matrix((plus - minus) / (2.0 * s), self.output_dim, self.state_dim, "Hessian of h", t)
    }
}

fn finite_vector(v: DVector<f64>, dim: usize, what: &'static str, t: f64) -> Result<DVector<f64>> {
    if v.len() != dim {
        return Err(Error::dims(what, dim, v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::EvaluationDomain { what, time: t });
    }
    Ok(v)
}

fn finite_matrix(m: DMatrix<f64>, rows: usize, cols: usize, what: &'static str, t: f64) -> Result<DMatrix<f64>> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::dims(what, format!("{rows}x{cols}"), format!("{}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::EvaluationDomain { what, time: t });
    }
    Ok(m)
}

fn central_difference(
    g: &(dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync),
    x: &DVector<f64>,
    t: f64,
    rows: usize,
    what: &'static str,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let h = fd_step(x);
    let mut jac = DMatrix::zeros(rows, n);
    let mut probe = x.clone();
    for j in 0..n {
        probe[j] = x[j] + h;
        let plus = g(&probe, t);
        probe[j] = x[j] - h;
        let minus = g(&probe, t);
        probe[j] = x[j];
        if plus.len() != rows || minus.len() != rows {
            return Err(Error::dims(what, rows, plus.len()));
        }
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    finite_matrix(jac, rows, n, what, t)
}

/// `(A, C)` at `(x, t)`: analytic when the model provides them, otherwise
/// central differences.
pub fn eval_jacobians(model: &SystemModel, x: &DVector<f64>, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((model.jacobian_a(x, t)?, model.jacobian_c(x, t)?))
}

/// `Ã = A(z,t) − A(x̂,t)` and `C̃ = C(z,t) − C(x̂,t)`.
pub fn tilde_matrices(
    model: &SystemModel,
    z: &DVector<f64>,
    xhat: &DVector<f64>,
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (az, cz) = eval_jacobians(model, z, t)?;
    let (ax, cx) = eval_jacobians(model, xhat, t)?;
    Ok((az - ax, cz - cx))
}

/// Where a set of Hessian bounds came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSource {
    /// Supplied in closed form; valid on the whole ball.
    Analytic,
    /// Supremum over sampled points; not a certified bound.
    Sampled,
}

/// Radius `alpha` around the estimate on which the second derivatives of `f`
/// and `h` are bounded by `kappa_a` and `kappa_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianBounds {
    #[serde(with = "crate::cli::json_f64")]
    pub alpha: f64,
    pub kappa_a: f64,
    pub kappa_c: f64,
    pub source: BoundSource,
}

impl HessianBounds {
    pub fn analytic(alpha: f64, kappa_a: f64, kappa_c: f64) -> Result<Self> {
        let b = Self { alpha, kappa_a, kappa_c, source: BoundSource::Analytic };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Configuration(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.kappa_a >= 0.0 && self.kappa_a.is_finite()) || !(self.kappa_c >= 0.0 && self.kappa_c.is_finite()) {
            return Err(Error::Configuration("kappa bounds must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Sampling plan for [`estimate_hessian_bounds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HessianEstimator {
    /// Multiplier applied to the sampled suprema.
    pub safety_factor: f64,
    /// Radial levels per direction; level `k` sits at `radius·k/radial_samples`.
    pub radial_samples: usize,
    /// Random displacement directions on top of the `±` coordinate axes.
    pub direction_samples: usize,
    /// Random contraction directions used to evaluate the tensor norm.
    pub tensor_direction_samples: usize,
    /// Path points are thinned to at most this many evenly spaced centers.
    pub max_centers: usize,
    pub seed: u64,
}

impl Default for HessianEstimator {
    fn default() -> Self {
        Self {
            safety_factor: 1.1,
            radial_samples: 8,
            direction_samples: 16,
            tensor_direction_samples: 32,
            max_centers: 50,
            seed: 0,
        }
    }
}

/// Sampled induced norm `max_{‖v‖=1} ‖T[v]‖₂` of the tensor reached through `along`.
fn sampled_tensor_norm<F>(dirs: &[DVector<f64>], mut along: F) -> Result<f64>
where
    F: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let mut best = 0.0f64;
    for v in dirs {
        best = best.max(spectral_norm(&along(v)?));
    }
    Ok(best)
}

/// Estimates `κ_A`, `κ_C` on the tube of radius `radius` around `center_path`.
///
/// The result is a supremum over a finite sample inflated by
/// `safety_factor`; it is reported as [`BoundSource::Sampled`] and does not
/// certify the bound between samples. The tensor norm is the largest spectral
/// norm of `∂²g/∂x²·v` over the sampled unit `v`, which is exact for `n = 1`.
pub fn estimate_hessian_bounds(
    model: &SystemModel,
    center_path: &[(DVector<f64>, f64)],
    radius: f64,
    plan: &HessianEstimator,
) -> Result<HessianBounds> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Configuration(format!(
            "Hessian sampling radius must be positive and finite, got {radius}"
        )));
    }
    if center_path.is_empty() {
        return Err(Error::Precondition("empty center path".into()));
    }
    if !(plan.safety_factor >= 1.0) || plan.radial_samples == 0 || plan.max_centers == 0 {
        return Err(Error::Configuration("invalid Hessian estimator settings".into()));
    }
    let n = model.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let displacements = probe_directions(&mut rng, n, plan.direction_samples);
    let tensor_dirs = probe_directions(&mut rng, n, plan.tensor_direction_samples);

    let centers: Vec<&(DVector<f64>, f64)> = if center_path.len() <= plan.max_centers {
        center_path.iter().collect()
    } else {
        let last = center_path.len() - 1;
        let m = plan.max_centers.max(2);
        (0..m).map(|i| &center_path[i * last / (m - 1)]).collect()
    };

    let mut kappa_a = 0.0f64;
    let mut kappa_c = 0.0f64;
    let mut visit = |z: &DVector<f64>, t: f64| -> Result<()> {
        kappa_a = kappa_a.max(sampled_tensor_norm(&tensor_dirs, |v| model.dynamics_hessian_along(z, v, t))?);
        kappa_c = kappa_c.max(sampled_tensor_norm(&tensor_dirs, |v| model.output_hessian_along(z, v, t))?);
        Ok(())
    };
    for (center, t) in centers {
        visit(center, *t)?;
        for k in 1..=plan.radial_samples {
            let r = radius * k as f64 / plan.radial_samples as f64;
            for u in &displacements {
                visit(&(center + u * r), *t)?;
            }
        }
    }
    Ok(HessianBounds {
        alpha: radius,
        kappa_a: kappa_a * plan.safety_factor,
        kappa_c: kappa_c * plan.safety_factor,
        source: BoundSource::Sampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn scalar(f: fn(f64) -> f64) -> SystemModel {
        SystemModel::new(
            "scalar",
            1,
            1,
            move |x, _| DVector::from_element(1, f(x[0])),
            |x, _| x.clone(),
        )
    }

    #[test]
    fn square_jacobian() {
        let m = scalar(|x| x * x).with_jacobian_a(|x, _| DMatrix::from_element(1, 1, 2.0 * x[0]));
        let (a, c) = eval_jacobians(&m, &DVector::from_element(1, 1.0), 0.0).unwrap();
        assert_eq!(a[(0, 0)], 2.0);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn linear_analytic_jacobian_is_exact() {
        let mat = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.7]);
        let mm = mat.clone();
        let m = SystemModel::new("lin", 2, 1, move |x, _| &mm * x, |x, _| DVector::from_element(1, x[0]))
            .with_jacobian_a({
                let mat = mat.clone();
                move |_, _| mat.clone()
            });
        let a = m.jacobian_a(&DVector::from_vec(vec![5.0, -3.0]), 1.0).unwrap();
        assert_eq!(a, mat);
    }

    #[test]
    fn sine_fd_matches_cosine() {
        let m = scalar(f64::sin);
        let a = m.jacobian_a(&DVector::zeros(1), 0.0).unwrap();
        assert!((a[(0, 0)] - 0.0f64.cos()).abs() < 1e-8);
    }

    #[test]
    fn non_finite_dynamics_is_domain_error() {
        let m = scalar(|x| x.ln());
        let err = m.jacobian_a(&DVector::from_element(1, 0.0), 2.0).unwrap_err();
        assert!(matches!(err, Error::EvaluationDomain { time, .. } if time == 2.0));
        let err = m.dynamics(&DVector::from_element(1, -1.0), 0.0).unwrap_err();
        assert!(matches!(err, Error::EvaluationDomain { .. }));
    }

    #[test]
    fn wrong_dimension_rejected() {
        let m = scalar(f64::sin);
        assert!(matches!(m.dynamics(&DVector::zeros(2), 0.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn tilde_examples() {
        let cube = scalar(|x| x * x * x).with_jacobian_a(|x, _| DMatrix::from_element(1, 1, 3.0 * x[0] * x[0]));
        let z = DVector::from_element(1, 1.0);
        let xh = DVector::zeros(1);
        let (at, ct) = tilde_matrices(&cube, &z, &xh, 0.0).unwrap();
        assert_eq!(at[(0, 0)], 3.0);
        assert!(ct.norm() < 1e-9);
        let (at, ct) = tilde_matrices(&cube, &z, &z, 0.0).unwrap();
        assert_eq!(at.norm(), 0.0);
        assert_eq!(ct.norm(), 0.0);
    }

    #[test]
    fn analytic_jacobians_agree_with_fd_on_random_probes() {
        let m = SystemModel::new(
            "pendulum-ish",
            2,
            1,
            |x, t| DVector::from_vec(vec![x[1], -x[0].sin() - 0.2 * x[1] + t.cos()]),
            |x, _| DVector::from_element(1, x[0] * x[0] + x[1]),
        )
        .with_jacobian_a(|x, _| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -x[0].cos(), -0.2]))
        .with_jacobian_c(|x, _| DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        let mut worst_bound = f64::INFINITY;
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let t = rng.random_range(0.0..10.0);
            let (a, c) = eval_jacobians(&m, &x, t).unwrap();
            let (afd, cfd) = m.fd_jacobians(&x, t).unwrap();
            worst = worst.max((a - afd).norm()).max((c - cfd).norm());
            worst_bound = worst_bound.min(10.0 * fd_step(&x));
        }
        assert!(worst <= worst_bound, "{worst} > {worst_bound}");
    }

    #[test]
    fn linear_models_have_zero_kappa() {
        let m = SystemModel::new("lin", 1, 1, |x, _| x * -2.0, |x, _| x.clone())
            .with_jacobian_a(|_, _| DMatrix::from_element(1, 1, -2.0))
            .with_jacobian_c(|_, _| DMatrix::from_element(1, 1, 1.0));
        let path = vec![(DVector::zeros(1), 0.0), (DVector::from_element(1, 3.0), 1.0)];
        let b = estimate_hessian_bounds(&m, &path, 2.0, &HessianEstimator::default()).unwrap();
        assert_eq!(b.kappa_a, 0.0);
        assert_eq!(b.kappa_c, 0.0);
        assert_eq!(b.source, BoundSource::Sampled);
    }

    #[test]
    fn sine_kappa_matches_dense_grid_oracle() {
        // |f''| = |sin x|; the oracle maximizes it on a dense grid of [−π/2, π/2].
        let oracle = (0..=100_000)
            .map(|i| -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / 100_000.0)
            .map(|x: f64| x.sin().abs())
            .fold(0.0, f64::max);
        let m = scalar(f64::sin).with_jacobian_a(|x, _| DMatrix::from_element(1, 1, x[0].cos()));
        let plan = HessianEstimator { safety_factor: 1.0, ..Default::default() };
        let b = estimate_hessian_bounds(&m, &[(DVector::zeros(1), 0.0)], std::f64::consts::FRAC_PI_2, &plan).unwrap();
        assert!((b.kappa_a - oracle).abs() < 1e-6, "{} vs {oracle}", b.kappa_a);
        let inflated =
            estimate_hessian_bounds(&m, &[(DVector::zeros(1), 0.0)], std::f64::consts::FRAC_PI_2, &HessianEstimator::default())
                .unwrap();
        assert!((inflated.kappa_a - 1.1 * b.kappa_a).abs() < 1e-12);
    }

    #[test]
    fn fd_only_sine_kappa_close_to_one() {
        let m = scalar(f64::sin);
        let plan = HessianEstimator { safety_factor: 1.0, ..Default::default() };
        let b = estimate_hessian_bounds(&m, &[(DVector::zeros(1), 0.0)], std::f64::consts::FRAC_PI_2, &plan).unwrap();
        assert!((b.kappa_a - 1.0).abs() < 1e-5, "{}", b.kappa_a);
    }

    #[test]
    fn radius_must_be_positive() {
        let m = scalar(f64::sin);
        let path = [(DVector::zeros(1), 0.0)];
        assert!(estimate_hessian_bounds(&m, &path, 0.0, &HessianEstimator::default()).is_err());
        assert!(estimate_hessian_bounds(&m, &path, f64::INFINITY, &HessianEstimator::default()).is_err());
    }
}
