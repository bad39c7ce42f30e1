//! Benchmark plants with known structure.
//!
//! | name            | plant                                   | exercises                       |
//! |-----------------|-----------------------------------------|---------------------------------|
//! | `scalar-riccati`| `ẋ = 0`, `y = x`                        | closed-form Riccati equilibrium |
//! | `ltv-linear`    | `ẋ = A(t)x`, `y = C(t)x`                | global convergence, linear case |
//! | `vanderpol-pos` | Van der Pol, `y = x₁`                   | linear output map               |
//! | `cubic-scalar`  | `ẋ = −x + εx³`, `y = x`                 | Hessian-sized contraction region|

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemModel;

pub const SCALAR_RICCATI: &str = "scalar-riccati";
pub const LTV_LINEAR: &str = "ltv-linear";
pub const VANDERPOL_POS: &str = "vanderpol-pos";
pub const CUBIC_SCALAR: &str = "cubic-scalar";

/// A registry name plus numeric parameters, as found in campaign files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum BenchmarkKind {
    ScalarRiccati,
    /// `A(t) = [[0, 1], [−(1 + amp·sin ωt), −0.5]]`, `C(t) = [1, 0.5·amp·cos ωt]`.
    LtvLinear { omega: f64, amp: f64 },
    VanderpolPos { mu: f64, alpha: f64 },
    /// `alpha` is the radius of the declared ball `|x| ≤ α` for the analytic κ_A.
    CubicScalar { eps: f64, alpha: f64 },
}

impl BenchmarkKind {
    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkKind::ScalarRiccati => SCALAR_RICCATI,
            BenchmarkKind::LtvLinear { .. } => LTV_LINEAR,
            BenchmarkKind::VanderpolPos { .. } => VANDERPOL_POS,
            BenchmarkKind::CubicScalar { .. } => CUBIC_SCALAR,
        }
    }

    pub fn from_spec(spec: &SystemSpec) -> Result<Self> {
        let allowed: &[(&str, f64)] = match spec.name.as_str() {
            SCALAR_RICCATI => &[],
            LTV_LINEAR => &[("omega", 1.0), ("amp", 0.5)],
            VANDERPOL_POS => &[("mu", 0.5), ("alpha", 1.0)],
            CUBIC_SCALAR => &[("eps", 0.1), ("alpha", 1.0)],
            other => return Err(Error::Configuration(format!("unknown system {other:?}"))),
        };
        for key in spec.params.keys() {
            if !allowed.iter().any(|(k, _)| k == key) {
                return Err(Error::Configuration(format!("system {} has no parameter {key:?}", spec.name)));
            }
        }
        let get = |key: &str| -> Result<f64> {
            let default = allowed.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).unwrap_or(0.0);
            let v = spec.params.get(key).copied().unwrap_or(default);
            if !v.is_finite() {
                return Err(Error::Configuration(format!("parameter {key} must be finite")));
            }
            Ok(v)
        };
        let kind = match spec.name.as_str() {
            SCALAR_RICCATI => BenchmarkKind::ScalarRiccati,
            LTV_LINEAR => BenchmarkKind::LtvLinear { omega: get("omega")?, amp: get("amp")? },
            VANDERPOL_POS => BenchmarkKind::VanderpolPos { mu: get("mu")?, alpha: get("alpha")? },
            _ => BenchmarkKind::CubicScalar { eps: get("eps")?, alpha: get("alpha")? },
        };
        match kind {
            BenchmarkKind::VanderpolPos { alpha, .. } | BenchmarkKind::CubicScalar { alpha, .. } if alpha <= 0.0 => {
                Err(Error::Configuration("alpha must be positive".into()))
            }
            _ => Ok(kind),
        }
    }

    pub fn model(&self) -> SystemModel {
        match *self {
            BenchmarkKind::ScalarRiccati => SystemModel::new(SCALAR_RICCATI, 1, 1, |x, _| x * 0.0, |x, _| x.clone())
                .with_jacobian_a(|_, _| DMatrix::zeros(1, 1))
                .with_jacobian_c(|_, _| DMatrix::identity(1, 1)),
            BenchmarkKind::LtvLinear { omega, amp } => {
                let a = move |t: f64| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -(1.0 + amp * (omega * t).sin()), -0.5]);
                let c = move |t: f64| DMatrix::from_row_slice(1, 2, &[1.0, 0.5 * amp * (omega * t).cos()]);
                SystemModel::new(LTV_LINEAR, 2, 1, move |x, t| a(t) * x, move |x, t| c(t) * x)
                    .with_jacobian_a(move |_, t| a(t))
                    .with_jacobian_c(move |_, t| c(t))
            }
            BenchmarkKind::VanderpolPos { mu, .. } => SystemModel::new(
                VANDERPOL_POS,
                2,
                1,
                move |x, _| DVector::from_vec(vec![x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0]]),
                |x, _| DVector::from_element(1, x[0]),
            )
            .with_jacobian_a(move |x, _| {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0 * mu * x[0] * x[1] - 1.0, mu * (1.0 - x[0] * x[0])])
            })
            .with_jacobian_c(|_, _| DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            BenchmarkKind::CubicScalar { eps, .. } => SystemModel::new(
                CUBIC_SCALAR,
                1,
                1,
                move |x, _| x.map(|v| -v + eps * v * v * v),
                |x, _| x.clone(),
            )
            .with_jacobian_a(move |x, _| DMatrix::from_element(1, 1, -1.0 + 3.0 * eps * x[0] * x[0]))
            .with_jacobian_c(|_, _| DMatrix::identity(1, 1)),
        }
    }

    /// Closed-form reference data for the given filter weights.
    pub fn analytic(&self, q: &DMatrix<f64>, r: &DMatrix<f64>) -> AnalyticData {
        match *self {
            BenchmarkKind::ScalarRiccati => {
                let (q, r) = (q[(0, 0)], r[(0, 0)]);
                let p = (q * r).sqrt();
                let k = (q / r).sqrt();
                AnalyticData {
                    equilibrium_state: Some(DVector::zeros(1)),
                    equilibrium_p: Some(DMatrix::from_element(1, 1, p)),
                    gain: Some(DMatrix::from_element(1, 1, k)),
                    error_rate: Some(k),
                    kappa_a: Some(0.0),
                    kappa_c: Some(0.0),
                    alpha: Some(f64::INFINITY),
                }
            }
            BenchmarkKind::LtvLinear { .. } => AnalyticData {
                kappa_a: Some(0.0),
                kappa_c: Some(0.0),
                alpha: Some(f64::INFINITY),
                ..AnalyticData::default()
            },
            BenchmarkKind::VanderpolPos { mu, alpha } => AnalyticData {
                // max over ‖x‖ ≤ α of μ(|x₂| + √(x₂² + 4x₁²)) is 4μα/√3.
                kappa_a: Some(4.0 * mu.abs() * alpha / 3.0f64.sqrt()),
                kappa_c: Some(0.0),
                alpha: Some(alpha),
                ..AnalyticData::default()
            },
            BenchmarkKind::CubicScalar { eps, alpha } => {
                // Linearization at the origin: a = −1, c = 1.
                let (q, r) = (q[(0, 0)], r[(0, 0)]);
                let p = -r + (r * r + q * r).sqrt();
                AnalyticData {
                    equilibrium_state: Some(DVector::zeros(1)),
                    equilibrium_p: Some(DMatrix::from_element(1, 1, p)),
                    gain: Some(DMatrix::from_element(1, 1, p / r)),
                    error_rate: Some(1.0 + p / r),
                    kappa_a: Some(6.0 * eps.abs() * alpha),
                    kappa_c: Some(0.0),
                    alpha: Some(alpha),
                }
            }
        }
    }

    pub fn defaults(&self) -> BenchDefaults {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let v1 = |v: f64| DVector::from_element(1, v);
        match self {
            BenchmarkKind::ScalarRiccati => BenchDefaults {
                q: s(1.0),
                r: s(1.0),
                x0: v1(1.0),
                xhat0: v1(0.9),
                p0: s(1.0),
                horizon: 10.0,
            },
            BenchmarkKind::LtvLinear { .. } => BenchDefaults {
                q: DMatrix::identity(2, 2),
                r: s(1.0),
                x0: DVector::from_vec(vec![1.0, 0.0]),
                xhat0: DVector::zeros(2),
                p0: DMatrix::identity(2, 2),
                horizon: 30.0,
            },
            BenchmarkKind::VanderpolPos { .. } => BenchDefaults {
                q: DMatrix::identity(2, 2),
                r: s(0.1),
                x0: DVector::from_vec(vec![2.0, 0.0]),
                xhat0: DVector::from_vec(vec![1.8, 0.2]),
                p0: DMatrix::identity(2, 2),
                horizon: 20.0,
            },
            BenchmarkKind::CubicScalar { .. } => BenchDefaults {
                q: s(1.0),
                r: s(1.0),
                x0: v1(0.5),
                xhat0: v1(0.4),
                p0: s(1.0),
                horizon: 10.0,
            },
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            BenchmarkKind::ScalarRiccati => "constant scalar state observed directly; P∞ = √(qr), K∞ = √(q/r)",
            BenchmarkKind::LtvLinear { .. } => "time-varying linear oscillator; the filter converges globally",
            BenchmarkKind::VanderpolPos { .. } => "Van der Pol oscillator with position output; linear output map",
            BenchmarkKind::CubicScalar { .. } => "ẋ = −x + εx³ with κ_A = 6εα on |x| ≤ α and linear output",
        }
    }
}

/// Closed-form facts about a benchmark; absent fields are unknown.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyticData {
    /// Estimate at which `equilibrium_p` solves the algebraic Riccati equation.
    pub equilibrium_state: Option<DVector<f64>>,
    pub equilibrium_p: Option<DMatrix<f64>>,
    pub gain: Option<DMatrix<f64>>,
    /// Decay rate of the linearized estimation error at equilibrium.
    pub error_rate: Option<f64>,
    pub kappa_a: Option<f64>,
    pub kappa_c: Option<f64>,
    /// Radius of the origin-centered ball on which the κ values hold.
    pub alpha: Option<f64>,
}

/// Default filter weights, initial conditions and horizon of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchDefaults {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub xhat0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub horizon: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkEntry {
    pub name: &'static str,
    pub kind: BenchmarkKind,
    pub model: SystemModel,
    pub defaults: BenchDefaults,
    /// Reference data for the default `Q`, `R`.
    pub analytic: AnalyticData,
}

impl BenchmarkEntry {
    pub fn new(kind: BenchmarkKind) -> Self {
        let defaults = kind.defaults();
        let analytic = kind.analytic(&defaults.q, &defaults.r);
        Self { name: kind.name(), kind, model: kind.model(), defaults, analytic }
    }
}

/// All built-in benchmarks with default parameters.
pub fn registry() -> Vec<BenchmarkEntry> {
    [
        BenchmarkKind::ScalarRiccati,
        BenchmarkKind::LtvLinear { omega: 1.0, amp: 0.5 },
        BenchmarkKind::VanderpolPos { mu: 0.5, alpha: 1.0 },
        BenchmarkKind::CubicScalar { eps: 0.1, alpha: 1.0 },
    ]
    .into_iter()
    .map(BenchmarkEntry::new)
    .collect()
}

/// Looks up a benchmark by name with parameter overrides.
pub fn lookup(spec: &SystemSpec) -> Result<BenchmarkEntry> {
    Ok(BenchmarkEntry::new(BenchmarkKind::from_spec(spec)?))
}
