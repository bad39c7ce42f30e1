//! Continuous-time EKF: state and Riccati equations integrated together with
//! fixed-step RK4, with positive-definiteness monitoring of `P(t)`.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lambda_extrema, lambda_min, spd_inverse, symmetrize, validate_psd, validate_spd};
use crate::model::SystemModel;
use crate::ode::{rk4_step, HermiteTrack, LinearTrack, TimeGrid};

/// Default number of integration steps over the horizon.
pub const DEFAULT_STEPS: usize = 2000;

/// A measured output `y_m(t)` available on `[start, end]`.
pub trait MeasurementSignal {
    fn at(&self, t: f64) -> Result<DVector<f64>>;
    fn span(&self) -> (f64, f64);
}

/// Measurements given as samples, linearly interpolated in time.
#[derive(Debug, Clone)]
pub struct SampledSignal(LinearTrack);

impl SampledSignal {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        Ok(Self(LinearTrack::new(times, values)?))
    }
}

impl MeasurementSignal for SampledSignal {
    fn at(&self, t: f64) -> Result<DVector<f64>> {
        Ok(self.0.at(t))
    }

    fn span(&self) -> (f64, f64) {
        (self.0.start(), self.0.end())
    }
}

/// Design parameters and initial condition of the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Constant inflation `N ⪰ 0`; enters the Riccati equation as `+2N`.
    pub n: DMatrix<f64>,
    /// State-dependent inflation; enters the Riccati equation as `+2βP`.
    pub beta: f64,
    pub xhat0: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// Integration step; `None` means `horizon / DEFAULT_STEPS`.
    pub step: Option<f64>,
}

impl FilterConfig {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, xhat0: DVector<f64>, p0: DMatrix<f64>) -> Self {
        let n = DMatrix::zeros(q.nrows(), q.ncols());
        Self { q, r, n, beta: 0.0, xhat0, p0, step: None }
    }

    pub fn with_inflation(mut self, n: DMatrix<f64>) -> Self {
        self.n = n;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = Some(step);
        self
    }

    /// Checks dimensions and definiteness, returning a symmetrized copy.
    pub fn validated(&self, state_dim: usize, output_dim: usize) -> Result<Self> {
        if self.xhat0.len() != state_dim {
            return Err(Error::Configuration(format!(
                "xhat0 has length {}, expected {state_dim}",
                self.xhat0.len()
            )));
        }
        if self.xhat0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Configuration("xhat0 has non-finite entries".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Configuration(format!("beta must be non-negative, got {}", self.beta)));
        }
        if let Some(step) = self.step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::Configuration(format!("step must be positive, got {step}")));
            }
        }
        Ok(Self {
            q: validate_spd(&self.q, state_dim, "Q")?,
            r: validate_spd(&self.r, output_dim, "R")?,
            n: validate_psd(&self.n, state_dim, "N")?,
            beta: self.beta,
            xhat0: self.xhat0.clone(),
            p0: validate_spd(&self.p0, state_dim, "P0")?,
            step: self.step,
        })
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        match self.step {
            Some(step) => TimeGrid::new(horizon, step),
            None => TimeGrid::with_steps(horizon, DEFAULT_STEPS),
        }
    }
}

/// `K = P Cᵀ R⁻¹`.
pub fn kalman_gain(p: &DMatrix<f64>, c: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c.ncols() != p.nrows() || r.nrows() != c.nrows() {
        return Err(Error::dims("kalman gain", format!("C: {}x{}", r.nrows(), p.nrows()), format!("{}x{}", c.nrows(), c.ncols())));
    }
    let r_inv = spd_inverse(r, "R")?;
    Ok(gain_with_inverse(p, c, &r_inv))
}

fn gain_with_inverse(p: &DMatrix<f64>, c: &DMatrix<f64>, r_inv: &DMatrix<f64>) -> DMatrix<f64> {
    p * c.transpose() * r_inv
}

/// `Ṗ = AP + PAᵀ + Q − PCᵀR⁻¹CP + 2N`.
pub fn riccati_rhs(
    a: &DMatrix<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    n: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let dim = p.nrows();
    for (m, name) in [(a, "A"), (q, "Q"), (n, "N")] {
        if m.nrows() != dim || m.ncols() != dim {
            return Err(Error::dims("riccati_rhs", format!("{name}: {dim}x{dim}"), format!("{}x{}", m.nrows(), m.ncols())));
        }
    }
    if c.ncols() != dim || r.nrows() != c.nrows() {
        return Err(Error::dims("riccati_rhs", format!("C: {}x{dim}", r.nrows()), format!("{}x{}", c.nrows(), c.ncols())));
    }
    let r_inv = spd_inverse(r, "R")?;
    Ok(riccati_with_inverse(a, p, q, c, &r_inv, n, 0.0))
}

fn riccati_with_inverse(
    a: &DMatrix<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    n: &DMatrix<f64>,
    beta: f64,
) -> DMatrix<f64> {
    let ap = a * p;
    let cp = c * p;
    let mut rhs = &ap + ap.transpose() + q - cp.transpose() * r_inv * &cp + n * 2.0;
    if beta != 0.0 {
        rhs += p * (2.0 * beta);
    }
    symmetrize(&rhs)
}

/// Filter output on a uniform grid.
#[derive(Debug, Clone)]
pub struct FilterTrajectory {
    pub times: Vec<f64>,
    pub xhat: Vec<DVector<f64>>,
    pub p: Vec<DMatrix<f64>>,
    pub gain: Vec<DMatrix<f64>>,
    /// `λ_min(P(t_k))` and `λ_max(P(t_k))`.
    pub lambda_min: Vec<f64>,
    pub lambda_max: Vec<f64>,
    pub p_min: f64,
    pub p_max: f64,
    /// Design matrices the run used.
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub beta: f64,
    pub(crate) r_inv: DMatrix<f64>,
    xhat_track: HermiteTrack,
    p_track: HermiteTrack,
    grid: TimeGrid,
}

impl FilterTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn r_inverse(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    /// `(x̂(t), P(t))` between nodes by cubic Hermite interpolation using the
    /// filter's own derivatives.
    pub fn state_at(&self, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.q.nrows();
        let xhat = self.xhat_track.at(t);
        let p = symmetrize(&DMatrix::from_column_slice(n, n, self.p_track.at(t).as_slice()));
        (xhat, p)
    }

    /// Gain `P(t) C(x̂(t), t)ᵀ R⁻¹` at an arbitrary time.
    pub fn gain_at(&self, model: &SystemModel, t: f64) -> Result<DMatrix<f64>> {
        let (xhat, p) = self.state_at(t);
        let c = model.jacobian_c(&xhat, t)?;
        Ok(gain_with_inverse(&p, &c, &self.r_inv))
    }

    /// `(x̂, t)` pairs, the center path for Hessian-bound estimation.
    pub fn center_path(&self) -> Vec<(DVector<f64>, f64)> {
        self.xhat.iter().cloned().zip(self.times.iter().copied()).collect()
    }

    /// One row per grid time: `t`, `x̂`, upper triangle of `P`, row-major `K`,
    /// then the eigenvalue extrema of `P`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.q.nrows();
        let p_out = self.r.nrows();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("xhat_{i}")));
        for i in 0..n {
            for j in i..n {
                header.push(format!("P_{i}{j}"));
            }
        }
        for i in 0..n {
            for j in 0..p_out {
                header.push(format!("K_{i}{j}"));
            }
        }
        header.push("lambda_min".into());
        header.push("lambda_max".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![crate::cli::fmt_num(self.times[k])];
            row.extend(self.xhat[k].iter().map(|v| crate::cli::fmt_num(*v)));
            for i in 0..n {
                for j in i..n {
                    row.push(crate::cli::fmt_num(self.p[k][(i, j)]));
                }
            }
            for i in 0..n {
                for j in 0..p_out {
                    row.push(crate::cli::fmt_num(self.gain[k][(i, j)]));
                }
            }
            row.push(crate::cli::fmt_num(self.lambda_min[k]));
            row.push(crate::cli::fmt_num(self.lambda_max[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn pack(x: &DVector<f64>, p: &DMatrix<f64>) -> DVector<f64> {
    let n = x.len();
    let mut y = DVector::zeros(n + n * n);
    y.rows_mut(0, n).copy_from(x);
    y.rows_mut(n, n * n).copy_from_slice(p.as_slice());
    y
}

fn unpack(y: &DVector<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let x = y.rows(0, n).into_owned();
    let p = DMatrix::from_column_slice(n, n, y.rows(n, n * n).as_slice());
    (x, p)
}

/// Integrates the EKF over `[0, horizon]`.
///
/// `P` is symmetrized after every step and must admit a Cholesky factor; the
/// first grid time where it does not is reported as an
/// [`Error::Assumption1Violation`].
pub fn integrate_ekf(
    model: &SystemModel,
    config: &FilterConfig,
    measurements: &dyn MeasurementSignal,
    horizon: f64,
) -> Result<FilterTrajectory> {
    let n = model.state_dim();
    let cfg = config.validated(n, model.output_dim())?;
    let grid = cfg.grid(horizon)?;
    let (start, end) = measurements.span();
    if start > 0.0 || end < horizon * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!(
            "measurements cover [{start}, {end}] but the horizon is [0, {horizon}]"
        )));
    }
    let r_inv = spd_inverse(&cfg.r, "R")?;

    let mut rhs = |t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let (xhat, p) = unpack(y, n);
        let ym = measurements.at(t)?;
        let a = model.jacobian_a(&xhat, t)?;
        let c = model.jacobian_c(&xhat, t)?;
        let innovation = model.output(&xhat, t)? - ym;
        let k = gain_with_inverse(&p, &c, &r_inv);
        let xdot = model.dynamics(&xhat, t)? - k * innovation;
        let pdot = riccati_with_inverse(&a, &p, &cfg.q, &c, &r_inv, &cfg.n, cfg.beta);
        Ok(pack(&xdot, &pdot))
    };
    // Errors inside the right-hand side surface as divergence at the step start.
    let map_eval = |e: Error, t: f64| match e {
        Error::EvaluationDomain { .. } => Error::Divergence { time: t },
        other => other,
    };

    let len = grid.len();
    let mut times = Vec::with_capacity(len);
    let mut xs = Vec::with_capacity(len);
    let mut ps = Vec::with_capacity(len);
    let mut gains = Vec::with_capacity(len);
    let mut lmin = Vec::with_capacity(len);
    let mut lmax = Vec::with_capacity(len);
    let mut xdots = Vec::with_capacity(len);
    let mut pdots = Vec::with_capacity(len);

    let mut y = pack(&cfg.xhat0, &cfg.p0);
    let h = grid.step();
    for k in 0..len {
        let t = grid.time(k);
        let (xhat, p) = unpack(&y, n);
        if xhat.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t });
        }
        if p.clone().cholesky().is_none() {
            return Err(Error::Assumption1Violation { time: t });
        }
        let (lo, hi) = lambda_extrema(&p);
        let c = model.jacobian_c(&xhat, t).map_err(|e| map_eval(e, t))?;
        let dy = rhs(t, &y).map_err(|e| map_eval(e, t))?;
        let (xdot, pdot) = unpack(&dy, n);

        times.push(t);
        gains.push(gain_with_inverse(&p, &c, &r_inv));
        lmin.push(lo);
        lmax.push(hi);
        xdots.push(xdot);
        pdots.push(DVector::from_column_slice(pdot.as_slice()));
        xs.push(xhat);

        if k + 1 < len {
            let next = rk4_step(&mut rhs, t, &y, &dy, h).map_err(|e| map_eval(e, t))?;
            let (xn, pn) = unpack(&next, n);
            y = pack(&xn, &symmetrize(&pn));
        }
        ps.push(p);
    }

    let p_min = lmin.iter().copied().fold(f64::INFINITY, f64::min);
    let p_max = lmax.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let xhat_track = HermiteTrack::new(times.clone(), xs.clone(), xdots)?;
    let p_track = HermiteTrack::new(times.clone(), ps.iter().map(|p| DVector::from_column_slice(p.as_slice())).collect(), pdots)?;
    Ok(FilterTrajectory {
        times,
        xhat: xs,
        p: ps,
        gain: gains,
        lambda_min: lmin,
        lambda_max: lmax,
        p_min,
        p_max,
        q: cfg.q,
        r: cfg.r,
        n: cfg.n,
        beta: cfg.beta,
        r_inv,
        xhat_track,
        p_track,
        grid,
    })
}

/// Grid-verified bounds `p̲ I ⪯ P(t) ⪯ p̄ I` together with `q̲ = λ_min(Q)` and
/// `r̲ = λ_min(R)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Report {
    pub p_lo: f64,
    pub p_hi: f64,
    pub q_lo: f64,
    pub r_lo: f64,
    /// `p_lo > 0`.
    pub positive: bool,
    /// Bounds hold on the integration grid only.
    pub grid_verified: bool,
}

pub fn assumption1_report(traj: &FilterTrajectory, q: &DMatrix<f64>) -> Assumption1Report {
    let p_lo = traj.p_min;
    Assumption1Report {
        p_lo,
        p_hi: traj.p_max,
        q_lo: lambda_min(q),
        r_lo: lambda_min(&traj.r),
        positive: p_lo > 0.0,
        grid_verified: true,
    }
}
