//! Trajectory experiments: the true plant, the virtual observer driven by a
//! filter's gain schedule, twin and perturbed virtual trajectories, and the
//! distance records used to check decay rates and envelopes.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cli::fmt_num;
use crate::contraction::{contraction_matrix_inv, ContractionCertificate};
use crate::ekf::{FilterTrajectory, MeasurementSignal};
use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::ode::{integrate, HermiteTrack, LinearTrack, TimeGrid};

/// Values below this are treated as numerical zero when fitting decay rates.
pub const FIT_FLOOR: f64 = 1e-12;
/// Allowed shortfall of a fitted rate relative to the certified one.
pub const FIT_SLACK: f64 = 0.1;

/// Simulated plant trajectory; doubles as the measurement source
/// `y_m(t) = h(x(t), t)`, evaluated through a fourth-order Hermite resampling
/// of `x` so that off-grid RK4 stages see consistent measurements.
#[derive(Debug, Clone)]
pub struct TruthRun {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    model: SystemModel,
    track: HermiteTrack,
}

impl TruthRun {
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        self.track.at(t)
    }

    /// Measurements on the stored grid.
    pub fn measurements(&self) -> Result<Vec<DVector<f64>>> {
        self.times.iter().zip(&self.states).map(|(t, x)| self.model.output(x, *t)).collect()
    }
}

impl MeasurementSignal for TruthRun {
    fn at(&self, t: f64) -> Result<DVector<f64>> {
        self.model.output(&self.track.at(t), t)
    }

    fn span(&self) -> (f64, f64) {
        (self.track.start(), self.track.end())
    }
}

/// RK4 trajectory of `ẋ = f(x, t)` from `x0`.
pub fn integrate_truth(model: &SystemModel, x0: &DVector<f64>, horizon: f64, step: f64) -> Result<TruthRun> {
    if x0.len() != model.state_dim() {
        return Err(Error::Configuration(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            model.state_dim()
        )));
    }
    let grid = TimeGrid::new(horizon, step)?;
    let (states, derivs) = integrate(&grid, x0, |t, x| divergence_on_domain(model.dynamics(x, t), t))?;
    let times = grid.times();
    let track = HermiteTrack::new(times.clone(), states.clone(), derivs)?;
    Ok(TruthRun { times, states, model: model.clone(), track })
}

fn divergence_on_domain<T>(r: Result<T>, t: f64) -> Result<T> {
    r.map_err(|e| match e {
        Error::EvaluationDomain { .. } => Error::Divergence { time: t },
        other => other,
    })
}

/// A time-varying observer gain `K(t)`.
pub trait GainSchedule {
    fn gain(&self, t: f64) -> Result<DMatrix<f64>>;
}

/// The gain of a stored filter run, rebuilt between nodes from the Hermite
/// resampled `x̂` and `P`.
pub struct FilterGain<'a> {
    model: &'a SystemModel,
    traj: &'a FilterTrajectory,
}

impl<'a> FilterGain<'a> {
    pub fn new(model: &'a SystemModel, traj: &'a FilterTrajectory) -> Self {
        Self { model, traj }
    }
}

impl GainSchedule for FilterGain<'_> {
    fn gain(&self, t: f64) -> Result<DMatrix<f64>> {
        self.traj.gain_at(self.model, t)
    }
}

/// Stored gains, linearly interpolated in time (second-order accurate).
pub struct SampledGain {
    rows: usize,
    cols: usize,
    track: LinearTrack,
}

impl SampledGain {
    pub fn from_trajectory(traj: &FilterTrajectory) -> Result<Self> {
        let (rows, cols) = traj.gain[0].shape();
        let values = traj.gain.iter().map(|k| DVector::from_column_slice(k.as_slice())).collect();
        Ok(Self { rows, cols, track: LinearTrack::new(traj.times.clone(), values)? })
    }
}

impl GainSchedule for SampledGain {
    fn gain(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_column_slice(self.rows, self.cols, self.track.at(t).as_slice()))
    }
}

pub struct ConstantGain(pub DMatrix<f64>);

impl GainSchedule for ConstantGain {
    fn gain(&self, _t: f64) -> Result<DMatrix<f64>> {
        Ok(self.0.clone())
    }
}

/// Additive disturbance `b(z, t)` with a claimed uniform bound `‖b‖ ≤ b_max`.
#[derive(Clone)]
pub struct Disturbance {
    field: Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>,
    pub b_max: f64,
}

impl std::fmt::Debug for Disturbance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Disturbance").field("b_max", &self.b_max).finish()
    }
}

impl Disturbance {
    pub fn new<F>(b_max: f64, field: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        Self { field: Arc::new(field), b_max }
    }

    pub fn constant(value: DVector<f64>) -> Self {
        let b_max = value.norm();
        Self::new(b_max, move |_, _| value.clone())
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(DVector::zeros(dim))
    }

    pub fn eval(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.field)(z, t)
    }
}

/// Virtual trajectory together with the largest disturbance norm it saw.
#[derive(Debug, Clone)]
pub struct VirtualTrajectory {
    pub states: Vec<DVector<f64>>,
    pub max_disturbance: f64,
}

/// RK4 trajectory of `ż = f(z,t) − K(t)(h(z,t) − y_m(t)) [+ b(z,t)]`.
pub fn integrate_virtual(
    model: &SystemModel,
    schedule: &dyn GainSchedule,
    measurements: &dyn MeasurementSignal,
    z0: &DVector<f64>,
    grid: &TimeGrid,
    disturbance: Option<&Disturbance>,
) -> Result<VirtualTrajectory> {
    if z0.len() != model.state_dim() {
        return Err(Error::Configuration(format!(
            "virtual initial state has length {}, expected {}",
            z0.len(),
            model.state_dim()
        )));
    }
    let (start, end) = measurements.span();
    if start > 0.0 || end < grid.horizon() * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!(
            "measurements cover [{start}, {end}] but the horizon is [0, {}]",
            grid.horizon()
        )));
    }
    let mut max_b = 0.0f64;
    let (states, _) = integrate(grid, z0, |t, z| {
        let k = schedule.gain(t)?;
        let innovation = divergence_on_domain(model.output(z, t), t)? - measurements.at(t)?;
        let mut dz = divergence_on_domain(model.dynamics(z, t), t)? - k * innovation;
        if let Some(b) = disturbance {
            let bz = b.eval(z, t);
            max_b = max_b.max(bz.norm());
            dz += bz;
        }
        Ok(dz)
    })?;
    Ok(VirtualTrajectory { states, max_disturbance: max_b })
}

/// `δᵀP⁻¹δ`.
pub fn weighted_sq(delta: &DVector<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Precondition("metric matrix is not positive definite".into()))?;
    Ok(delta.dot(&chol.solve(delta)))
}

/// Least-squares exponential rate of a decaying positive series.
///
/// The fit window is `[0.1·T, 0.9·T]` where `T` is the horizon, or the first
/// time the series drops below [`FIT_FLOOR`] if that comes earlier; values
/// below the floor are skipped. Returns `None` with fewer than two usable
/// points.
pub fn fit_decay_rate(times: &[f64], values: &[f64], horizon: f64) -> Option<f64> {
    let cutoff = times
        .iter()
        .zip(values)
        .find(|(_, v)| **v < FIT_FLOOR)
        .map(|(t, _)| *t)
        .unwrap_or(horizon)
        .min(horizon);
    let (lo, hi) = (0.1 * cutoff, 0.9 * cutoff);
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= lo && **t <= hi && **v >= FIT_FLOOR)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(-sxy / sxx)
}

/// Distance records of one experiment on the filter grid.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub times: Vec<f64>,
    pub truth: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub virtual_trajs: Vec<Vec<DVector<f64>>>,
    /// `δᵀP(t)⁻¹δ` for the designated pair.
    pub weighted_dist: Vec<f64>,
    /// `‖δ‖` for the designated pair.
    pub euclid_dist: Vec<f64>,
    pub margin: Option<Vec<f64>>,
    /// Exponential rate of `weighted_dist`.
    pub fitted_rate: Option<f64>,
}

impl ExperimentRun {
    fn new(traj: &FilterTrajectory, truth: &TruthRun, virtual_trajs: Vec<Vec<DVector<f64>>>, pair: impl Fn(usize) -> DVector<f64>) -> Result<Self> {
        let times = traj.times.clone();
        let mut weighted = Vec::with_capacity(times.len());
        let mut euclid = Vec::with_capacity(times.len());
        for k in 0..times.len() {
            let delta = pair(k);
            weighted.push(weighted_sq(&delta, &traj.p[k])?);
            euclid.push(delta.norm());
        }
        let truth_states: Vec<DVector<f64>> = times.iter().map(|t| truth.state_at(*t)).collect();
        let measurements = times
            .iter()
            .map(|t| truth.at(*t))
            .collect::<Result<Vec<_>>>()?;
        let fitted_rate = fit_decay_rate(&times, &weighted, traj.horizon());
        Ok(Self {
            times,
            truth: truth_states,
            measurements,
            virtual_trajs,
            weighted_dist: weighted,
            euclid_dist: euclid,
            margin: None,
            fitted_rate,
        })
    }

    /// `t`, `x̂`, upper triangle of `P`, every virtual state, `dist_w`, `dist_e`
    /// and `margin` when present.
    pub fn write_csv<W: Write>(&self, traj: &FilterTrajectory, mut w: W) -> io::Result<()> {
        let n = traj.q.nrows();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("xhat_{i}")));
        for i in 0..n {
            for j in i..n {
                header.push(format!("P_{i}{j}"));
            }
        }
        header.extend((0..n).map(|i| format!("x_{i}")));
        for (v, _) in self.virtual_trajs.iter().enumerate() {
            header.extend((0..n).map(|i| format!("z{}_{i}", v + 1)));
        }
        header.push("dist_w".into());
        header.push("dist_e".into());
        if self.margin.is_some() {
            header.push("margin".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.times.len() {
            let mut row = vec![fmt_num(self.times[k])];
            row.extend(traj.xhat[k].iter().map(|v| fmt_num(*v)));
            for i in 0..n {
                for j in i..n {
                    row.push(fmt_num(traj.p[k][(i, j)]));
                }
            }
            row.extend(self.truth[k].iter().map(|v| fmt_num(*v)));
            for z in &self.virtual_trajs {
                row.extend(z[k].iter().map(|v| fmt_num(*v)));
            }
            row.push(fmt_num(self.weighted_dist[k]));
            row.push(fmt_num(self.euclid_dist[k]));
            if let Some(m) = &self.margin {
                row.push(fmt_num(m[k]));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `(z − x̂(0))ᵀP(0)⁻¹(z − x̂(0)) ≤ ρ²/p̄`.
pub fn inside_basin(traj: &FilterTrajectory, cert: &ContractionCertificate, z0: &DVector<f64>) -> Result<bool> {
    if cert.rho.is_infinite() {
        return Ok(true);
    }
    let d = weighted_sq(&(z0 - &traj.xhat[0]), &traj.p[0])?;
    Ok(d <= cert.rho * cert.rho / cert.p_hi)
}

#[derive(Debug, Clone)]
pub struct TwinOutcome {
    pub run: ExperimentRun,
    /// Both starts inside the certified basin; `None` without a certificate.
    pub inside_basin: Option<bool>,
}

/// Two virtual trajectories under the filter's gain schedule; records their
/// weighted separation `(z₁−z₂)ᵀP⁻¹(z₁−z₂)`.
pub fn twin_decay(
    model: &SystemModel,
    traj: &FilterTrajectory,
    truth: &TruthRun,
    z1_0: &DVector<f64>,
    z2_0: &DVector<f64>,
    cert: Option<&ContractionCertificate>,
) -> Result<TwinOutcome> {
    let inside = match cert {
        Some(c) => Some(inside_basin(traj, c, z1_0)? && inside_basin(traj, c, z2_0)?),
        None => None,
    };
    let schedule = FilterGain::new(model, traj);
    let z1 = integrate_virtual(model, &schedule, truth, z1_0, traj.grid(), None)?.states;
    let z2 = integrate_virtual(model, &schedule, truth, z2_0, traj.grid(), None)?.states;
    let run = ExperimentRun::new(traj, truth, vec![z1.clone(), z2.clone()], |k| &z1[k] - &z2[k])?;
    Ok(TwinOutcome { run, inside_basin: inside })
}

#[derive(Debug, Clone)]
pub struct EnvelopeOutcome {
    pub run: ExperimentRun,
    pub worst_margin: f64,
    pub passed: bool,
    /// `‖x̂(0) − x(0)‖ ≤ basin_euclid`.
    pub initial_inside_basin: bool,
}

/// Checks `‖x̂(t) − x(t)‖ ≤ √(p̄/p̲)·‖x̂(0) − x(0)‖·e^(−γt)` on the grid.
pub fn envelope_check(traj: &FilterTrajectory, truth: &TruthRun, cert: &ContractionCertificate) -> Result<EnvelopeOutcome> {
    let e0 = (&traj.xhat[0] - truth.state_at(0.0)).norm();
    let mut run = ExperimentRun::new(traj, truth, Vec::new(), |k| &traj.xhat[k] - truth.state_at(traj.times[k]))?;
    let scale = 1.0 + run.truth.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let tol = 1e-12 * scale;
    let margin: Vec<f64> = run
        .times
        .iter()
        .zip(&run.euclid_dist)
        .map(|(t, e)| cert.envelope_factor * e0 * (-cert.gamma * t).exp() - e)
        .collect();
    let worst = margin.iter().copied().fold(f64::INFINITY, f64::min);
    run.margin = Some(margin);
    Ok(EnvelopeOutcome {
        run,
        worst_margin: worst,
        passed: worst >= -tol,
        initial_inside_basin: e0 <= cert.basin_euclid,
    })
}

/// Radii a perturbed virtual trajectory is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRadii {
    /// `√(p̄/p̲)·γ·‖b‖_max`, the form printed alongside the robustness result.
    pub printed: f64,
    /// `√(p̄/p̲)·‖b‖_max/γ`, the usual contraction robustness radius.
    pub contraction: f64,
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    pub run: ExperimentRun,
    /// `sup ‖z(t) − x̂(t)‖` over the trailing third of the horizon.
    pub steady_radius: f64,
    pub radii: PerturbationRadii,
    pub within_printed: bool,
    pub within_contraction: bool,
    /// Every evaluated `‖b‖` stayed below the declared bound.
    pub disturbance_bound_ok: bool,
}

/// Virtual trajectory with an additive disturbance, measured against `x̂`.
pub fn perturbed_run(
    model: &SystemModel,
    traj: &FilterTrajectory,
    truth: &TruthRun,
    disturbance: &Disturbance,
    z0: &DVector<f64>,
    gamma: f64,
) -> Result<PerturbOutcome> {
    if !(gamma > 0.0) {
        return Err(Error::Configuration(format!("perturbation radii need gamma > 0, got {gamma}")));
    }
    let schedule = FilterGain::new(model, traj);
    let vt = integrate_virtual(model, &schedule, truth, z0, traj.grid(), Some(disturbance))?;
    let z = vt.states;
    let run = ExperimentRun::new(traj, truth, vec![z.clone()], |k| &z[k] - &traj.xhat[k])?;
    let tail_start = 2.0 * traj.horizon() / 3.0;
    let steady = run
        .times
        .iter()
        .zip(&run.euclid_dist)
        .filter(|(t, _)| **t >= tail_start)
        .map(|(_, e)| *e)
        .fold(0.0, f64::max);
    let factor = (traj.p_max / traj.p_min).sqrt();
    let radii = PerturbationRadii {
        printed: factor * gamma * disturbance.b_max,
        contraction: factor * disturbance.b_max / gamma,
    };
    // Slack for the interpolation error between the filter and the replayed gain.
    let tol = 1e-9 * (1.0 + traj.xhat.iter().map(|x| x.norm()).fold(0.0, f64::max));
    Ok(PerturbOutcome {
        run,
        steady_radius: steady,
        radii,
        within_printed: steady <= radii.printed + tol,
        within_contraction: steady <= radii.contraction + tol,
        disturbance_bound_ok: vt.max_disturbance <= disturbance.b_max * (1.0 + 1e-12),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationalReport {
    /// `max |D − F| / max(|D|, |F|)` over interior grid points, with `D` the
    /// central difference of `δzᵀP⁻¹δz` and `F = δzᵀP⁻¹MP⁻¹δz`.
    pub max_relative_deviation: f64,
    pub samples: usize,
}

/// Propagates `δż = (A(z,t) − K(t)C(z,t))δz` along the virtual flow from `z0`
/// and compares the numerical rate of change of `δzᵀP⁻¹δz` with the
/// contraction-matrix expression at every interior grid point. Riccati
/// inflation terms of the filter run (`2N`, `2βP`) are folded into `M`.
pub fn variational_validator(
    model: &SystemModel,
    traj: &FilterTrajectory,
    truth: &TruthRun,
    z0: &DVector<f64>,
    dz0: &DVector<f64>,
) -> Result<VariationalReport> {
    let n = model.state_dim();
    if z0.len() != n || dz0.len() != n {
        return Err(Error::Configuration("variational initial states have the wrong dimension".into()));
    }
    let schedule = FilterGain::new(model, traj);
    let mut y0 = DVector::zeros(2 * n);
    y0.rows_mut(0, n).copy_from(z0);
    y0.rows_mut(n, n).copy_from(dz0);
    let (states, _) = integrate(traj.grid(), &y0, |t, y| {
        let z = y.rows(0, n).into_owned();
        let dz = y.rows(n, n).into_owned();
        let k = schedule.gain(t)?;
        let innovation = model.output(&z, t)? - truth.at(t)?;
        let zdot = model.dynamics(&z, t)? - &k * innovation;
        let jac = model.jacobian_a(&z, t)? - &k * model.jacobian_c(&z, t)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&zdot);
        out.rows_mut(n, n).copy_from(&(jac * dz));
        Ok(out)
    })?;

    let h = traj.grid().step();
    let mut values = Vec::with_capacity(states.len());
    let mut predicted = Vec::with_capacity(states.len());
    for (k, y) in states.iter().enumerate() {
        let z = y.rows(0, n).into_owned();
        let dz = y.rows(n, n).into_owned();
        let p = &traj.p[k];
        let chol = p
            .clone()
            .cholesky()
            .ok_or(Error::Assumption1Violation { time: traj.times[k] })?;
        let w = chol.solve(&dz);
        let m = contraction_matrix_inv(model, &z, &traj.xhat[k], p, &traj.q, traj.r_inverse(), traj.times[k])?
            - &traj.n * 2.0
            - p * (2.0 * traj.beta);
        values.push(dz.dot(&w));
        predicted.push(w.dot(&(m * &w)));
    }
    let mut worst = 0.0f64;
    let mut samples = 0;
    for k in 1..states.len() - 1 {
        let d = (values[k + 1] - values[k - 1]) / (2.0 * h);
        let f = predicted[k];
        let scale = d.abs().max(f.abs());
        if scale > 0.0 {
            worst = worst.max((d - f).abs() / scale);
        }
        samples += 1;
    }
    Ok(VariationalReport { max_relative_deviation: worst, samples })
}
