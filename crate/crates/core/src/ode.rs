//! Fixed-step classical Runge–Kutta and cubic Hermite resampling.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Uniform time grid `t_k = k·h`, `k = 0..=steps`, covering `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// Builds a grid whose step is the largest value `≤ step` that divides the
    /// horizon evenly.
    pub fn new(horizon: f64, step: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Configuration(format!("horizon must be positive, got {horizon}")));
        }
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::Configuration(format!("step must be positive, got {step}")));
        }
        let steps = ((horizon / step) - 1e-9).ceil().max(1.0) as usize;
        Ok(Self { horizon, steps })
    }

    pub fn with_steps(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Configuration("grid needs at least one step".into()));
        }
        Self::new(horizon, horizon / steps as f64)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.step()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }
}

/// One classical RK4 step. `k1` is the derivative at `(t, y)` when the caller
/// already has it.
pub fn rk4_step<F>(rhs: &mut F, t: f64, y: &DVector<f64>, k1: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let half = 0.5 * h;
    let k2 = rhs(t + half, &(y + k1 * half))?;
    let k3 = rhs(t + half, &(y + &k2 * half))?;
    let k4 = rhs(t + h, &(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Integrates `ẏ = rhs(t, y)` over the grid and returns the states together with
/// the derivative evaluated at every node.
pub fn integrate<F>(grid: &TimeGrid, y0: &DVector<f64>, mut rhs: F) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let h = grid.step();
    let mut states = Vec::with_capacity(grid.len());
    let mut derivs = Vec::with_capacity(grid.len());
    let mut y = y0.clone();
    for k in 0..grid.len() {
        let t = grid.time(k);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t });
        }
        let dy = rhs(t, &y)?;
        if k + 1 < grid.len() {
            let next = rk4_step(&mut rhs, t, &y, &dy, h)?;
            states.push(std::mem::replace(&mut y, next));
        } else {
            states.push(y.clone());
        }
        derivs.push(dy);
    }
    Ok((states, derivs))
}

/// Grid samples of a smooth trajectory with their time derivatives; evaluates
/// between nodes by cubic Hermite interpolation (fourth-order accurate).
#[derive(Debug, Clone)]
pub struct HermiteTrack {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
    derivs: Vec<DVector<f64>>,
}

impl HermiteTrack {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>, derivs: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() || times.len() != derivs.len() {
            return Err(Error::dims("hermite track", times.len(), values.len().min(derivs.len())));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Configuration("track times must be increasing".into()));
        }
        Ok(Self { times, values, derivs })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Value at `t`; clamps to the end points outside the covered interval.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.values[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1].clone();
        }
        let k = self.times.partition_point(|&tk| tk <= t) - 1;
        if self.times[k] == t {
            return self.values[k].clone();
        }
        let h = self.times[k + 1] - self.times[k];
        let s = (t - self.times[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        &self.values[k] * h00
            + &self.derivs[k] * (h10 * h)
            + &self.values[k + 1] * h01
            + &self.derivs[k + 1] * (h11 * h)
    }
}

/// Piecewise-linear interpolation of grid samples.
#[derive(Debug, Clone)]
pub struct LinearTrack {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl LinearTrack {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::dims("linear track", times.len(), values.len()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Configuration("track times must be increasing".into()));
        }
        Ok(Self { times, values })
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.values[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1].clone();
        }
        let k = self.times.partition_point(|&tk| tk <= t) - 1;
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        &self.values[k] * (1.0 - w) + &self.values[k + 1] * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_horizon_exactly() {
        let g = TimeGrid::new(1.0, 0.3).unwrap();
        assert_eq!(g.steps(), 4);
        assert_eq!(g.time(g.steps()), 1.0);
        assert!(g.step() <= 0.3);
        let g = TimeGrid::new(1.0, 0.25).unwrap();
        assert_eq!(g.steps(), 4);
        assert!(TimeGrid::new(1.0, 0.0).is_err());
        assert!(TimeGrid::new(-1.0, 0.1).is_err());
    }

    #[test]
    fn rk4_exponential_decay() {
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let (xs, _) = integrate(&grid, &DVector::from_element(1, 1.0), |_, y| Ok(-y)).unwrap();
        let last = xs.last().unwrap()[0];
        assert!((last - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |steps: usize| {
            let grid = TimeGrid::with_steps(2.0, steps).unwrap();
            let (xs, _) = integrate(&grid, &DVector::from_element(1, 1.0), |t, y| Ok(y * t.cos())).unwrap();
            (xs.last().unwrap()[0] - 2.0f64.sin().exp()).abs()
        };
        let ratio = err(20) / err(40);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn hermite_reproduces_cubics() {
        let f = |t: f64| t * t * t - 2.0 * t + 1.0;
        let df = |t: f64| 3.0 * t * t - 2.0;
        let times = vec![0.0, 0.5, 1.5];
        let v = times.iter().map(|&t| DVector::from_element(1, f(t))).collect();
        let d = times.iter().map(|&t| DVector::from_element(1, df(t))).collect();
        let track = HermiteTrack::new(times, v, d).unwrap();
        for t in [0.1, 0.5, 0.77, 1.2] {
            assert!((track.at(t)[0] - f(t)).abs() < 1e-13);
        }
        assert_eq!(track.at(5.0)[0], f(1.5));
    }

    #[test]
    fn linear_track_interpolates() {
        let track = LinearTrack::new(
            vec![0.0, 1.0],
            vec![DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)],
        )
        .unwrap();
        assert_eq!(track.at(0.25)[0], 0.5);
    }
}
