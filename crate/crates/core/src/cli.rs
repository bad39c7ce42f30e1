//! Batch front-end: campaign files in, CSV traces and JSON summaries out.
//!
//! Exit status is 0 when every check passes, 1 on a check failure (including
//! divergence and loss of positive definiteness) and 2 on configuration or I/O
//! errors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bench::{lookup, BenchmarkEntry, SystemSpec};
use crate::contraction::{
    check_gamma, default_gamma, empirical_radius, make_certificate, table1_compare, ContractionCertificate,
    RadiusSearch, Table1, Table1Params, Table1Row,
};
use crate::ekf::{assumption1_report, integrate_ekf, Assumption1Report, FilterConfig, FilterTrajectory, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::linalg::{matrix_from_rows, matrix_to_rows, parse_matrix, spectral_norm};
use crate::model::{estimate_hessian_bounds, HessianBounds, HessianEstimator};
use crate::sim::{envelope_check, integrate_truth, perturbed_run, twin_decay, Disturbance, TruthRun, FIT_FLOOR, FIT_SLACK};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Number formatting shared by every CSV writer: 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn non_finite_str(v: f64) -> Option<&'static str> {
    if v.is_nan() {
        Some("nan")
    } else if v == f64::INFINITY {
        Some("inf")
    } else if v == f64::NEG_INFINITY {
        Some("-inf")
    } else {
        None
    }
}

fn parse_non_finite(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => None,
    }
}

/// JSON number, or one of `"inf"`, `"-inf"`, `"nan"`.
pub fn json_num(v: f64) -> Value {
    match non_finite_str(v) {
        Some(s) => Value::String(s.into()),
        None => json!(v),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NumRepr {
    Num(f64),
    Str(String),
}

/// Serde adapter writing non-finite floats as strings.
pub mod json_f64 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        match non_finite_str(*v) {
            Some(text) => s.serialize_str(text),
            None => s.serialize_f64(*v),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match NumRepr::deserialize(d)? {
            NumRepr::Num(v) => Ok(v),
            NumRepr::Str(s) => parse_non_finite(&s).ok_or_else(|| serde::de::Error::custom(format!("bad number {s:?}"))),
        }
    }
}

/// [`json_f64`] for optional values; `None` is `null`.
pub mod json_f64_opt {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(v) => json_f64::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match Option::<NumRepr>::deserialize(d)? {
            None => Ok(None),
            Some(NumRepr::Num(v)) => Ok(Some(v)),
            Some(NumRepr::Str(s)) => parse_non_finite(&s)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom(format!("bad number {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Campaign files

/// Matrices are lists of rows.
pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xhat0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinSpec {
    /// Defaults to `x̂(0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z1: Option<Vec<f64>>,
    /// Defaults to the true `x(0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z2: Option<Vec<f64>>,
}

/// Constant additive disturbance `b` on the virtual system.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    /// Defaults to `x̂(0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsMode {
    Analytic,
    Sampled,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySpec {
    /// `analytic` uses the benchmark's closed-form bounds, `sampled` runs the
    /// estimator. Default: analytic when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsMode>,
    /// Sampling radius around the estimate path, or the ball radius of
    /// user-supplied κ values.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "json_f64_opt")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_c: Option<f64>,
    #[serde(default)]
    pub hessian: HessianEstimator,
    #[serde(default)]
    pub radius: RadiusSearch,
    /// Grid times at which the empirical radius is evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_samples: Option<usize>,
}

/// Explicit Table 1 inputs; any missing field is taken from the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub filter: FilterSpec,
    /// True initial state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub twin: TwinSpec,
    #[serde(default)]
    pub perturb: PerturbSpec,
    #[serde(default)]
    pub certify: CertifySpec,
    #[serde(default)]
    pub compare: CompareSpec,
}

impl CampaignConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Configuration(format!("invalid campaign file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("campaign config serializes")
    }

    /// Fills benchmark defaults and validates everything that can be checked
    /// before integration.
    pub fn resolve(&self) -> Result<Campaign> {
        let bench = lookup(&self.system)?;
        let d = &bench.defaults;
        let mut cfg = self.clone();
        let f = &mut cfg.filter;
        let q = matrix_or(&mut f.q, &d.q)?;
        let r = matrix_or(&mut f.r, &d.r)?;
        let p0 = matrix_or(&mut f.p0, &d.p0)?;
        let xhat0 = vector_or(&mut f.xhat0, &d.xhat0);
        let x0 = vector_or(&mut cfg.x0, &d.x0);
        let horizon = *cfg.horizon.get_or_insert(d.horizon);
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Configuration(format!("horizon must be positive, got {horizon}")));
        }
        let f = &mut cfg.filter;
        let step = *f.step.get_or_insert(horizon / DEFAULT_STEPS as f64);
        let mut filter = FilterConfig::new(q, r, xhat0, p0).with_step(step);
        if let Some(n) = &f.n {
            filter = filter.with_inflation(matrix_from_rows(n)?);
        }
        if let Some(beta) = f.beta {
            filter = filter.with_beta(beta);
        }
        let n = bench.model.state_dim();
        let filter = filter.validated(n, bench.model.output_dim())?;
        if filter.xhat0.len() != n || x0.len() != n {
            return Err(Error::Configuration(format!("initial states must have length {n}")));
        }
        if let Some(g) = cfg.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Configuration(format!("gamma must be non-negative, got {g}")));
            }
        }
        Ok(Campaign { config: cfg, bench, filter, x0, horizon })
    }
}

fn matrix_or(slot: &mut Option<Rows>, default: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    matrix_from_rows(slot.get_or_insert_with(|| matrix_to_rows(default)))
}

fn vector_or(slot: &mut Option<Vec<f64>>, default: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(slot.get_or_insert_with(|| default.iter().copied().collect()).clone())
}

/// A validated campaign. `config` is the file content with every default
/// written out; running it again reproduces the outputs.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub bench: BenchmarkEntry,
    pub filter: FilterConfig,
    pub x0: DVector<f64>,
    pub horizon: f64,
}

/// Truth and filter runs shared by every subcommand.
pub struct Baseline {
    pub truth: TruthRun,
    pub traj: FilterTrajectory,
    pub report: Assumption1Report,
    pub gamma: f64,
}

impl Campaign {
    pub fn baseline(&self) -> Result<Baseline> {
        let step = self.filter.grid(self.horizon)?.step();
        let truth = integrate_truth(&self.bench.model, &self.x0, self.horizon, step)?;
        let traj = integrate_ekf(&self.bench.model, &self.filter, &truth, self.horizon)?;
        let report = assumption1_report(&traj, &self.filter.q);
        let gamma = match self.config.gamma {
            Some(g) => {
                check_gamma(g, report.q_lo, report.p_hi)?;
                g
            }
            None => default_gamma(report.q_lo, report.p_hi),
        };
        Ok(Baseline { truth, traj, report, gamma })
    }

    /// Hessian bounds per the `certify` section.
    pub fn hessian_bounds(&self, base: &Baseline) -> Result<HessianBounds> {
        let spec = &self.config.certify;
        let analytic = &self.bench.analytic;
        if let (Some(ka), Some(kc)) = (spec.kappa_a, spec.kappa_c) {
            return HessianBounds::analytic(spec.alpha.unwrap_or(f64::INFINITY), ka, kc);
        }
        let have_analytic = analytic.kappa_a.is_some() && analytic.kappa_c.is_some();
        let mode = spec.bounds.unwrap_or(if have_analytic { BoundsMode::Analytic } else { BoundsMode::Sampled });
        match mode {
            BoundsMode::Analytic => {
                let (Some(ka), Some(kc)) = (analytic.kappa_a, analytic.kappa_c) else {
                    return Err(Error::Configuration(format!("{} has no analytic Hessian bounds", self.bench.name)));
                };
                HessianBounds::analytic(spec.alpha.or(analytic.alpha).unwrap_or(f64::INFINITY), ka, kc)
            }
            BoundsMode::Sampled => {
                let radius = spec.alpha.or(analytic.alpha).filter(|a| a.is_finite()).ok_or_else(|| {
                    Error::Configuration("sampled Hessian bounds need a finite certify.alpha".into())
                })?;
                let plan = HessianEstimator { seed: self.config.seed, ..spec.hessian.clone() };
                estimate_hessian_bounds(&self.bench.model, &base.traj.center_path(), radius, &plan)
            }
        }
    }

    pub fn certificate(&self, base: &Baseline) -> Result<ContractionCertificate> {
        if !(base.report.p_lo > 0.0) {
            return Err(Error::Precondition(format!(
                "certification refused: p_lo = {} is not positive",
                base.report.p_lo
            )));
        }
        make_certificate(&base.report, &self.hessian_bounds(base)?, base.gamma)
    }
}

// ---------------------------------------------------------------------------
// Subcommands

/// Result of one subcommand: the summary and whether every check passed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub summary: Value,
}

fn summary(command: &str, campaign: &Campaign, passed: bool, mut body: serde_json::Map<String, Value>) -> Outcome {
    body.insert("command".into(), json!(command));
    body.insert("passed".into(), json!(passed));
    body.insert(
        "config".into(),
        serde_json::to_value(&campaign.config).expect("campaign config serializes"),
    );
    Outcome { passed, summary: Value::Object(body) }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("summary field serializes")
}

fn write_csv_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Configuration(format!("cannot write {}: {e}", path.display()));
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    write(&mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

fn base_fields(base: &Baseline) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("assumption1".into(), to_value(&base.report));
    m.insert("gamma".into(), json_num(base.gamma));
    m
}

pub fn cmd_simulate(campaign: &Campaign, out: &Path) -> Result<Outcome> {
    let base = campaign.baseline()?;
    write_csv_file(&out.join("simulate.csv"), |w| base.traj.write_csv(w))?;
    let last = base.traj.len() - 1;
    let e0 = (&base.traj.xhat[0] - &base.truth.states[0]).norm();
    let ef = (&base.traj.xhat[last] - &base.truth.states[last]).norm();
    let mut body = base_fields(&base);
    body.insert("initial_error".into(), json_num(e0));
    body.insert("final_error".into(), json_num(ef));
    body.insert("failure_time".into(), Value::Null);
    Ok(summary("simulate", campaign, base.report.positive, body))
}

pub fn cmd_certify(campaign: &Campaign, out: &Path) -> Result<Outcome> {
    let base = campaign.baseline()?;
    let cert = campaign.certificate(&base)?;
    let spec = &campaign.config.certify;
    let search = RadiusSearch { seed: campaign.config.seed, ..spec.radius.clone() };
    let traj = &base.traj;
    let picks = thin_indices(traj.len(), spec.time_samples.unwrap_or(20));
    let expected = cert.rho.min(search.upper);
    let slack = search.upper * 0.5f64.powi(search.iterations.min(1000) as i32) + 1e-9 * expected;
    let mut series = Vec::with_capacity(picks.len());
    let mut radius_ok = true;
    for &k in &picks {
        let r = empirical_radius(
            &campaign.bench.model,
            &traj.xhat[k],
            &traj.p[k],
            &traj.q,
            &traj.r,
            cert.gamma,
            traj.times[k],
            &search,
        )?;
        radius_ok &= r + slack >= expected;
        series.push((traj.times[k], r));
    }
    write_csv_file(&out.join("certify_radius.csv"), |w| {
        writeln!(w, "t,empirical_radius,rho")?;
        for (t, r) in &series {
            writeln!(w, "{},{},{}", fmt_num(*t), fmt_num(*r), fmt_num(cert.rho))?;
        }
        Ok(())
    })?;
    let mut body = base_fields(&base);
    body.insert("certificate".into(), to_value(&cert));
    body.insert("empirical_radius_min".into(), json_num(series.iter().map(|s| s.1).fold(f64::INFINITY, f64::min)));
    body.insert("empirical_radius_covers_rho".into(), json!(radius_ok));
    Ok(summary("certify", campaign, base.report.positive && radius_ok, body))
}

fn thin_indices(len: usize, samples: usize) -> Vec<usize> {
    if samples == 0 || len <= samples {
        return (0..len).collect();
    }
    if samples == 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..samples).map(|i| i * (len - 1) / (samples - 1)).collect();
    idx.dedup();
    idx
}

/// Table 1 inputs: explicit `compare` values, else values measured on the run.
pub fn compare_params(campaign: &Campaign, base: &Baseline) -> Result<Table1Params> {
    let spec = &campaign.config.compare;
    let need_kappa = spec.kappa_a.is_none() || spec.kappa_c.is_none();
    let bounds = if need_kappa { Some(campaign.hessian_bounds(base)?) } else { None };
    let c_hi = match spec.c_hi {
        Some(c) => Some(c),
        None => {
            let mut c_hi = 0.0f64;
            for (x, t) in base.traj.center_path() {
                c_hi = c_hi.max(spectral_norm(&campaign.bench.model.jacobian_c(&x, t)?));
            }
            Some(c_hi)
        }
    };
    Ok(Table1Params {
        p_lo: spec.p_lo.unwrap_or(base.report.p_lo),
        p_hi: spec.p_hi.unwrap_or(base.report.p_hi),
        q_lo: spec.q_lo.unwrap_or(base.report.q_lo),
        r_lo: spec.r_lo.unwrap_or(base.report.r_lo),
        c_hi,
        kappa_a: spec.kappa_a.or(bounds.map(|b| b.kappa_a)).unwrap_or(0.0),
        kappa_c: spec.kappa_c.or(bounds.map(|b| b.kappa_c)).unwrap_or(0.0),
    })
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => "unavailable".into(),
        Some(v) => match non_finite_str(v) {
            Some(s) => s.into(),
            None => format!("{v:.6e}"),
        },
    }
}

/// Aligned plain-text rendering of a comparison table.
pub fn render_table(table: &Table1) -> String {
    let header = ["", "rate", "basin (kappa_C = 0)", "basin (kappa_A = 0)"];
    let rows: Vec<[String; 4]> = [("lyapunov", &table.lyapunov), ("contraction", &table.contraction), ("ratio", &table.ratio)]
        .iter()
        .map(|(name, r): &(&str, &Table1Row)| {
            [name.to_string(), cell(Some(r.rate)), cell(r.basin_kappa_c_zero), cell(r.basin_kappa_a_zero)]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: [&str; 4]| {
        let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header);
    for r in &rows {
        line([&r[0], &r[1], &r[2], &r[3]]);
    }
    out
}

pub fn cmd_compare(campaign: &Campaign, out: &Path) -> Result<Outcome> {
    let base = campaign.baseline()?;
    let params = compare_params(campaign, &base)?;
    let table = table1_compare(&params);
    let text = render_table(&table);
    fs::write(out.join("compare.txt"), &text)
        .map_err(|e| Error::Configuration(format!("cannot write compare.txt: {e}")))?;
    let mut body = base_fields(&base);
    body.insert("table".into(), to_value(&table));
    Ok(summary("compare", campaign, true, body))
}

fn initial(slot: &Option<Vec<f64>>, default: &DVector<f64>) -> Result<DVector<f64>> {
    match slot {
        None => Ok(default.clone()),
        Some(v) if v.len() == default.len() => Ok(DVector::from_vec(v.clone())),
        Some(v) => Err(Error::Configuration(format!(
            "initial state has length {}, expected {}",
            v.len(),
            default.len()
        ))),
    }
}

/// Certificate when one can be built; its absence is reported, not fatal.
fn optional_certificate(campaign: &Campaign, base: &Baseline) -> (Option<ContractionCertificate>, Option<String>) {
    match campaign.certificate(base) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

pub fn cmd_twin(campaign: &Campaign, out: &Path) -> Result<Outcome> {
    let base = campaign.baseline()?;
    let spec = &campaign.config.twin;
    let z1 = initial(&spec.z1, &campaign.filter.xhat0)?;
    let z2 = initial(&spec.z2, &campaign.x0)?;
    let (cert, cert_err) = optional_certificate(campaign, &base);
    let twin = twin_decay(&campaign.bench.model, &base.traj, &base.truth, &z1, &z2, cert.as_ref())?;
    write_csv_file(&out.join("twin.csv"), |w| twin.run.write_csv(&base.traj, w))?;
    let required = 2.0 * base.gamma * (1.0 - FIT_SLACK);
    let passed = match twin.run.fitted_rate {
        Some(rate) => rate >= required,
        None => twin.run.weighted_dist.iter().all(|d| *d <= FIT_FLOOR),
    };
    let mut body = base_fields(&base);
    body.insert("fitted_rate".into(), twin.run.fitted_rate.map_or(Value::Null, json_num));
    body.insert("required_rate".into(), json_num(required));
    body.insert("inside_basin".into(), json!(twin.inside_basin));
    body.insert("certificate_error".into(), json!(cert_err));
    Ok(summary("twin", campaign, passed, body))
}

pub fn cmd_perturb(campaign: &Campaign, out: &Path) -> Result<Outcome> {
    let base = campaign.baseline()?;
    let spec = &campaign.config.perturb;
    let n = campaign.bench.model.state_dim();
    let b = initial(&spec.b, &DVector::zeros(n))?;
    let z0 = initial(&spec.z0, &campaign.filter.xhat0)?;
    let run = perturbed_run(&campaign.bench.model, &base.traj, &base.truth, &Disturbance::constant(b), &z0, base.gamma)?;
    write_csv_file(&out.join("perturb.csv"), |w| run.run.write_csv(&base.traj, w))?;
    let passed = run.within_contraction && run.disturbance_bound_ok;
    let mut body = base_fields(&base);
    body.insert("steady_radius".into(), json_num(run.steady_radius));
    body.insert("radii".into(), to_value(&run.radii));
    body.insert("within_printed".into(), json!(run.within_printed));
    body.insert("within_contraction".into(), json!(run.within_contraction));
    body.insert("disturbance_bound_ok".into(), json!(run.disturbance_bound_ok));
    Ok(summary("perturb", campaign, passed, body))
}

pub fn cmd_envelope(campaign: &Campaign, out: &Path) -> Result<Outcome> {
    let base = campaign.baseline()?;
    let cert = campaign.certificate(&base)?;
    let env = envelope_check(&base.traj, &base.truth, &cert)?;
    write_csv_file(&out.join("envelope.csv"), |w| env.run.write_csv(&base.traj, w))?;
    let mut body = base_fields(&base);
    body.insert("certificate".into(), to_value(&cert));
    body.insert("worst_margin".into(), json_num(env.worst_margin));
    body.insert("initial_inside_basin".into(), json!(env.initial_inside_basin));
    Ok(summary("envelope", campaign, env.passed, body))
}

// ---------------------------------------------------------------------------
// Argument handling

#[derive(Debug, Parser)]
#[command(name = "ekfc", version, about = "Continuous-time EKF simulation and contraction certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the truth model and the filter; report the covariance bounds.
    Simulate(RunArgs),
    /// Build a contraction certificate and the empirical radius series.
    Certify(RunArgs),
    /// Contraction versus Lyapunov rates and basins.
    Compare(RunArgs),
    /// Distance between two virtual trajectories driven by the filter gain.
    Twin(RunArgs),
    /// Virtual trajectory under a constant disturbance.
    Perturb(RunArgs),
    /// Estimation error against the exponential envelope.
    Envelope(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Certify(_) => "certify",
            Command::Compare(_) => "compare",
            Command::Twin(_) => "twin",
            Command::Perturb(_) => "perturb",
            Command::Envelope(_) => "envelope",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::Certify(a)
            | Command::Compare(a)
            | Command::Twin(a)
            | Command::Perturb(a)
            | Command::Envelope(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Campaign file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the campaign.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Inflation matrix N, whitespace-separated rows.
    #[arg(long = "inflation-n")]
    pub inflation_n: Option<PathBuf>,
}

impl RunArgs {
    /// Campaign file with command-line overrides applied.
    pub fn load(&self) -> Result<CampaignConfig> {
        let mut cfg = CampaignConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = Some(g);
        }
        if let Some(b) = self.beta {
            cfg.filter.beta = Some(b);
        }
        if let Some(path) = &self.inflation_n {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?;
            cfg.filter.n = Some(matrix_to_rows(&parse_matrix(&text)?));
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.display().to_string());
        }
        Ok(cfg)
    }
}

fn is_check_failure(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::Assumption1Violation { .. } | Error::EvaluationDomain { .. })
}

/// Runs one subcommand and returns the process exit status.
pub fn run(command: &Command) -> i32 {
    let name = command.name();
    let campaign = match command.args().load().and_then(|c| c.resolve()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ekfc {name}: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = PathBuf::from(campaign.config.output_dir.clone().unwrap_or_else(|| "out".into()));
    if let Err(e) = fs::create_dir_all(&out) {
        eprintln!("ekfc {name}: cannot create {}: {e}", out.display());
        return EXIT_CONFIG;
    }
    let result = match command {
        Command::Simulate(_) => cmd_simulate(&campaign, &out),
        Command::Certify(_) => cmd_certify(&campaign, &out),
        Command::Compare(_) => cmd_compare(&campaign, &out),
        Command::Twin(_) => cmd_twin(&campaign, &out),
        Command::Perturb(_) => cmd_perturb(&campaign, &out),
        Command::Envelope(_) => cmd_envelope(&campaign, &out),
    };
    let (outcome, code) = match result {
        Ok(o) => {
            let code = if o.passed { EXIT_OK } else { EXIT_CHECK_FAILED };
            (o, code)
        }
        Err(e) if is_check_failure(&e) => {
            eprintln!("ekfc {name}: {e}");
            let mut body = serde_json::Map::new();
            body.insert("error".into(), json!(e.to_string()));
            body.insert("failure_time".into(), e.failure_time().map_or(Value::Null, json_num));
            (summary(name, &campaign, false, body), EXIT_CHECK_FAILED)
        }
        Err(e) => {
            eprintln!("ekfc {name}: {e}");
            return EXIT_CONFIG;
        }
    };
    let path = out.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    if let Err(e) = fs::write(&path, text + "\n") {
        eprintln!("ekfc {name}: cannot write {}: {e}", path.display());
        return EXIT_CONFIG;
    }
    println!("{name}: {} ({})", if outcome.passed { "pass" } else { "FAIL" }, path.display());
    code
}
