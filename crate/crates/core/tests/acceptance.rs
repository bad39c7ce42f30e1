//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use ekf_contraction::bench::{lookup, BenchmarkEntry, SystemSpec, CUBIC_SCALAR, LTV_LINEAR, SCALAR_RICCATI, VANDERPOL_POS};
use ekf_contraction::contraction::{
    corollary1_check, default_gamma, empirical_radius, gamma_cap, inflation_rate_gain, make_certificate,
    table1_compare, zeta_plus, RadiusSearch, Table1Params,
};
use ekf_contraction::ekf::{assumption1_report, integrate_ekf, FilterConfig, FilterTrajectory};
use ekf_contraction::linalg::{expanded_difference_form, spd_inverse};
use ekf_contraction::model::{estimate_hessian_bounds, HessianBounds, HessianEstimator};
use ekf_contraction::sim::{
    envelope_check, integrate_truth, perturbed_run, twin_decay, variational_validator, Disturbance, TruthRun,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bench(name: &str, params: &[(&str, f64)]) -> BenchmarkEntry {
    lookup(&SystemSpec { name: name.into(), params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect() })
        .unwrap()
}

fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn v1(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn run(entry: &BenchmarkEntry, config: &FilterConfig, x0: &DVector<f64>, horizon: f64) -> (TruthRun, FilterTrajectory) {
    let step = config.grid(horizon).unwrap().step();
    let truth = integrate_truth(&entry.model, x0, horizon, step).unwrap();
    let traj = integrate_ekf(&entry.model, config, &truth, horizon).unwrap();
    (truth, traj)
}

fn default_run(entry: &BenchmarkEntry) -> (FilterConfig, TruthRun, FilterTrajectory) {
    let d = &entry.defaults;
    let config = FilterConfig::new(d.q.clone(), d.r.clone(), d.xhat0.clone(), d.p0.clone());
    let (truth, traj) = run(entry, &config, &d.x0, d.horizon);
    (config, truth, traj)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let l = random_matrix(rng, n, n);
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=5);
        let p = rng.random_range(1..=4);
        let c1 = random_matrix(&mut rng, p, n);
        let c2 = random_matrix(&mut rng, p, n);
        let r = random_spd(&mut rng, p, 0.5);
        let w = spd_inverse(&r, "R").unwrap();
        let d = &c1 - &c2;
        let lhs = d.transpose() * &w * &d;
        let rhs = expanded_difference_form(&c1, &c2, &w);
        worst = worst.max((&lhs - &rhs).norm() / lhs.norm().max(rhs.norm()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-12, format!("worst relative difference {worst:e}"))?;
    ensure(secs < 5.0, format!("took {secs:.2} s"))?;
    Ok(format!("worst relative difference {worst:.2e}, {secs:.3} s"))
}

fn variational_deviation(entry: &BenchmarkEntry, p0: f64, steps: usize) -> f64 {
    let d = &entry.defaults;
    let horizon = d.horizon;
    let config = FilterConfig::new(d.q.clone(), d.r.clone(), d.xhat0.clone(), s(p0)).with_step(horizon / steps as f64);
    let (truth, traj) = run(entry, &config, &d.x0, horizon);
    let z0 = &d.xhat0 + v1(0.05);
    variational_validator(&entry.model, &traj, &truth, &z0, &v1(0.1)).unwrap().max_relative_deviation
}

fn criterion_2() -> Check {
    let mut parts = Vec::new();
    for name in [SCALAR_RICCATI, CUBIC_SCALAR] {
        let entry = bench(name, &[]);
        // Start away from the Riccati equilibrium so P actually moves.
        let coarse = variational_deviation(&entry, 3.0, 4000);
        let fine = variational_deviation(&entry, 3.0, 8000);
        ensure(coarse <= 1e-4, format!("{name}: deviation {coarse:e} at horizon/4000"))?;
        ensure(coarse >= 3.0 * fine, format!("{name}: halving the step gave {coarse:e} -> {fine:e}"))?;
        parts.push(format!("{name} {coarse:.2e} -> {fine:.2e}"));
    }
    Ok(parts.join("; "))
}

fn criterion_3() -> Check {
    let entry = bench(LTV_LINEAR, &[]);
    let d = &entry.defaults;
    let e0 = (&d.x0 - &d.xhat0).norm();
    ensure((e0 - 1.0).abs() < 1e-15, format!("initial error {e0}"))?;
    let config = FilterConfig::new(d.q.clone(), d.r.clone(), d.xhat0.clone(), d.p0.clone());
    let mut horizon = d.horizon;
    loop {
        let (truth, traj) = run(&entry, &config.clone().with_step(horizon / 4000.0), &d.x0, horizon);
        let report = assumption1_report(&traj, &config.q);
        let gamma = default_gamma(report.q_lo, report.p_hi);
        if gamma * horizon < 15.0 {
            horizon = (15.0 / gamma).ceil() + 1.0;
            continue;
        }
        let last = traj.len() - 1;
        let ef = (&traj.xhat[last] - &truth.states[last]).norm();
        ensure(ef <= 1e-6, format!("final error {ef:e} at horizon {horizon}"))?;
        let twin = twin_decay(&entry.model, &traj, &truth, &d.xhat0, &d.x0, None).unwrap();
        let rate = twin.run.fitted_rate.ok_or("no fitted rate")?;
        ensure(rate >= 2.0 * gamma * 0.9, format!("fitted rate {rate} < 0.9·2γ with γ = {gamma}"))?;
        return Ok(format!("horizon {horizon}, γ = {gamma:.4}, final error {ef:.2e}, twin rate {rate:.4}"));
    }
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pos = || rng.random_range(0.05..20.0f64);
    let mut worst_zeta = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for _ in 0..100 {
        let (p_lo, spread, q_lo, r_lo, ka, kc) = (pos(), pos(), pos(), pos(), pos(), pos());
        let p_hi = p_lo * (1.0 + spread);
        let gamma = q_lo / (4.0 * p_hi);
        let z_a = zeta_plus(ka, 0.0, p_hi, q_lo, r_lo, gamma).unwrap();
        worst_zeta = worst_zeta.max(rel(z_a, q_lo / (4.0 * ka * p_hi)));
        let z_c = zeta_plus(0.0, kc, p_hi, q_lo, r_lo, gamma).unwrap();
        worst_zeta = worst_zeta.max(rel(z_c, (q_lo * r_lo / 2.0).sqrt() / (p_hi * kc)));

        let t = table1_compare(&Table1Params { p_lo, p_hi, q_lo, r_lo, c_hi: Some(pos()), kappa_a: ka, kappa_c: kc });
        worst_ratio = worst_ratio.max(rel(t.ratio.rate, p_hi / p_lo));
        let basin = t.ratio.basin_kappa_c_zero.ok_or("missing basin ratio")?;
        worst_ratio = worst_ratio.max(rel(basin, (p_hi / p_lo).sqrt()));
    }
    ensure(worst_zeta <= 1e-12, format!("ζ⁺ limit relative error {worst_zeta:e}"))?;
    ensure(worst_ratio <= 1e-12, format!("table ratio relative error {worst_ratio:e}"))?;
    Ok(format!("ζ⁺ limits {worst_zeta:.1e}, ratios {worst_ratio:.1e}"))
}

fn criterion_5() -> Check {
    let (q, r) = (4.0, 1.0);
    let entry = bench(SCALAR_RICCATI, &[]);
    let d = &entry.defaults;
    let config = FilterConfig::new(s(q), s(r), d.xhat0.clone(), s(1.0));
    let (truth, traj) = run(&entry, &config, &d.x0, d.horizon);
    let p_inf = (q * r).sqrt();
    let k_inf = (q / r).sqrt();
    let p_end = traj.p[traj.len() - 1][(0, 0)];
    ensure((p_end - p_inf).abs() <= 1e-6, format!("final P {p_end}"))?;

    let twin = twin_decay(&entry.model, &traj, &truth, &d.xhat0, &d.x0, None).unwrap();
    let rate = twin.run.fitted_rate.ok_or("no fitted rate")?;
    ensure(rel(rate, 2.0 * k_inf) <= 0.05, format!("twin rate {rate} vs {}", 2.0 * k_inf))?;

    let report = assumption1_report(&traj, &config.q);
    let gamma = default_gamma(report.q_lo, report.p_hi);
    let cert = make_certificate(&report, &HessianBounds::analytic(f64::INFINITY, 0.0, 0.0).unwrap(), gamma).unwrap();
    let env = envelope_check(&traj, &truth, &cert).unwrap();
    ensure(env.worst_margin >= 0.0, format!("envelope worst margin {:e}", env.worst_margin))?;

    let b = 0.3;
    let pert = perturbed_run(&entry.model, &traj, &truth, &Disturbance::constant(v1(b)), &d.xhat0, gamma).unwrap();
    ensure(rel(pert.steady_radius, b / k_inf) <= 0.05, format!("steady radius {} vs b/K = {}", pert.steady_radius, b / k_inf))?;
    ensure(pert.steady_radius <= pert.radii.contraction, format!("steady radius above {}", pert.radii.contraction))?;
    Ok(format!(
        "P(T) = {p_end:.9}, twin rate {rate:.4}, envelope margin {:.2e}, steady radius {:.6}",
        env.worst_margin, pert.steady_radius
    ))
}

fn criterion_6() -> Check {
    let entry = bench(VANDERPOL_POS, &[]);
    let d = &entry.defaults;
    // Along the limit cycle ‖Ã‖ is large enough that p̄ ∝ q̲ defeats any
    // scaling of Q; the truth starts near the unstable origin instead.
    let horizon = 6.0;
    let x0 = DVector::from_vec(vec![0.1, 0.0]);
    let xhat0 = DVector::from_vec(vec![0.3, -0.2]);
    let box_pts: Vec<DVector<f64>> = (0..5)
        .flat_map(|i| (0..5).map(move |j| DVector::from_vec(vec![-0.5 + 0.25 * i as f64, -0.5 + 0.25 * j as f64])))
        .collect();
    let mut scale = 1.0;
    let (truth, traj, gamma) = loop {
        let config = FilterConfig::new(d.q.clone() * scale, d.r.clone(), xhat0.clone(), d.p0.clone())
            .with_step(horizon / 8000.0);
        let (truth, traj) = run(&entry, &config, &x0, horizon);
        let report = assumption1_report(&traj, &config.q);
        let gamma = default_gamma(report.q_lo, report.p_hi);
        if corollary1_check(&entry.model, &traj, &box_pts, gamma, 200).unwrap().passed {
            break (truth, traj, gamma);
        }
        scale *= 2.0;
        ensure(scale <= 1e4, "no Q scaling up to 1e4 passes the check")?;
    };
    let mut worst = f64::INFINITY;
    for z1 in &box_pts {
        let twin = twin_decay(&entry.model, &traj, &truth, z1, &x0, None).unwrap();
        let rate = twin.run.fitted_rate.ok_or("no fitted rate")?;
        worst = worst.min(rate);
    }
    ensure(worst >= 0.9 * gamma, format!("slowest twin rate {worst} < 0.9γ = {}", 0.9 * gamma))?;

    let report = assumption1_report(&traj, &traj.q);
    let too_fast = gamma_cap(report.q_lo, report.p_hi) * 1.01;
    let at_center: Vec<DVector<f64>> = traj.xhat.iter().step_by(traj.len() / 10).cloned().collect();
    let fail = corollary1_check(&entry.model, &traj, &at_center, too_fast, 10).unwrap();
    ensure(!fail.passed, "check passed with γ above the cap")?;
    Ok(format!("Q scale {scale}, γ = {gamma:.4}, slowest twin rate {worst:.4}, over-cap margin {:.2e}", fail.worst_margin))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let n = rng.random_range(1..=4);
        let p = random_spd(&mut rng, n, 0.1);
        let nn = random_spd(&mut rng, n, 0.05);
        let gamma = rng.random_range(0.0..2.0);
        let slack = random_matrix(&mut rng, n, n);
        let m = -(&p * (2.0 * gamma)) - &slack * slack.transpose();
        ensure(inflation_rate_gain(&m, &p, &nn, gamma), format!("draw {i} violates the inflated inequality"))?;
    }

    let entry = bench(CUBIC_SCALAR, &[]);
    let d = &entry.defaults;
    let n_lo = 1.0;
    let base = FilterConfig::new(d.q.clone(), d.r.clone(), d.xhat0.clone(), d.p0.clone());
    let rate_of = |config: &FilterConfig| -> (f64, f64) {
        let (truth, traj) = run(&entry, config, &d.x0, d.horizon);
        let twin = twin_decay(&entry.model, &traj, &truth, &d.xhat0, &d.x0, None).unwrap();
        (twin.run.fitted_rate.unwrap(), traj.p_max)
    };
    let (plain, _) = rate_of(&base);
    let (inflated, p_hi) = rate_of(&base.clone().with_inflation(s(n_lo)));
    let gain = inflated - plain;
    ensure(gain >= 0.5 * n_lo / p_hi, format!("rate gain {gain} < 0.5·n/p̄ = {}", 0.5 * n_lo / p_hi))?;
    Ok(format!("1000 draws hold; twin rate {plain:.4} -> {inflated:.4} (n/p̄ = {:.4})", n_lo / p_hi))
}

fn criterion_8() -> Check {
    let (eps, alpha) = (0.1, 1.0);
    let entry = bench(CUBIC_SCALAR, &[("eps", eps), ("alpha", alpha)]);
    let plan = HessianEstimator { safety_factor: 1.0, ..HessianEstimator::default() };
    let est = estimate_hessian_bounds(&entry.model, &[(v1(0.0), 0.0)], alpha, &plan).unwrap();
    let exact = 6.0 * eps * alpha;
    ensure(rel(est.kappa_a, exact) <= 0.1, format!("κ_A {} vs {exact}", est.kappa_a))?;
    ensure(est.kappa_c <= 1e-10, format!("κ_C {}", est.kappa_c))?;
    for name in [SCALAR_RICCATI, LTV_LINEAR] {
        let e = bench(name, &[]);
        let (_, _, traj) = default_run(&e);
        let b = estimate_hessian_bounds(&e.model, &traj.center_path(), 1.0, &HessianEstimator::default()).unwrap();
        ensure(b.kappa_a <= 1e-10 && b.kappa_c <= 1e-10, format!("{name}: κ = ({}, {})", b.kappa_a, b.kappa_c))?;
    }
    Ok(format!("cubic κ_A = {:.6} vs {exact}; linear κ = 0", est.kappa_a))
}

fn criterion_9() -> Check {
    let entry = bench(CUBIC_SCALAR, &[]);
    let (config, _, traj) = default_run(&entry);
    let report = assumption1_report(&traj, &config.q);
    let gamma = default_gamma(report.q_lo, report.p_hi);
    let a = &entry.analytic;
    let hess = HessianBounds::analytic(a.alpha.unwrap(), a.kappa_a.unwrap(), a.kappa_c.unwrap()).unwrap();
    let cert = make_certificate(&report, &hess, gamma).unwrap();
    let search = RadiusSearch::default();
    let mut worst = f64::INFINITY;
    for k in (0..traj.len()).step_by(traj.len() / 50) {
        let r = empirical_radius(&entry.model, &traj.xhat[k], &traj.p[k], &traj.q, &traj.r, gamma, traj.times[k], &search)
            .unwrap();
        ensure(r >= cert.zeta_plus * (1.0 - 1e-9), format!("t = {}: empirical {r} < ζ⁺ = {}", traj.times[k], cert.zeta_plus))?;
        worst = worst.min(r);
    }
    Ok(format!("ζ⁺ = {:.6}, smallest empirical radius {worst:.6}", cert.zeta_plus))
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("twin.json");
    std::fs::write(&cfg, r#"{"system": {"name": "vanderpol-pos"}, "certify": {"bounds": "sampled", "alpha": 0.5}}"#)
        .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_ekfc"))
            .args(["twin", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.code().is_some_and(|c| c <= 1), format!("exit {:?}", status.status.code()))?;
        outputs.push(std::fs::read(out.join("twin.csv")).map_err(|e| e.to_string())?);
    }
    ensure(!outputs[0].is_empty() && outputs[0] == outputs[1], "CSV outputs differ")?;
    Ok(format!("{} identical bytes", outputs[0].len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("algebraic identity", criterion_1),
        ("variational derivative", criterion_2),
        ("linear convergence", criterion_3),
        ("zeta limits and table ratios", criterion_4),
        ("scalar Riccati pipeline", criterion_5),
        ("linear output map", criterion_6),
        ("inflation rate gain", criterion_7),
        ("Hessian bound estimator", criterion_8),
        ("empirical vs analytic radius", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("acceptance {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
