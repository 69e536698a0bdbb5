//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints its verdict line.

mod common;

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{gibbs_limit_oracle, max_abs_diff, random_state};
use phononflux::covariance::{
    clt_diagnostics, limit_covariance, make_test_function, quadratic_form_at, Ensemble, InitialMeasure,
    TestFunctionSpec, SIGN_TOL,
};
use phononflux::current::{gibbs_limit_current, limit_current, mc_mean_current};
use phononflux::lattice::CMat;
use phononflux::propagator::evolve_covariance_spectral;
use phononflux::random_fields::{gibbs_spectral_density, triangular_density, GaussianSampler, TwoTempSpec};
use phononflux::runner::decay_probe;
use phononflux::stats::{chi_square_band, mean};
use phononflux::{Dynamics, FieldState, InteractionMatrix, Result, TorusGrid};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn max_norm(m: &CMat) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn rel_diff(a: &FieldState, b: &FieldState) -> f64 {
    let scale = a.sup_norm().max(b.sup_norm());
    max_abs_diff(&a.u, &b.u).max(max_abs_diff(&a.v, &b.v)) / scale
}

fn elastic(d: usize, n: usize, m: f64) -> Dynamics {
    Dynamics::new(InteractionMatrix::elastic(d, m).unwrap(), TorusGrid::new(d, n).unwrap()).unwrap()
}

fn propagator_exactness() -> Result<Outcome> {
    let mut drift: f64 = 0.0;
    let mut group: f64 = 0.0;
    let mut reverse: f64 = 0.0;
    for (d, n) in [(1, 256), (2, 128)] {
        let dy = elastic(d, n, 1.0);
        let y0 = random_state(dy.grid(), 1, 7);
        let h0 = dy.hamiltonian(&y0);
        for i in 1..=20 {
            let y = dy.evolve(&y0, 5.0 * i as f64)?;
            drift = drift.max((dy.hamiltonian(&y) - h0).abs() / h0);
        }
        let two_step = dy.evolve(&dy.evolve(&y0, 37.5)?, 62.5)?;
        group = group.max(rel_diff(&two_step, &dy.evolve(&y0, 100.0)?));
        let back = dy.evolve(&dy.evolve(&y0, 100.0)?, -100.0)?;
        reverse = reverse.max(rel_diff(&back, &y0));
    }
    outcome(
        drift < 1e-10 && group < 1e-9 && reverse < 1e-9,
        format!("H drift {drift:.1e} (< 1e-10), group law {group:.1e}, reversibility {reverse:.1e} (< 1e-9)"),
    )
}

fn gibbs_identities() -> Result<Outcome> {
    let mut closed: f64 = 0.0;
    let mut stationary: f64 = 0.0;
    for (d, n) in [(1, 256), (2, 32)] {
        let dy = elastic(d, n, 1.0);
        let data = dy.dispersion();
        let g = dy.grid();
        let hot = gibbs_spectral_density(data, 2.0)?;
        let lim = limit_covariance(data, &hot, &gibbs_spectral_density(data, 1.0)?, SIGN_TOL)?;
        for k in 0..g.len() {
            let oracle = gibbs_limit_oracle(dy.interaction(), g, k, 2.0, 1.0);
            closed = closed.max(max_norm(&(lim.node(k) - &oracle)) / max_norm(&oracle).max(1.0));
        }
        let moved = evolve_covariance_spectral(&hot, data, 50.0)?;
        for k in 0..g.len() {
            stationary = stationary.max(max_norm(&(moved.node(k) - hot.node(k))) / max_norm(hot.node(k)));
        }
    }
    outcome(
        closed < 1e-10 && stationary < 1e-10,
        format!("limit vs closed Gibbs form {closed:.1e}, stationarity {stationary:.1e} (< 1e-10)"),
    )
}

fn equilibrium_convergence() -> Result<Outcome> {
    let dy = elastic(1, 512, 1.0);
    let data = dy.dispersion();
    let spec = TestFunctionSpec {
        theta0: vec![PI / 2.0],
        width: PI / 8.0,
        support_radius: None,
        polarization: None,
    };
    let psi = make_test_function(data, &spec, 1e-8)?;
    let q = triangular_density(dy.grid(), 1, 8, 1.0)?;
    let q_inf = limit_covariance(data, &q, &q, SIGN_TOL)?.quadratic_form(&psi)?;
    let dev = |t: f64| -> Result<f64> { Ok((quadratic_form_at(&q, data, &psi, t)? - q_inf).abs()) };
    let envelope = |a: f64| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..=400 {
            worst = worst.max(dev(a * (1.0 + i as f64 / 400.0))?);
        }
        Ok(worst)
    };
    let rel = dev(80.0)? / q_inf.abs();
    let env = [envelope(20.0)?, envelope(40.0)?, envelope(80.0)?];
    let halves = env[1] <= 0.5 * env[0] && env[2] <= 0.5 * env[1];
    outcome(
        psi.certified && rel < 0.03 && halves,
        format!(
            "certified {}, |Q80 - Qinf|/Qinf {rel:.2e} (< 0.03), envelope {:.2e} -> {:.2e} -> {:.2e}",
            psi.certified, env[0], env[1], env[2]
        ),
    )
}

fn second_law() -> Result<Outcome> {
    let dy = elastic(1, 1024, 1.0);
    let data = dy.dispersion();
    let g = dy.grid();
    let (hot, cold) = (gibbs_spectral_density(data, 2.0)?, gibbs_spectral_density(data, 1.0)?);
    let lim = limit_covariance(data, &hot, &cold, SIGN_TOL)?;
    let j_lim = limit_current(&lim, dy.interaction())?[0];
    let j_gibbs = gibbs_limit_current(data, 2.0, 1.0, SIGN_TOL)[0];
    let target = -0.5 * (5f64.sqrt() - 1.0) / PI;
    let ens = Ensemble::gaussian(InitialMeasure::TwoTemperature(TwoTempSpec::new(cold, hot, 0)?));
    let mc = &mc_mean_current(&ens, &dy, 40.0, 0, &[g.wrap(&[0])], false, 2000, 2024)?[0];
    let band = (2.0 * mc.stderr).max(0.05 * target.abs());
    let pass = (mc.value - target).abs() <= band
        && mc.value < 0.0
        && j_lim < 0.0
        && (j_lim - j_gibbs).abs() < 1e-8;
    outcome(
        pass,
        format!(
            "MC j(0, 40) = {:.5} ± {:.5}, target {target:.5} ± {band:.5}; limit {j_lim:.8}, Gibbs quadrature {j_gibbs:.8} (diff {:.1e})",
            mc.value,
            mc.stderr,
            (j_lim - j_gibbs).abs()
        ),
    )
}

fn transverse_current() -> Result<Outcome> {
    let dy = elastic(2, 128, 1.0);
    let data = dy.dispersion();
    let g = dy.grid();
    let (hot, cold) = (gibbs_spectral_density(data, 2.0)?, gibbs_spectral_density(data, 1.0)?);
    let lim = limit_covariance(data, &hot, &cold, SIGN_TOL)?;
    let j = limit_current(&lim, dy.interaction())?;
    let ens = Ensemble::gaussian(InitialMeasure::TwoTemperature(TwoTempSpec::new(cold, hot, 0)?));
    let mc = &mc_mean_current(&ens, &dy, 30.0, 0, &[g.wrap(&[0, 0])], false, 500, 77)?[0];
    let z = mc.value.abs() / mc.stderr;
    outcome(
        j[0].abs() < 1e-9 && z <= 3.0,
        format!(
            "|j_inf^1| = {:.1e} (< 1e-9), longitudinal {:.5}; MC transverse {:.5} ± {:.5} ({z:.2} SE)",
            j[0].abs(),
            j[1],
            mc.value,
            mc.stderr
        ),
    )
}

fn clt() -> Result<Outcome> {
    let dy = elastic(1, 1024, 1.0);
    let spec = TestFunctionSpec {
        theta0: vec![2.1602],
        width: 0.96,
        support_radius: None,
        polarization: None,
    };
    let psi = make_test_function(dy.dispersion(), &spec, 1e-8)?;
    let ens = Ensemble {
        measure: InitialMeasure::Stationary(triangular_density(dy.grid(), 1, 24, 1.0)?),
        clip: Some(24f64.sqrt()),
    };
    let factors = [0.5, 1.0, 2.0];
    let start = clt_diagnostics(&ens, &dy, &psi, 0.0, 4000, 1, &factors)?;
    let late = clt_diagnostics(&ens, &dy, &psi, 60.0, 4000, 1, &factors)?;
    let z0 = start.moments.excess_kurtosis.z_score(0.0);
    let z60 = late.moments.excess_kurtosis.z_score(0.0);
    let ecf = late.ecf.iter().map(|r| r.z_score()).fold(0.0, f64::max);
    outcome(
        z0 > 5.0 && z60 <= 5.0 && ecf <= 5.0,
        format!("excess kurtosis {z0:.1} SE at t=0 (> 5), {z60:.1} SE at t=60 (<= 5); worst ECF {ecf:.1} SE (<= 5)"),
    )
}

fn geomspace(a: f64, b: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| a * (b / a).powf(i as f64 / (k - 1) as f64)).collect()
}

fn decay() -> Result<Outcome> {
    let cases = [
        (1, 4096, vec![2.1602], 0.96, geomspace(50.0, 500.0, 12)),
        (2, 512, vec![0.4418, 2.1598], 0.9, geomspace(30.0, 160.0, 10)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (d, n, theta0, width, times) in cases {
        let dy = elastic(d, n, 1.0);
        let spec = TestFunctionSpec {
            theta0,
            width,
            support_radius: None,
            polarization: None,
        };
        let psi = make_test_function(dy.dispersion(), &spec, 1e-8)?;
        let report = decay_probe(&dy, &psi, &times)?;
        let tail = report.rows.iter().map(|r| r.tail_ratio).fold(0.0, f64::max);
        let within = report.rows.iter().all(|r| !r.beyond_horizon);
        pass &= (report.slope + 0.5 * d as f64).abs() <= 0.15 && tail < 1e-6 && within;
        parts.push(format!("d={d}: slope {:.3} (target {:.1} ± 0.15), tail {tail:.1e}", report.slope, -0.5 * d as f64));
    }
    outcome(pass, parts.join("; "))
}

fn sampler_fidelity() -> Result<Outcome> {
    let dy = elastic(1, 64, 1.0);
    let g = dy.grid();
    let temperature = 1.3;
    let q = gibbs_spectral_density(dy.dispersion(), temperature)?;
    let sampler = GaussianSampler::new(&q)?;
    let m = 20000;
    let nodes = sample(&mut ChaCha8Rng::seed_from_u64(5), g.len(), 5).into_vec();
    let mut power = vec![[0.0f64; 2]; nodes.len()];
    let mut kinetic = Vec::with_capacity(m);
    for i in 0..m {
        let y = sampler.sample(99, i as u64)?;
        let spec = y.to_spectral(dy.transform());
        for (p, &k) in power.iter_mut().zip(&nodes) {
            p[0] += spec[0][k].norm_sqr();
            p[1] += spec[1][k].norm_sqr();
        }
        kinetic.push(y.v.iter().map(|x| x * x).sum::<f64>() / g.len() as f64);
    }
    let mut pass = true;
    let mut worst: f64 = 1.0;
    for (p, &k) in power.iter().zip(&nodes) {
        let dof = if g.conjugate(k) == k { m as f64 } else { 2.0 * m as f64 };
        let (lo, hi) = chi_square_band(dof, 1e-3);
        for c in 0..2 {
            let ratio = p[c] / m as f64 / (g.len() as f64 * q.node(k)[(c, c)].re);
            pass &= (lo..=hi).contains(&ratio);
            if (ratio - 1.0).abs() > (worst - 1.0).abs() {
                worst = ratio;
            }
        }
    }
    let e = mean(&kinetic);
    let z = e.z_score(temperature);
    pass &= z <= 5.0;
    outcome(
        pass,
        format!(
            "nodes {nodes:?}: worst power ratio {worst:.4} (99.9% chi-square band); E|v|^2 = {:.4} ± {:.4} vs T = {temperature} ({z:.2} SE)",
            e.value, e.stderr
        ),
    )
}

type Criterion = (&'static str, Duration, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("propagator exactness", Duration::from_secs(10), propagator_exactness),
        ("Gibbs identities", Duration::from_secs(5), gibbs_identities),
        ("equilibrium convergence", Duration::from_secs(30), equilibrium_convergence),
        ("second law d=1", Duration::from_secs(300), second_law),
        ("transverse null current d=2", Duration::from_secs(600), transverse_current),
        ("central limit theorem", Duration::from_secs(600), clt),
        ("stationary-phase decay", Duration::from_secs(120), decay),
        ("sampler fidelity", Duration::from_secs(60), sampler_fidelity),
    ];
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= *budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {}: {} {name}: {detail} [{:.2} s of {} s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failures == 0 {
        println!("acceptance: all {} criteria pass", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of {} criteria fail", criteria.len());
        ExitCode::FAILURE
    }
}
