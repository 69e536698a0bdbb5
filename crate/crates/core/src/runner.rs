//! Experiment configuration and orchestration: one CSV per observable plus
//! a `manifest.json` recording the configuration hash, seeds and warnings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::{
    clt_diagnostics, covariance_from_density, exact_covariance_propagation, limit_covariance,
    make_test_function, mc_covariance, quadratic_form_at, Ensemble, InitialMeasure, Method,
    TestFunction, TestFunctionSpec, SIGN_TOL,
};
use crate::current::{
    current_pairs, gibbs_limit_current, limit_current, mc_mean_current,
    mean_current_from_covariance, second_law_check, CurrentEstimate,
};
use crate::error::{Error, Result};
use crate::io::{Cell, Table};
use crate::lattice::{check_conditions, critical_set, dispersion, ConditionTolerances, ModelSpec, Verdict};
use crate::propagator::{horizon, Dynamics};
use crate::random_fields::{gibbs_spectral_density, DensitySpec, TwoTempSpec};
use crate::{FieldState, TorusGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Dispersion,
    Check,
    Evolve,
    Covariance,
    LimitCov,
    Current,
    SecondLaw,
    Clt,
    Decay,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Dispersion => "dispersion",
            Task::Check => "check",
            Task::Evolve => "evolve",
            Task::Covariance => "covariance",
            Task::LimitCov => "limit-cov",
            Task::Current => "current",
            Task::SecondLaw => "second-law",
            Task::Clt => "clt",
            Task::Decay => "decay",
        }
    }

    fn needs_ensemble(&self) -> bool {
        matches!(
            self,
            Task::Evolve | Task::Covariance | Task::LimitCov | Task::Current | Task::Clt
        )
    }

    fn needs_test_function(&self) -> bool {
        matches!(self, Task::Clt | Task::Decay)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(rename = "M", default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub master_seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            samples: default_samples(),
            master_seed: 0,
        }
    }
}

fn default_samples() -> usize {
    1000
}

/// Gibbs sides at two temperatures glued along the last axis.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TemperatureConfig {
    #[serde(rename = "T_plus")]
    pub t_plus: f64,
    #[serde(rename = "T_minus")]
    pub t_minus: f64,
    #[serde(default)]
    pub cutoff_a: usize,
}

/// Arbitrary densities glued along the last axis.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TwoSidedConfig {
    pub minus: DensitySpec,
    pub plus: DensitySpec,
    #[serde(default)]
    pub cutoff_a: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Significant digits of floats in CSV output.
    #[serde(default = "default_precision")]
    pub precision: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            precision: default_precision(),
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_precision() -> usize {
    17
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    /// Pairs `(0, y)` with `‖y‖_∞ ≤ window` are reported.
    #[serde(default = "one_usize")]
    pub window: usize,
    #[serde(default = "default_cov_methods")]
    pub methods: Vec<Method>,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        CovarianceConfig {
            window: 1,
            methods: default_cov_methods(),
        }
    }
}

fn one_usize() -> usize {
    1
}

fn default_cov_methods() -> Vec<Method> {
    vec![Method::Exact]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CurrentConfig {
    /// Positions of the measuring plane along the last axis.
    #[serde(default = "default_offsets")]
    pub offsets: Vec<i64>,
    /// One-based directions; all of `1..=d` when empty.
    #[serde(default)]
    pub directions: Vec<usize>,
    #[serde(default = "default_current_methods")]
    pub methods: Vec<Method>,
}

impl Default for CurrentConfig {
    fn default() -> Self {
        CurrentConfig {
            offsets: default_offsets(),
            directions: Vec::new(),
            methods: default_current_methods(),
        }
    }
}

fn default_offsets() -> Vec<i64> {
    vec![0]
}

fn default_current_methods() -> Vec<Method> {
    vec![Method::Mc, Method::Exact]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CltConfig {
    /// `λ = f · 𝒬∞^{-1/2}` for each factor `f`.
    #[serde(default = "default_lambda_factors")]
    pub lambda_factors: Vec<f64>,
}

impl Default for CltConfig {
    fn default() -> Self {
        CltConfig {
            lambda_factors: default_lambda_factors(),
        }
    }
}

fn default_lambda_factors() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}

fn default_critical_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub grid: GridConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub temperatures: Option<TemperatureConfig>,
    #[serde(default)]
    pub density: Option<DensitySpec>,
    #[serde(default)]
    pub two_temperature: Option<TwoSidedConfig>,
    /// Odd clipping level applied entrywise to initial samples.
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default)]
    pub test_function: Option<TestFunctionSpec>,
    #[serde(default)]
    pub observables: Vec<Task>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub covariance: CovarianceConfig,
    #[serde(default)]
    pub current: CurrentConfig,
    #[serde(default)]
    pub clt: CltConfig,
    #[serde(default = "default_critical_tol")]
    pub critical_tol: f64,
}

fn config_error(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// A configuration with defaults everywhere but the model and grid.
    pub fn new(model: ModelSpec, n: usize) -> Self {
        ExperimentConfig {
            model,
            grid: GridConfig { n },
            ensemble: EnsembleConfig::default(),
            temperatures: None,
            density: None,
            two_temperature: None,
            clip: None,
            times: Vec::new(),
            test_function: None,
            observables: Vec::new(),
            output: OutputConfig::default(),
            covariance: CovarianceConfig::default(),
            current: CurrentConfig::default(),
            clt: CltConfig::default(),
            critical_tol: default_critical_tol(),
        }
    }

    /// Parses JSON, reporting the JSON pointer of the first offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            config_error(&pointer, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Semantic checks beyond the JSON schema.
    pub fn validate(&self) -> Result<()> {
        if self.grid.n < 2 || !self.grid.n.is_multiple_of(2) {
            return Err(config_error("/grid/N", format!("N must be even and at least 2, got {}", self.grid.n)));
        }
        if self.ensemble.samples < 1 {
            return Err(config_error("/ensemble/M", "M must be at least 1"));
        }
        for (i, t) in self.times.iter().enumerate() {
            if !t.is_finite() || *t < 0.0 {
                return Err(config_error(&format!("/times/{i}"), format!("time must be finite and non-negative, got {t}")));
            }
        }
        if !(1..=17).contains(&self.output.precision) {
            return Err(config_error("/output/precision", "precision must be between 1 and 17"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config_error("/clip", "clip level must be positive"));
            }
        }
        let sources = [self.temperatures.is_some(), self.density.is_some(), self.two_temperature.is_some()];
        if sources.iter().filter(|&&s| s).count() > 1 {
            return Err(config_error(
                "",
                "give at most one of `temperatures`, `density` and `two_temperature`",
            ));
        }
        let d = match &self.model {
            ModelSpec::Elastic(e) => e.d,
            ModelSpec::Explicit(m) => m.d,
        };
        for (i, &k) in self.current.directions.iter().enumerate() {
            if k == 0 || k > d {
                return Err(config_error(&format!("/current/directions/{i}"), format!("direction must be in 1..={d}")));
            }
        }
        for task in &self.observables {
            if task.needs_ensemble() && !sources.iter().any(|&s| s) {
                return Err(config_error(
                    "/observables",
                    format!("task `{}` needs `temperatures`, `density` or `two_temperature`", task.name()),
                ));
            }
            if task.needs_test_function() && self.test_function.is_none() {
                return Err(config_error(
                    "/test_function",
                    format!("task `{}` needs a test function", task.name()),
                ));
            }
            if *task == Task::SecondLaw && self.temperatures.is_none() {
                return Err(config_error("/temperatures", "task `second-law` needs `temperatures`"));
            }
            if matches!(task, Task::Evolve | Task::Clt | Task::Decay) && self.times.is_empty() {
                return Err(config_error("/times", format!("task `{}` needs at least one time", task.name())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Outcome of a pass/fail comparison made while running.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskError {
    pub task: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
    pub errors: Vec<TaskError>,
    pub checks: Vec<CheckRecord>,
}

impl RunReport {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Shared state of one run.
struct Context<'a> {
    config: &'a ExperimentConfig,
    dynamics: Dynamics,
    digits: usize,
    horizon: f64,
    warnings: Vec<String>,
    checks: Vec<CheckRecord>,
    tables: BTreeMap<&'static str, Table>,
    ensemble: Option<Ensemble>,
    psi: Option<TestFunction>,
}

impl Context<'_> {
    fn grid(&self) -> TorusGrid {
        self.dynamics.grid()
    }

    fn beyond(&mut self, t: f64, what: &str) -> bool {
        let out = t > self.horizon;
        if out {
            let msg = format!("{what}: t = {t} exceeds the torus horizon {:.3}", self.horizon);
            log::warn!("{msg}");
            if !self.warnings.contains(&msg) {
                self.warnings.push(msg);
            }
        }
        out
    }

    fn ensemble(&mut self) -> Result<&Ensemble> {
        if self.ensemble.is_none() {
            let data = self.dynamics.dispersion();
            let c = self.config;
            let measure = if let Some(tc) = &c.temperatures {
                InitialMeasure::TwoTemperature(TwoTempSpec::new(
                    gibbs_spectral_density(data, tc.t_minus)?,
                    gibbs_spectral_density(data, tc.t_plus)?,
                    tc.cutoff_a,
                )?)
            } else if let Some(tt) = &c.two_temperature {
                InitialMeasure::TwoTemperature(TwoTempSpec::new(tt.minus.build(data)?, tt.plus.build(data)?, tt.cutoff_a)?)
            } else if let Some(ds) = &c.density {
                InitialMeasure::Stationary(ds.build(data)?)
            } else {
                return Err(config_error("", "no initial measure configured"));
            };
            self.ensemble = Some(Ensemble { measure, clip: c.clip });
        }
        Ok(self.ensemble.as_ref().expect("just set"))
    }

    fn test_function(&mut self) -> Result<&TestFunction> {
        if self.psi.is_none() {
            let spec = self.config.test_function.as_ref().ok_or_else(|| config_error("/test_function", "missing"))?;
            let psi = make_test_function(self.dynamics.dispersion(), spec, self.config.critical_tol)?;
            if !psi.certified {
                self.warnings.push(format!(
                    "test function leak {:e} onto the critical set exceeds the certification threshold",
                    psi.leak
                ));
            }
            self.psi = Some(psi);
        }
        Ok(self.psi.as_ref().expect("just set"))
    }

    fn site_at_offset(&self, offset: i64) -> usize {
        let g = self.grid();
        let mut c = vec![0i64; g.dim()];
        *c.last_mut().expect("d >= 1") = offset;
        g.wrap(&c)
    }

    fn coords(&self, site: usize) -> Vec<Cell> {
        self.grid().signed_coords(site).into_iter().map(Cell::from).collect()
    }

    fn table(&mut self, name: &'static str, header: Vec<String>) -> &mut Table {
        let digits = self.digits;
        self.tables.entry(name).or_insert_with(|| Table::new(header, digits))
    }
}

fn axis_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("{prefix}_{k}")).collect()
}

fn run_dispersion(cx: &mut Context) -> Result<()> {
    let data = cx.dynamics.dispersion().clone();
    let g = data.grid();
    let d = g.dim();
    let mask = critical_set(&data, cx.config.critical_tol);
    let mut header = axis_names("theta", d);
    header.extend(["branch".into(), "omega".into()]);
    header.extend(axis_names("vel", d));
    header.push("critical".into());
    let mut table = Table::new(header, cx.digits);
    for node in 0..g.len() {
        let s = data.node(node);
        for (b, &w) in s.omegas.iter().enumerate() {
            let mut row: Vec<Cell> = g.theta(node).into_iter().map(|t| table.float(t)).collect();
            row.push(b.into());
            row.push(table.float(w));
            for &v in &s.cluster_of_branch(b).velocity {
                row.push(table.float(v));
            }
            row.push(Cell::from(if mask.is_critical(node) { "1" } else { "0" }));
            table.push(row)?;
        }
    }
    cx.tables.insert("dispersion", table);
    Ok(())
}

fn run_check(cx: &mut Context) -> Result<()> {
    let report = check_conditions(cx.dynamics.interaction(), cx.dynamics.dispersion(), ConditionTolerances::default());
    let mut table = Table::new(["condition", "verdict", "witness", "value", "note"], cx.digits);
    for (name, c) in [
        ("E1", &report.e1),
        ("E2", &report.e2),
        ("E3", &report.e3),
        ("E4", &report.e4),
        ("E5", &report.e5),
        ("E6", &report.e6),
    ] {
        let verdict = serde_json::to_value(c.verdict)?.as_str().unwrap_or("").to_string();
        if c.witness.is_empty() {
            table.push(vec![name.into(), verdict.clone().into(), "".into(), "".into(), c.note.clone().into()])?;
        }
        for (key, &value) in &c.witness {
            let v = table.float(value);
            table.push(vec![name.into(), verdict.clone().into(), key.clone().into(), v, c.note.clone().into()])?;
        }
    }
    for (cause, &f) in &report.critical_fractions {
        let v = table.float(f);
        table.push(vec!["critical-fraction".into(), "".into(), cause.clone().into(), v, "".into()])?;
    }
    cx.checks.push(CheckRecord {
        name: "conditions".into(),
        pass: report.all_pass(),
        detail: format!(
            "E1..E6: {}",
            [&report.e1, &report.e2, &report.e3, &report.e4, &report.e5, &report.e6]
                .iter()
                .map(|c| format!("{:?}", c.verdict))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    });
    cx.tables.insert("check", table);
    Ok(())
}

fn run_evolve(cx: &mut Context) -> Result<()> {
    let seed = cx.config.ensemble.master_seed;
    let y0 = cx.ensemble()?.sampler()?.sample(seed, 0)?;
    let g = cx.grid();
    let n = y0.components();
    let mut header = vec!["t".to_string()];
    header.extend(axis_names("x", g.dim()));
    header.extend(["component".into(), "u".into(), "v".into(), "beyond_horizon".into()]);
    let mut table = Table::new(header, cx.digits);
    for &t in &cx.config.times.clone() {
        let flag = cx.beyond(t, "evolve");
        let y = cx.dynamics.evolve(&y0, t)?;
        for site in 0..g.len() {
            for a in 0..n {
                let mut row = vec![table.float(t)];
                row.extend(cx.coords(site));
                row.push(a.into());
                row.push(table.float(y.u[site * n + a]));
                row.push(table.float(y.v[site * n + a]));
                row.push(flag.into());
                table.push(row)?;
            }
        }
    }
    cx.tables.insert("evolve", table);
    Ok(())
}

fn window_sites(g: TorusGrid, radius: usize) -> Vec<usize> {
    (0..g.len())
        .filter(|&s| g.signed_coords(s).iter().all(|c| c.unsigned_abs() as usize <= radius))
        .collect()
}

fn run_covariance(cx: &mut Context) -> Result<()> {
    let g = cx.grid();
    let d = g.dim();
    let cfg = cx.config.covariance.clone();
    if 2 * cfg.window >= g.points() {
        return Err(Error::WindowTooLarge {
            radius: cfg.window,
            points: g.points(),
        });
    }
    let ensemble = cx.ensemble()?.clone();
    let n = ensemble.measure.components();
    let sites = window_sites(g, cfg.window);
    let origin = 0usize;
    let pairs: Vec<(usize, usize)> = sites.iter().map(|&y| (origin, y)).collect();
    let mut header = vec!["t".to_string(), "i".into(), "j".into()];
    header.extend(axis_names("x", d));
    header.extend(axis_names("y", d));
    header.extend(["row", "col", "value", "stderr", "method", "beyond_horizon"].map(String::from));
    let mut table = Table::new(header, cx.digits);
    for &t in &cx.config.times.clone() {
        let flag = cx.beyond(t, "covariance");
        for method in &cfg.methods {
            let est = match method {
                Method::Mc => mc_covariance(
                    &ensemble,
                    &cx.dynamics,
                    t,
                    &pairs,
                    cx.config.ensemble.samples.max(2),
                    cx.config.ensemble.master_seed,
                )?,
                Method::Exact => {
                    if flag {
                        continue;
                    }
                    let measure = ensemble.covariance_measure()?;
                    exact_covariance_propagation(&measure, &cx.dynamics, t, &sites)?
                }
                Method::Spectral => match ensemble.covariance_measure()? {
                    InitialMeasure::Stationary(q) => {
                        let qt = crate::propagator::evolve_covariance_spectral(&q, cx.dynamics.dispersion(), t)?;
                        covariance_from_density(&qt, t, &pairs, Method::Spectral)?
                    }
                    InitialMeasure::TwoTemperature(_) => {
                        return Err(config_error(
                            "/covariance/methods",
                            "the spectral route needs a translation-invariant measure",
                        ))
                    }
                },
                Method::Limit => {
                    let (qp, qm) = ensemble.covariance_sides()?;
                    let lim = limit_covariance(cx.dynamics.dispersion(), &qp, &qm, SIGN_TOL)?;
                    covariance_from_density(&lim.density()?, f64::INFINITY, &pairs, Method::Limit)?
                }
            };
            for &(x, y) in &pairs {
                let e = est.get(x, y).expect("requested pair");
                for i in 0..2 {
                    for j in 0..2 {
                        for r in 0..n {
                            for c in 0..n {
                                let (rr, cc) = (i * n + r, j * n + c);
                                let mut row = vec![table.float(t), i.into(), j.into()];
                                row.extend(cx.coords(x));
                                row.extend(cx.coords(y));
                                row.push(r.into());
                                row.push(c.into());
                                row.push(table.float(e.value[(rr, cc)]));
                                row.push(table.float(e.stderr[(rr, cc)]));
                                row.push(method.as_str().into());
                                row.push(flag.into());
                                table.push(row)?;
                            }
                        }
                    }
                }
            }
        }
    }
    cx.tables.insert("covariance", table);
    Ok(())
}

fn run_limit_cov(cx: &mut Context) -> Result<()> {
    let (qp, qm) = cx.ensemble()?.covariance_sides()?;
    let lim = limit_covariance(cx.dynamics.dispersion(), &qp, &qm, SIGN_TOL)?;
    let g = cx.grid();
    let n = lim.components();
    let mut header = axis_names("theta", g.dim());
    header.extend(["i", "j", "row", "col", "re", "im"].map(String::from));
    let mut table = Table::new(header, cx.digits);
    for node in 0..g.len() {
        let q = lim.node(node);
        for i in 0..2 {
            for j in 0..2 {
                for r in 0..n {
                    for c in 0..n {
                        let z = q[(i * n + r, j * n + c)];
                        let mut row: Vec<Cell> = g.theta(node).into_iter().map(|t| table.float(t)).collect();
                        row.extend([i.into(), j.into(), r.into(), c.into(), table.float(z.re), table.float(z.im)]);
                        table.push(row)?;
                    }
                }
            }
        }
    }
    cx.tables.insert("limit_covariance", table);
    Ok(())
}

fn current_header() -> Vec<String> {
    ["method", "k", "t", "x_offset", "value", "stderr", "beyond_horizon", "verdict", "conductance"]
        .map(String::from)
        .to_vec()
}

fn push_current(cx: &mut Context, e: &CurrentEstimate, flag: bool) -> Result<()> {
    let table = cx.table("current", current_header());
    let row = vec![
        e.method.as_str().into(),
        (e.k + 1).into(),
        table.float(e.t),
        e.x_offset.into(),
        table.float(e.value),
        table.float(e.stderr),
        flag.into(),
        "".into(),
        "".into(),
    ];
    table.push(row)
}

fn directions(cx: &Context) -> Vec<usize> {
    if cx.config.current.directions.is_empty() {
        (0..cx.grid().dim()).collect()
    } else {
        cx.config.current.directions.iter().map(|k| k - 1).collect()
    }
}

fn run_current(cx: &mut Context) -> Result<()> {
    let ensemble = cx.ensemble()?.clone();
    let cfg = cx.config.current.clone();
    let dirs = directions(cx);
    let v = cx.dynamics.interaction().clone();
    let g = cx.grid();
    let sites: Vec<usize> = cfg.offsets.iter().map(|&o| cx.site_at_offset(o)).collect();

    let (qp, qm) = ensemble.covariance_sides()?;
    let lim = limit_covariance(cx.dynamics.dispersion(), &qp, &qm, SIGN_TOL)?;
    let j_inf = limit_current(&lim, &v)?;
    for &k in &dirs {
        let e = CurrentEstimate {
            k,
            site: 0,
            x_offset: 0,
            t: f64::INFINITY,
            value: j_inf[k],
            stderr: 0.0,
            method: Method::Limit,
        };
        push_current(cx, &e, false)?;
    }

    for &t in &cx.config.times.clone() {
        let flag = cx.beyond(t, "current");
        for method in &cfg.methods {
            match method {
                Method::Mc => {
                    for &k in &dirs {
                        let est = mc_mean_current(
                            &ensemble,
                            &cx.dynamics,
                            t,
                            k,
                            &sites,
                            false,
                            cx.config.ensemble.samples.max(2),
                            cx.config.ensemble.master_seed,
                        )?;
                        for e in est {
                            push_current(cx, &e, flag)?;
                            if e.x_offset == 0 && !flag {
                                let limit = j_inf[k];
                                let band = (2.0 * e.stderr).max(0.05 * limit.abs());
                                cx.checks.push(CheckRecord {
                                    name: format!("mc-current-vs-limit k={} t={t}", k + 1),
                                    pass: (e.value - limit).abs() <= band,
                                    detail: format!("mc {:.6} ± {:.6}, limit {:.6}, band {:.6}", e.value, e.stderr, limit, band),
                                });
                            }
                        }
                    }
                }
                Method::Exact => {
                    if flag {
                        continue;
                    }
                    let measure = ensemble.covariance_measure()?;
                    let vr = &v;
                    let mut needed: Vec<usize> = sites
                        .iter()
                        .flat_map(|&s| dirs.iter().flat_map(move |&k| current_pairs(vr, g, s, k)))
                        .flat_map(|(a, b)| [a, b])
                        .collect();
                    needed.sort_unstable();
                    needed.dedup();
                    let cov = exact_covariance_propagation(&measure, &cx.dynamics, t, &needed)?;
                    for &k in &dirs {
                        for &s in &sites {
                            let e = mean_current_from_covariance(&cov, &v, s, k)?;
                            push_current(cx, &e, flag)?;
                        }
                    }
                }
                other => {
                    return Err(config_error(
                        "/current/methods",
                        format!("unsupported current method `{}`", other.as_str()),
                    ))
                }
            }
        }
    }
    Ok(())
}

/// Largest refined grid on which the Gibbs current is recomputed.
const RICHARDSON_MAX_NODES: usize = 1 << 22;

fn run_second_law(cx: &mut Context) -> Result<()> {
    let tc = cx.config.temperatures.clone().expect("validated");
    let data = cx.dynamics.dispersion().clone();
    let d = data.grid().dim();
    let gibbs = gibbs_limit_current(&data, tc.t_plus, tc.t_minus, SIGN_TOL);
    let lim = limit_covariance(
        &data,
        &gibbs_spectral_density(&data, tc.t_plus)?,
        &gibbs_spectral_density(&data, tc.t_minus)?,
        SIGN_TOL,
    )?;
    let general = limit_current(&lim, cx.dynamics.interaction())?;
    let diff = gibbs.iter().zip(&general).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    cx.checks.push(CheckRecord {
        name: "limit-current-vs-gibbs".into(),
        pass: diff < 1e-8,
        detail: format!("max difference {diff:e}"),
    });
    let report = second_law_check(tc.t_plus, tc.t_minus, &gibbs, 1e-12);
    let mut detail = format!("j = {:.12}, C = {:?}", report.current, report.conductance);
    // The summand has kinks on grid nodes, so the quadrature error is O(N^-2).
    let fine_grid = TorusGrid::new(d, 2 * data.grid().points())?;
    if fine_grid.len() <= RICHARDSON_MAX_NODES {
        let fine_data = dispersion(cx.dynamics.interaction(), fine_grid, None)?;
        let fine = gibbs_limit_current(&fine_data, tc.t_plus, tc.t_minus, SIGN_TOL)[d - 1];
        let coarse = gibbs[d - 1];
        detail.push_str(&format!(
            ", 2N quadrature {fine:.12}, Richardson {:.12}",
            (4.0 * fine - coarse) / 3.0
        ));
    }
    cx.checks.push(CheckRecord {
        name: "second-law".into(),
        pass: report.verdict == Verdict::Pass,
        detail,
    });
    let verdict = if report.verdict == Verdict::Pass { "PASS" } else { "FAIL" };
    let table = cx.table("current", current_header());
    let c = report.conductance.map(|c| table.float(c)).unwrap_or_else(|| "".into());
    let row = vec![
        "second-law".into(),
        d.into(),
        "inf".into(),
        "".into(),
        table.float(report.current),
        table.float(0.0),
        false.into(),
        verdict.into(),
        c,
    ];
    table.push(row)
}

fn run_clt(cx: &mut Context) -> Result<()> {
    let ensemble = cx.ensemble()?.clone();
    let psi = cx.test_function()?.clone();
    let header = [
        "t", "row", "lambda", "ecf_re", "ecf_re_se", "ecf_im", "ecf_im_se", "target", "value", "stderr", "beyond_horizon",
    ];
    let mut table = Table::new(header, cx.digits);
    let times = cx.config.times.clone();
    let last = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &t in &times {
        let flag = cx.beyond(t, "clt");
        let r = clt_diagnostics(
            &ensemble,
            &cx.dynamics,
            &psi,
            t,
            cx.config.ensemble.samples.max(2),
            cx.config.ensemble.master_seed,
            &cx.config.clt.lambda_factors,
        )?;
        for e in &r.ecf {
            let row = vec![
                table.float(t),
                "ecf".into(),
                table.float(e.lambda),
                table.float(e.re.value),
                table.float(e.re.stderr),
                table.float(e.im.value),
                table.float(e.im.stderr),
                table.float(e.target),
                "".into(),
                "".into(),
                flag.into(),
            ];
            table.push(row)?;
        }
        let mut scalars = vec![
            ("q_limit", r.q_limit, 0.0),
            ("mean", r.moments.mean.value, r.moments.mean.stderr),
            ("variance", r.moments.variance.value, r.moments.variance.stderr),
            ("skewness", r.moments.skewness.value, r.moments.skewness.stderr),
            ("excess_kurtosis", r.moments.excess_kurtosis.value, r.moments.excess_kurtosis.stderr),
        ];
        if let InitialMeasure::Stationary(q) = ensemble.covariance_measure()? {
            scalars.push(("q_t", quadratic_form_at(&q, cx.dynamics.dispersion(), &psi, t)?, 0.0));
        }
        for (name, value, se) in scalars {
            let row = vec![
                table.float(t),
                name.into(),
                "".into(),
                "".into(),
                "".into(),
                "".into(),
                "".into(),
                "".into(),
                table.float(value),
                table.float(se),
                flag.into(),
            ];
            table.push(row)?;
        }
        if t == last {
            let worst = r.ecf.iter().map(|e| e.z_score()).fold(0.0, f64::max);
            cx.checks.push(CheckRecord {
                name: format!("clt-ecf t={t}"),
                pass: worst <= 5.0,
                detail: format!("largest ECF deviation {worst:.2} SE"),
            });
        }
    }
    cx.tables.insert("clt", table);
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayRow {
    pub t: f64,
    pub sup_norm: f64,
    /// Largest `|Φ|` beyond the light cone relative to the peak.
    pub tail_ratio: f64,
    pub beyond_horizon: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    /// Least-squares slope of `log sup|Φ|` against `log t`.
    pub slope: f64,
    pub intercept: f64,
}

/// Evolves `Ψ` under the conjugate flow and fits the decay of `sup_x |Φ(x, t)|`.
///
/// The light cone at time `t` is `‖x‖_∞ ≤ R + 1.5 v̄ t` with `R` the support
/// radius of `Ψ` and `v̄` the largest group speed.
pub fn decay_probe(dynamics: &Dynamics, psi: &TestFunction, times: &[f64]) -> Result<DecayReport> {
    if !psi.certified {
        return Err(Error::TestFunctionRejected {
            reason: format!("spectral leak {:e} onto the critical set is too large", psi.leak),
        });
    }
    if times.len() < 2 || times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidInput("the decay fit needs at least two positive times".into()));
    }
    let g = dynamics.grid();
    let n = psi.field().components();
    let speed = dynamics.dispersion().max_group_speed();
    let h = horizon(dynamics.dispersion());
    let radii: Vec<f64> = (0..g.len())
        .map(|s| g.signed_coords(s).iter().map(|c| c.abs()).max().unwrap_or(0) as f64)
        .collect();
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let phi: FieldState = dynamics.evolve_conjugate(psi.field(), t)?;
        let cone = psi.radius() as f64 + 1.5 * speed * t;
        let mut peak: f64 = 0.0;
        let mut tail: f64 = 0.0;
        for (site, &r) in radii.iter().enumerate() {
            let m = (0..n)
                .map(|a| phi.u[site * n + a].abs().max(phi.v[site * n + a].abs()))
                .fold(0.0, f64::max);
            peak = peak.max(m);
            if r > cone {
                tail = tail.max(m);
            }
        }
        rows.push(DecayRow {
            t,
            sup_norm: peak,
            tail_ratio: tail / peak,
            beyond_horizon: t > h,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.t.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.sup_norm.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(DecayReport {
        rows,
        slope,
        intercept: my - slope * mx,
    })
}

fn run_decay(cx: &mut Context) -> Result<()> {
    let psi = cx.test_function()?.clone();
    let times = cx.config.times.clone();
    for &t in &times {
        cx.beyond(t, "decay");
    }
    let report = decay_probe(&cx.dynamics, &psi, &times)?;
    let mut table = Table::new(["row", "t", "value", "beyond_horizon"], cx.digits);
    for r in &report.rows {
        let t = table.float(r.t);
        table.push(vec!["sup_norm".into(), t.clone(), table.float(r.sup_norm), r.beyond_horizon.into()])?;
        table.push(vec!["tail_ratio".into(), t, table.float(r.tail_ratio), r.beyond_horizon.into()])?;
    }
    table.push(vec!["slope".into(), "fit".into(), table.float(report.slope), false.into()])?;
    let d = cx.grid().dim() as f64;
    let tail = report.rows.iter().map(|r| r.tail_ratio).fold(0.0, f64::max);
    cx.checks.push(CheckRecord {
        name: "decay-slope".into(),
        pass: (report.slope + 0.5 * d).abs() <= 0.15,
        detail: format!("slope {:.4}, expected {:.1} ± 0.15", report.slope, -0.5 * d),
    });
    cx.checks.push(CheckRecord {
        name: "decay-light-cone".into(),
        pass: tail < 1e-6,
        detail: format!("largest tail ratio {tail:e}"),
    });
    cx.tables.insert("decay", table);
    Ok(())
}

/// Runs the requested tasks in dependency order and writes the bundle to
/// `config.output.dir`. Task failures are recorded in the report and the
/// manifest; the remaining tasks still run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let v = config.model.build().map_err(|e| config_error("/model", e.to_string()))?;
    let grid = TorusGrid::new(v.dim(), config.grid.n).map_err(|e| config_error("/grid/N", e.to_string()))?;
    let dynamics = Dynamics::new(v, grid)?;
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;

    let mut tasks = config.observables.clone();
    tasks.sort_unstable();
    tasks.dedup();

    let mut cx = Context {
        config,
        horizon: horizon(dynamics.dispersion()),
        dynamics,
        digits: config.output.precision,
        warnings: Vec::new(),
        checks: Vec::new(),
        tables: BTreeMap::new(),
        ensemble: None,
        psi: None,
    };
    let mut errors = Vec::new();
    for task in &tasks {
        log::info!("running task {}", task.name());
        let result = match task {
            Task::Dispersion => run_dispersion(&mut cx),
            Task::Check => run_check(&mut cx),
            Task::Evolve => run_evolve(&mut cx),
            Task::Covariance => run_covariance(&mut cx),
            Task::LimitCov => run_limit_cov(&mut cx),
            Task::Current => run_current(&mut cx),
            Task::SecondLaw => run_second_law(&mut cx),
            Task::Clt => run_clt(&mut cx),
            Task::Decay => run_decay(&mut cx),
        };
        if let Err(e) = result {
            log::error!("task {} failed: {e}", task.name());
            // The current table is shared, so rows from other tasks stay.
            if !matches!(task, Task::Current | Task::SecondLaw) {
                cx.tables.remove(table_name(*task));
            }
            errors.push(TaskError {
                task: task.name().into(),
                message: e.to_string(),
            });
        }
    }

    let mut files = Vec::new();
    for (name, table) in &cx.tables {
        let file = format!("{name}.csv");
        table.write(&out_dir.join(&file))?;
        files.push(file);
    }
    files.push("manifest.json".into());

    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = serde_json::json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config.hash(),
        "config": config,
        "master_seed": config.ensemble.master_seed,
        "samples": config.ensemble.samples,
        "rng": "ChaCha8, stream = sample index",
        "threads": rayon::current_num_threads(),
        "horizon": cx.horizon,
        "tasks": tasks.iter().map(|t| t.name()).collect::<Vec<_>>(),
        "files": files,
        "warnings": cx.warnings,
        "errors": errors,
        "checks": cx.checks,
        "created_unix": created,
    });
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    Ok(RunReport {
        out_dir,
        files,
        warnings: cx.warnings,
        errors,
        checks: cx.checks,
    })
}

fn table_name(task: Task) -> &'static str {
    match task {
        Task::Dispersion => "dispersion",
        Task::Check => "check",
        Task::Evolve => "evolve",
        Task::Covariance => "covariance",
        Task::LimitCov => "limit_covariance",
        Task::Current | Task::SecondLaw => "current",
        Task::Clt => "clt",
        Task::Decay => "decay",
    }
}
