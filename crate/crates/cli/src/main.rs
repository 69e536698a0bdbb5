use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use phononflux::covariance::TestFunctionSpec;
use phononflux::random_fields::DensitySpec;
use phononflux::runner::{run_experiment, ExperimentConfig, Task, TemperatureConfig};
use phononflux::{Error, ModelSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ASSERT: u8 = 4;

#[derive(Parser)]
#[command(name = "phononflux", version, about = "Spectral experiments on harmonic crystals")]
struct Cli {
    /// Worker threads (default: PHONONFLUX_THREADS or all cores).
    #[arg(long, global = true, env = "PHONONFLUX_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump ω and ∇ω on the grid with the critical mask.
    Dispersion(Common),
    /// Numeric checks of the standing conditions on the crystal.
    Check(Common),
    /// Evolve one sample of the initial measure.
    Evolve(Common),
    /// Covariance near the origin at the given times.
    Covariance(Common),
    /// Limit covariance on the grid.
    LimitCov(Common),
    /// Mean energy current: Monte Carlo, exact and limit.
    Current(Common),
    /// Limit current of two Gibbs halves and the hot-to-cold verdict.
    SecondLaw(Common),
    /// Gaussianity diagnostics of ⟨Y(t), Ψ⟩.
    Clt(Common),
    /// Sup-norm decay of the conjugate flow of Ψ.
    Decay(Common),
    /// Run an experiment described by a JSON file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Grid points per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble size.
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 4 when any recorded check fails.
    #[arg(long = "assert")]
    assert_checks: bool,
}

#[derive(Args, Clone)]
struct Common {
    #[command(flatten)]
    overrides: Overrides,
    /// Model as inline JSON or a path to a JSON file.
    #[arg(long)]
    model: Option<String>,
    /// Dimension of the default elastic model.
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Mass of the default elastic model.
    #[arg(long, default_value_t = 1.0)]
    mass: f64,
    /// Observation times.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    /// Temperature on the `x_d > 0` side.
    #[arg(long)]
    t_plus: Option<f64>,
    /// Temperature on the `x_d < 0` side.
    #[arg(long)]
    t_minus: Option<f64>,
    /// Width of the gluing ramp.
    #[arg(long, default_value_t = 0)]
    cutoff: usize,
    /// Stationary density as inline JSON, e.g. '{"type":"triangular","N0":8}'.
    #[arg(long)]
    density: Option<String>,
    /// Clip level of the odd pointwise transform.
    #[arg(long)]
    clip: Option<f64>,
    /// Centre of the test-function spectrum.
    #[arg(long, value_delimiter = ',')]
    theta0: Vec<f64>,
    /// Spectral radius of the test function.
    #[arg(long)]
    width: Option<f64>,
    /// Spatial truncation radius of the test function.
    #[arg(long)]
    support_radius: Option<usize>,
    /// Measuring-plane offsets for currents.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    offsets: Vec<i64>,
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> Result<T, Error> {
    let body = if text.trim_start().starts_with('{') {
        text.to_string()
    } else {
        std::fs::read_to_string(text)?
    };
    serde_json::from_str(&body).map_err(|e| Error::Config {
        pointer: format!("--{what}"),
        message: e.to_string(),
    })
}

impl Common {
    fn config(&self, task: Task) -> Result<ExperimentConfig, Error> {
        let model = match &self.model {
            Some(m) => parse_json("model", m)?,
            None => ModelSpec::elastic(self.dim, self.mass),
        };
        let mut c = ExperimentConfig::new(model, self.overrides.grid.unwrap_or(64));
        c.observables = vec![task];
        c.times = self.times.clone();
        c.clip = self.clip;
        if let (Some(tp), Some(tm)) = (self.t_plus, self.t_minus) {
            c.temperatures = Some(TemperatureConfig {
                t_plus: tp,
                t_minus: tm,
                cutoff_a: self.cutoff,
            });
        } else if self.t_plus.is_some() || self.t_minus.is_some() {
            return Err(Error::Config {
                pointer: "--t-plus/--t-minus".into(),
                message: "give both temperatures".into(),
            });
        }
        if let Some(d) = &self.density {
            c.density = Some(parse_json::<DensitySpec>("density", d)?);
        }
        if let Some(w) = self.width {
            c.test_function = Some(TestFunctionSpec {
                theta0: self.theta0.clone(),
                width: w,
                support_radius: self.support_radius,
                polarization: None,
            });
        }
        if !self.offsets.is_empty() {
            c.current.offsets = self.offsets.clone();
        }
        apply(&mut c, &self.overrides);
        c.validate()?;
        Ok(c)
    }
}

fn apply(c: &mut ExperimentConfig, o: &Overrides) {
    if let Some(n) = o.grid {
        c.grid.n = n;
    }
    if let Some(s) = o.seed {
        c.ensemble.master_seed = s;
    }
    if let Some(m) = o.trials {
        c.ensemble.samples = m;
    }
    if let Some(dir) = &o.out {
        c.output.dir = dir.clone();
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_NUMERIC,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let (config, assert_checks) = {
        let built = match &cli.command {
            Command::Run { config, overrides } => ExperimentConfig::from_file(config).map(|mut c| {
                apply(&mut c, overrides);
                (c, overrides.assert_checks)
            }),
            other => {
                let (task, common) = match other {
                    Command::Dispersion(c) => (Task::Dispersion, c),
                    Command::Check(c) => (Task::Check, c),
                    Command::Evolve(c) => (Task::Evolve, c),
                    Command::Covariance(c) => (Task::Covariance, c),
                    Command::LimitCov(c) => (Task::LimitCov, c),
                    Command::Current(c) => (Task::Current, c),
                    Command::SecondLaw(c) => (Task::SecondLaw, c),
                    Command::Clt(c) => (Task::Clt, c),
                    Command::Decay(c) => (Task::Decay, c),
                    Command::Run { .. } => unreachable!(),
                };
                common.config(task).map(|c| (c, common.overrides.assert_checks))
            }
        };
        match built.and_then(|(c, a)| c.validate().map(|_| (c, a))) {
            Ok(x) => x,
            Err(e) => {
                eprintln!("error: {e}");
                return Ok(exit_for(&e));
            }
        }
    };
    let report = match run_experiment(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(exit_for(&e));
        }
    };
    for f in &report.files {
        println!("wrote {}", report.out_dir.join(f).display());
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    for c in &report.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for e in &report.errors {
        eprintln!("task {} failed: {}", e.task, e.message);
    }
    if !report.errors.is_empty() {
        return Ok(EXIT_NUMERIC);
    }
    if assert_checks && !report.all_checks_pass() {
        return Ok(EXIT_ASSERT);
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
