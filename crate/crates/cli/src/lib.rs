//! Experiment runner for `fluidnet`.
//!
//! [`run`] takes an [`ExperimentConfig`] and writes CSV files into an output
//! directory. Every file starts with `#` comment lines holding the code
//! version and the full configuration as TOML, so [`parse_header`] recovers
//! the exact configuration from any output. Nothing time- or
//! machine-dependent is written, so reruns with the same seed are
//! byte-identical regardless of the worker count.

pub mod config;
pub mod density;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fluidnet::analytics::{bahadur_rao_p, predicted_runs, run_constant, solve_twist};
use fluidnet::model::{ModulatedNetworkSpec, NetworkSpec, RareTarget};
use fluidnet::modulation::{solve_path_twist, BackgroundPath};
use fluidnet::moments::{
    jump_shot_first_moment, jump_shot_stationary_first_moment, node_means, stationary_mean_covariance,
    transient_second_moment,
};
use fluidnet::simulate::{
    estimate_is, estimate_mc, estimate_modulated_is, estimate_modulated_mc, sweep, sweep_csv, Estimate,
    ModulatedEstimate, RunRecord,
};
use fluidnet::twist::TwistPlan;

pub use config::{ExperimentConfig, Mode, MomentsConfig, PathConfig, Subject};
pub use density::{emit_density_curves, DensitySource};

/// Version string written into every output header.
pub const VERSION: &str = concat!("fluidnet-cli ", env!("CARGO_PKG_VERSION"));

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CAPPED: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(fluidnet::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) | CliError::Io(_) => EXIT_NUMERIC,
        }
    }
}

impl From<fluidnet::Error> for CliError {
    fn from(e: fluidnet::Error) -> Self {
        use fluidnet::Error as E;
        match e {
            E::InvalidSpec(_) | E::InvalidArgument(_) | E::RarityViolated { .. } => CliError::Config(e.to_string()),
            other => CliError::Numeric(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Execution settings that are not part of the experiment itself and are
/// therefore not echoed into outputs.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: usize,
}

/// What a successful run produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Some estimate stopped at the run cap.
    pub capped: bool,
    /// Human-readable summary for the terminal.
    pub summary: String,
}

/// The `#` header written at the top of every output file.
pub fn header(cfg: &ExperimentConfig) -> String {
    let mut out = format!("# {VERSION}\n");
    for line in cfg.to_toml().lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            let _ = writeln!(out, "# {line}");
        }
    }
    out
}

/// Recovers the configuration echoed at the top of an output file.
pub fn parse_header(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.starts_with("# fluidnet-cli ") => {}
        _ => return Err(CliError::Config("missing version line".into())),
    }
    let mut toml_text = String::new();
    for line in lines.take_while(|l| l.starts_with('#')) {
        let body = line.strip_prefix("# ").unwrap_or(&line[1..]);
        toml_text.push_str(body);
        toml_text.push('\n');
    }
    ExperimentConfig::from_toml(&toml_text)
}

/// Runs an experiment and returns the process exit code. A numerical failure
/// leaves `diagnostic.txt` in the output directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> i32 {
    match execute(cfg, opts) {
        Ok(outcome) => {
            if !outcome.summary.is_empty() {
                print!("{}", outcome.summary);
            }
            if outcome.capped {
                eprintln!("warning: the run cap was reached before the requested precision");
                EXIT_CAPPED
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == EXIT_NUMERIC {
                let text = format!("{}error: {e}\ndetail: {e:?}\n", header(cfg));
                let path = opts.out.join("diagnostic.txt");
                if std::fs::create_dir_all(&opts.out).and_then(|_| std::fs::write(&path, text)).is_ok() {
                    eprintln!("diagnostics written to {}", path.display());
                }
            }
            e.exit_code()
        }
    }
}

/// Runs an experiment, writing its outputs.
pub fn execute(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome, CliError> {
    let (mode, seed) = cfg.validate()?;
    if opts.workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    std::fs::create_dir_all(&opts.out)?;
    let mut writer = Writer {
        dir: &opts.out,
        header: header(cfg),
        outcome: Outcome::default(),
    };
    let target = RareTarget::new(cfg.target.clone());
    match (mode, cfg.subject()?) {
        (Mode::Is | Mode::Mc, Subject::Plain(spec)) => plain_estimates(cfg, opts, spec, &target, mode, seed, &mut writer)?,
        (Mode::Is | Mode::Mc | Mode::Decay, Subject::Modulated(spec)) => {
            modulated_estimates(cfg, opts, spec, &target, mode, seed, &mut writer)?
        }
        (Mode::Sweep, Subject::Plain(spec)) => {
            let rows = sweep(spec, &target, &cfg.n, &cfg.precision(opts.workers), seed)?;
            writer.outcome.capped |= rows.iter().any(|r| r.capped);
            writer.write("sweep.csv", &sweep_csv(&rows))?;
        }
        (Mode::TwistInfo, Subject::Plain(spec)) => plain_twist_info(cfg, spec, &target, &mut writer)?,
        (Mode::TwistInfo, Subject::Modulated(spec)) => modulated_twist_info(cfg, spec, &target, &mut writer)?,
        (Mode::Moments, Subject::Plain(spec)) => moments(cfg, &ModulatedNetworkSpec::from_network(spec), &mut writer)?,
        (Mode::Moments, Subject::Modulated(spec)) => moments(cfg, spec, &mut writer)?,
        (Mode::Sweep, Subject::Modulated(_)) | (Mode::Decay, Subject::Plain(_)) => {
            unreachable!("rejected by validation")
        }
    }
    Ok(writer.outcome)
}

struct Writer<'a> {
    dir: &'a Path,
    header: String,
    outcome: Outcome,
}

impl Writer<'_> {
    fn write(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, format!("{}{body}", self.header))?;
        self.outcome.files.push(path);
        Ok(())
    }

    fn say(&mut self, line: String) {
        self.outcome.summary.push_str(&line);
        self.outcome.summary.push('\n');
    }
}

const ESTIMATE_COLUMNS: &str = "n,p_hat,half_width,relative_half_width,runs,capped,seed";

fn estimate_row(n: u64, e: &Estimate) -> String {
    format!(
        "{n},{:e},{:e},{},{},{},{}",
        e.p_hat,
        e.half_width,
        e.relative_half_width(),
        e.runs,
        e.capped,
        e.master_seed
    )
}

fn plain_estimates(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    spec: &NetworkSpec,
    target: &RareTarget,
    mode: Mode,
    seed: u64,
    w: &mut Writer,
) -> Result<(), CliError> {
    let precision = cfg.precision(opts.workers);
    let mut csv = format!("{ESTIMATE_COLUMNS}\n");
    for &n in &cfg.n {
        let est = if mode == Mode::Is {
            estimate_is(spec, target, n, &precision, seed)?
        } else {
            estimate_mc(spec, target, n, &precision, seed)?
        };
        w.outcome.capped |= est.capped;
        w.say(format!("n={n} p_hat={:.6e} ± {:.3e} runs={}", est.p_hat, est.half_width, est.runs));
        csv.push_str(&estimate_row(n, &est));
        csv.push('\n');
    }
    w.write("estimates.csv", &csv)
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Per-run diagnostics of a modulated estimate; lists inside a cell are
/// separated by `;`.
pub fn runs_csv(n: u64, records: &[RunRecord]) -> String {
    let mut out = String::from("n,index,path,rate,hit,log_lr,theta,counts,q_means,p_means\n");
    for r in records {
        let _ = writeln!(
            out,
            "{n},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.path,
            r.rate,
            r.hit,
            r.log_lr,
            join(&r.theta),
            join(&r.counts),
            join(&r.q_means),
            join(&r.p_means)
        );
    }
    out
}

fn modulated_estimates(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    spec: &ModulatedNetworkSpec,
    target: &RareTarget,
    mode: Mode,
    seed: u64,
    w: &mut Writer,
) -> Result<(), CliError> {
    let precision = cfg.precision(opts.workers);
    let decay = mode == Mode::Decay;
    let mut csv = format!("{ESTIMATE_COLUMNS},decay_estimate,best_path,best_rate,best_theta\n");
    let mut runs = String::new();
    let mut last: Option<ModulatedEstimate> = None;
    for &n in &cfg.n {
        let est = if mode == Mode::Mc {
            estimate_modulated_mc(spec, target, n, &precision, seed, cfg.record_runs)?
        } else {
            estimate_modulated_is(spec, target, n, &precision, seed, cfg.record_runs)?
        };
        let e = &est.estimate;
        w.outcome.capped |= e.capped;
        let decay_estimate = -e.p_hat.ln() / n as f64;
        let (path, rate, theta) = match &est.best.best {
            Some((p, r, th)) => (p.to_string(), r.to_string(), join(th.iter())),
            None => (String::new(), String::new(), String::new()),
        };
        w.say(format!(
            "n={n} p_hat={:.6e} ± {:.3e} runs={} best_path={path} best_rate={rate}",
            e.p_hat, e.half_width, e.runs
        ));
        let _ = writeln!(csv, "{},{decay_estimate},{path},{rate},{theta}", estimate_row(n, e));
        if cfg.record_runs {
            let body = runs_csv(n, &est.records);
            if runs.is_empty() {
                runs = body;
            } else {
                runs.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
            }
        }
        last = Some(est);
    }
    w.write(if decay { "decay.csv" } else { "estimates.csv" }, &csv)?;
    if cfg.record_runs {
        w.write("runs.csv", &runs)?;
    }
    if decay {
        if let Some((path, _, _)) = last.and_then(|e| e.best.best) {
            let twist = solve_path_twist(&path, spec, target, None)?;
            w.write("density.csv", &emit_density_curves(DensitySource::Path(&twist), cfg.density_points))?;
        }
    }
    Ok(())
}

fn plain_twist_info(cfg: &ExperimentConfig, spec: &NetworkSpec, target: &RareTarget, w: &mut Writer) -> Result<(), CliError> {
    let sol = solve_twist(spec, target)?;
    let plan = TwistPlan::build(spec, &sol, target)?;
    let alpha = run_constant(&sol, cfg.eps, cfg.crit);
    let mut csv = String::from("quantity,value\n");
    for (i, v) in sol.theta_star.iter().enumerate() {
        let _ = writeln!(csv, "theta_star_{},{v}", i + 1);
    }
    for (i, v) in sol.b_star.iter().enumerate() {
        let _ = writeln!(csv, "b_star_{},{v}", i + 1);
    }
    let _ = writeln!(csv, "rate,{}", sol.rate);
    let _ = writeln!(csv, "log_mgf,{}", sol.log_mgf);
    let _ = writeln!(csv, "active_count,{}", sol.d());
    let _ = writeln!(csv, "tau,{}", sol.tau);
    let _ = writeln!(csv, "alpha,{alpha}");
    let _ = writeln!(csv, "q_arrival_mean,{}", plan.poisson_mean_q());
    let _ = writeln!(csv, "p_arrival_mean,{}", spec.lambda * spec.horizon);
    for &n in &cfg.n {
        let nf = n as f64;
        let _ = writeln!(csv, "bahadur_rao_{n},{}", bahadur_rao_p(&sol, nf));
        let _ = writeln!(csv, "predicted_runs_{n},{}", predicted_runs(&sol, nf, cfg.eps, cfg.crit));
    }
    w.say(format!(
        "theta*={} tau={:.4} rate={:.6} q_rate={:.4} alpha={:.1}",
        join(sol.theta_star.iter().map(|v| format!("{v:.4}"))),
        sol.tau,
        sol.rate,
        plan.poisson_mean_q(),
        alpha
    ));
    w.write("twist_info.csv", &csv)?;
    w.write("density.csv", &emit_density_curves(DensitySource::Plan(&plan), cfg.density_points))
}

fn modulated_twist_info(
    cfg: &ExperimentConfig,
    spec: &ModulatedNetworkSpec,
    target: &RareTarget,
    w: &mut Writer,
) -> Result<(), CliError> {
    spec.check()?;
    let path = match &cfg.path {
        Some(p) => {
            let path = BackgroundPath {
                jump_times: p.jump_times.clone(),
                states: p.states.clone(),
                horizon: spec.horizon,
            };
            path.validate()?;
            if path.states.iter().any(|&s| s >= spec.state_count()) {
                return Err(CliError::Config("path state out of range".into()));
            }
            path
        }
        None => BackgroundPath::constant(spec.initial_state, spec.horizon),
    };
    let twist = solve_path_twist(&path, spec, target, None)?;
    let mut csv = String::from("quantity,value\n");
    let _ = writeln!(csv, "path,{path}");
    for (i, v) in twist.theta_star().iter().enumerate() {
        let _ = writeln!(csv, "theta_star_{},{v}", i + 1);
    }
    let _ = writeln!(csv, "rate,{}", twist.rate());
    let _ = writeln!(csv, "tau,{}", twist.solution.tau);
    for (i, (q, p)) in twist.poisson_means_q().iter().zip(twist.poisson_means_p()).enumerate() {
        let _ = writeln!(csv, "q_mean_segment_{},{q}", i + 1);
        let _ = writeln!(csv, "p_mean_segment_{},{p}", i + 1);
    }
    w.say(format!(
        "path={path} theta*={} rate={:.6}",
        join(twist.theta_star().iter().map(|v| format!("{v:.4}"))),
        twist.rate()
    ));
    w.write("twist_info.csv", &csv)?;
    w.write("density.csv", &emit_density_curves(DensitySource::Path(&twist), cfg.density_points))
}

fn moments(cfg: &ExperimentConfig, spec: &ModulatedNetworkSpec, w: &mut Writer) -> Result<(), CliError> {
    let mc = cfg.moments.clone().unwrap_or(MomentsConfig {
        x0: Vec::new(),
        t_end: None,
        steps: 100,
        jump_shot: false,
    });
    let l = spec.nodes();
    let x0 = if mc.x0.is_empty() { vec![0.0; l] } else { mc.x0.clone() };
    let t_end = mc.t_end.unwrap_or(spec.horizon);
    let grid: Vec<f64> = (0..=mc.steps).map(|k| t_end * k as f64 / mc.steps as f64).collect();
    let state = transient_second_moment(spec, &x0, &grid)?;
    w.write("moments.csv", &state.to_csv())?;

    let (mean, cov) = stationary_mean_covariance(spec)?;
    let mut csv = String::from("quantity,value\n");
    for a in 0..l {
        let _ = writeln!(csv, "mean_{},{}", a + 1, mean[a]);
    }
    for a in 0..l {
        for b in a..l {
            let _ = writeln!(csv, "cov_{}_{},{}", a + 1, b + 1, cov[(a, b)]);
        }
    }
    w.write("stationary.csv", &csv)?;
    w.say(format!("stationary mean: {}", join(mean.iter())));

    if mc.jump_shot {
        let js = jump_shot_first_moment(spec, &x0, &grid)?;
        let stat = node_means(&jump_shot_stationary_first_moment(spec)?, spec.state_count(), l);
        let mut body = js.to_csv();
        let _ = write!(body, "inf");
        for v in stat.iter() {
            let _ = write!(body, ",{v:.12e}");
        }
        body.push('\n');
        w.write("jump_shot.csv", &body)?;
    }
    Ok(())
}
