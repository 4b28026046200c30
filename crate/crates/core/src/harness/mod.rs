//! Configuration, presets, dataset generation, benchmarks and artifact
//! emission for the command-line runner.

pub mod artifact;
pub mod config;
pub mod setup;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, McError, PdeError, TrainError};
use crate::featureid::{self, AutoencoderNet};
use crate::montecarlo::{self, GridEstimate, McEstimate};
use crate::neural::Checkpoint;
use crate::pde::{self, FdOptions, FdSolution};
use crate::pinn::{self, DataPoint, Provenance, TrainingDataset};
use crate::reduction;
use crate::sde::{self, ControlPolicy, SimConfig, TrajectoryBatch};
use crate::stats;

pub use config::{
    BenchmarkSpec, DataSource, DataSpec, Estimator, ExperimentConfig, FdBlock, GridSpec, Metric, ReconTarget,
    ReductionSpec, SimBlock, StatesSpec,
};
use config::config_error;
pub use setup::{Setup, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    EstimateValue,
    EstimateSafety,
    SolvePde,
    TrainPinn,
    TrainFeatures,
    Benchmark,
    MakeDataset,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::EstimateValue => "estimate-value",
            Command::EstimateSafety => "estimate-safety",
            Command::SolvePde => "solve-pde",
            Command::TrainPinn => "train-pinn",
            Command::TrainFeatures => "train-features",
            Command::Benchmark => "benchmark",
            Command::MakeDataset => "make-dataset",
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub artifacts: Vec<PathBuf>,
    /// Human-readable result lines.
    pub lines: Vec<String>,
}

pub const DEFAULT_OUT: &str = "out";

/// Fill every block the preset defines and apply the overrides. The result
/// re-resolves to itself.
pub fn resolve(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<ExperimentConfig, Error> {
    let name = cfg.preset;
    let st = Setup::new(name);
    if let Some(s) = overrides.seed {
        cfg.seed = Some(s);
    }
    let seed = *cfg.seed.get_or_insert(0);
    if let Some(o) = &overrides.out {
        cfg.out = Some(o.clone());
    }
    cfg.out.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT));
    if cfg.grid.is_none() {
        cfg.grid = setup::default_grid(name);
    }
    if cfg.sim.is_none() {
        cfg.sim = setup::default_sim(name);
    }
    if cfg.fd.is_none() {
        cfg.fd = setup::default_fd(name);
    }
    if cfg.pinn.is_none() {
        cfg.pinn = setup::default_pinn(name);
    }
    if cfg.data.is_none() {
        cfg.data = setup::default_data(name);
    }
    if let Some((f, s)) = setup::default_features(name) {
        cfg.features.get_or_insert(f);
        cfg.states.get_or_insert(s);
    }
    if cfg.benchmark.is_none() {
        cfg.benchmark = setup::default_benchmark(name);
    }
    if let Some(p) = cfg.pinn.as_mut() {
        p.seed = seed;
    }
    if let Some(f) = cfg.features.as_mut() {
        f.seed = seed;
    }
    validate(&cfg, &st)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig, st: &Setup) -> Result<(), Error> {
    let k = st.k;
    if let Some(g) = &cfg.grid {
        g.validate(k, "grid")?;
    }
    if let Some(d) = &cfg.data {
        d.grid.validate(k, "data.grid")?;
        match (d.source, &d.file) {
            (DataSource::File, None) => return Err(config_error("data.file", "required when source = \"file\"")),
            (DataSource::File, Some(f)) if !f.exists() => {
                return Err(config_error("data.file", format!("{} does not exist", f.display())))
            }
            (s, Some(_)) if s != DataSource::File => {
                return Err(config_error("data.file", "only used when source = \"file\""))
            }
            _ => {}
        }
    }
    if let Some(s) = &cfg.sim {
        if !(s.dt > 0.0) || s.n_paths == 0 {
            return Err(config_error("sim", "dt and n_paths must be positive"));
        }
        if let (Some(x0), Some(sys)) = (&s.x0, &st.system) {
            if x0.len() != sys.state_dim() {
                return Err(config_error("sim.x0", format!("expected {} entries", sys.state_dim())));
            }
        }
    }
    if let Some(f) = &cfg.fd {
        if f.d_xi.len() != k || f.d_xi.iter().any(|h| !(*h > 0.0)) || !(f.dt > 0.0) {
            return Err(config_error("fd", format!("need {k} positive d_xi entries and a positive dt")));
        }
    }
    if let Some(p) = &cfg.pinn {
        p.validate().map_err(|e| config_error("pinn", e.to_string()))?;
        if p.domain.as_ref().is_some_and(|d| d.len() != k) {
            return Err(config_error("pinn.domain", format!("expected {k} intervals")));
        }
    }
    if let Some(f) = &cfg.features {
        f.validate().map_err(|e| config_error("features", e.to_string()))?;
    }
    if let Some(s) = &cfg.states {
        if !(s.step > 0.0 && s.lower <= s.upper) {
            return Err(config_error("states", "need lower <= upper and a positive step"));
        }
    }
    if let Some(b) = &cfg.benchmark {
        if b.sample_counts.is_empty() || b.sample_counts.contains(&0) || b.repetitions == 0 {
            return Err(config_error("benchmark", "sample counts and repetitions must be positive"));
        }
        if b.estimators.contains(&b.oracle) {
            return Err(config_error("benchmark.oracle", "the oracle must differ from the estimators under test"));
        }
        if b.estimators.contains(&Estimator::Pinn) || b.oracle == Estimator::Pinn {
            return Err(config_error("benchmark.estimators", "pinn is not a benchmark estimator"));
        }
        if b.points.is_empty() || b.points.iter().any(|p| p.len() != k + 1) {
            return Err(config_error("benchmark.points", format!("each point needs {} entries (xi..., t)", k + 1)));
        }
    }
    if let ReductionSpec::Learned { checkpoint } = &cfg.reduction {
        if !checkpoint.exists() {
            return Err(config_error(
                "reduction.checkpoint",
                format!("{} does not exist", checkpoint.display()),
            ));
        }
    }
    Ok(())
}

fn allowed_estimators(cmd: Command) -> &'static [Estimator] {
    use Estimator::*;
    match cmd {
        Command::EstimateValue | Command::EstimateSafety => &[McReduced, McFull],
        Command::SolvePde => &[Fd, Riccati],
        Command::TrainPinn => &[Pinn],
        Command::MakeDataset => &[McReduced, McFull],
        Command::Simulate | Command::TrainFeatures | Command::Benchmark => &[],
    }
}

/// The estimator a command uses: the configured one if it applies, else the
/// command's default.
fn pick_estimator(cmd: Command, cfg: &ExperimentConfig) -> Result<Option<Estimator>, Error> {
    let allowed = allowed_estimators(cmd);
    match cfg.estimator {
        Some(e) if allowed.contains(&e) => Ok(Some(e)),
        Some(e) if !allowed.is_empty() && cmd != Command::MakeDataset => Err(config_error(
            "estimator",
            format!(
                "`{}` cannot run `{}` (expected one of {})",
                cmd.as_str(),
                e.as_str(),
                allowed.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(", ")
            ),
        )),
        _ => Ok(allowed.first().copied()),
    }
}

/// Resolve `cfg` and run `cmd`, writing artifacts under the output directory.
pub fn run(cmd: Command, cfg: ExperimentConfig, overrides: &Overrides) -> Result<RunSummary, Error> {
    let mut cfg = resolve(cfg, overrides)?;
    let est = pick_estimator(cmd, &cfg)?;
    if est.is_some() && cmd != Command::MakeDataset {
        cfg.estimator = est;
    }
    let ctx = Ctx {
        st: Setup::new(cfg.preset),
        toml: cfg.to_toml(),
        seed: cfg.seed.unwrap_or(0),
        out: cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        cfg,
    };
    match cmd {
        Command::Simulate => ctx.simulate(),
        Command::EstimateValue => ctx.estimate(Task::Value, est.expect("mc estimator")),
        Command::EstimateSafety => ctx.estimate(Task::Safety, est.expect("mc estimator")),
        Command::SolvePde => ctx.solve_pde(est.expect("pde estimator")),
        Command::TrainPinn => ctx.train_pinn(),
        Command::TrainFeatures => ctx.train_features(),
        Command::Benchmark => ctx.benchmark(),
        Command::MakeDataset => ctx.make_dataset(),
    }
}

/// Load a config from a TOML file or an artifact and run it.
pub fn run_file(cmd: Command, path: &Path, overrides: &Overrides) -> Result<RunSummary, Error> {
    run(cmd, ExperimentConfig::load(path)?, overrides)
}

struct Ctx {
    cfg: ExperimentConfig,
    st: Setup,
    toml: String,
    seed: u64,
    out: PathBuf,
}

fn missing(what: &str, preset: crate::presets::PresetName) -> Error {
    config_error(what, format!("preset `{preset}` does not define this"))
}

/// Wrapper for a saved encoder/decoder pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AutoencoderFile {
    encoder: Checkpoint,
    decoder: Checkpoint,
}

pub fn load_autoencoder(path: &Path) -> Result<AutoencoderNet, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| config_error(&path.display().to_string(), e.to_string()))?;
    let file: AutoencoderFile = serde_json::from_value(serde_json::json!({
        "encoder": v.get("encoder"),
        "decoder": v.get("decoder"),
    }))
    .map_err(|e| config_error(&path.display().to_string(), format!("not an autoencoder checkpoint: {e}")))?;
    Ok(AutoencoderNet::from_parts(
        file.encoder.into_network()?,
        file.decoder.into_network()?,
    )?)
}

/// Load a PINN checkpoint written by `train-pinn`.
pub fn load_pinn(path: &Path) -> Result<crate::neural::DenseNetwork, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| config_error(&path.display().to_string(), e.to_string()))?;
    let c: Checkpoint = serde_json::from_value(v.get("network").cloned().unwrap_or(v))
        .map_err(|e| config_error(&path.display().to_string(), format!("not a network checkpoint: {e}")))?;
    Ok(c.into_network()?)
}

fn mc(e: McError) -> Error {
    Error::Mc(e)
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn csv(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<PathBuf, Error> {
        artifact::write_csv(&self.path(name), &self.toml, self.seed, f)
    }

    fn json<T: Serialize>(&self, name: &str, payload: &T) -> Result<PathBuf, Error> {
        artifact::write_json(&self.path(name), &self.toml, self.seed, payload)
    }

    fn sim(&self) -> Result<&SimBlock, Error> {
        self.cfg.sim.as_ref().ok_or_else(|| missing("sim", self.cfg.preset))
    }

    fn grid(&self) -> Result<&GridSpec, Error> {
        self.cfg.grid.as_ref().ok_or_else(|| missing("grid", self.cfg.preset))
    }

    fn lift(&self, xi: &[f64]) -> Result<Vec<f64>, Error> {
        self.st.lift.map(|f| f(xi)).ok_or_else(|| missing("full-state lift", self.cfg.preset))
    }

    fn simulate(&self) -> Result<RunSummary, Error> {
        let sim = self.sim()?;
        let horizon = sim.horizon.unwrap_or(self.st.horizon);
        let sc = SimConfig::new(sim.dt, horizon, self.seed, sim.n_paths);
        let xi0 = self.grid()?.tensor().space_points()[0].clone();
        let mut lines = Vec::new();
        let batch = match (&self.cfg.reduction, sim.reduced) {
            (ReductionSpec::Analytic, true) => {
                let red = self.st.reduced.as_ref().ok_or_else(|| missing("reduced model", self.cfg.preset))?;
                sde::simulate_reduced(red, &xi0, &sc)?
            }
            (ReductionSpec::Analytic, false) => {
                let sys = self.st.system.as_ref().ok_or_else(|| missing("system", self.cfg.preset))?;
                let x0 = match &sim.x0 {
                    Some(x) => x.clone(),
                    None => self.lift(&xi0)?,
                };
                sde::simulate(sys, &ControlPolicy::Zero, &x0, &sc)?
            }
            (ReductionSpec::Learned { checkpoint }, _) => {
                let ae = load_autoencoder(checkpoint)?;
                let sys = self.st.system.as_ref().ok_or_else(|| missing("system", self.cfg.preset))?;
                let x0 = match &sim.x0 {
                    Some(x) => x.clone(),
                    None => self.lift(&xi0)?,
                };
                if ae.n() != sys.state_dim() {
                    return Err(config_error(
                        "reduction.checkpoint",
                        format!("encoder takes {} inputs, system has {}", ae.n(), sys.state_dim()),
                    ));
                }
                let full = sde::simulate(sys, &ControlPolicy::Zero, &x0, &sc)?;
                lines.push(format!("projected {} paths through the learned encoder", full.n_paths));
                project(&full, &ae)
            }
        };
        let p = self.csv("trajectories.csv", |w| batch.write_csv(w))?;
        lines.push(format!(
            "{} paths x {} steps of dimension {}",
            batch.n_paths,
            batch.n_steps(),
            batch.dim
        ));
        Ok(RunSummary {
            artifacts: vec![p],
            lines,
        })
    }

    fn check_task(&self, task: Task) -> Result<(), Error> {
        if self.st.task != task {
            return Err(config_error(
                "preset",
                format!("preset `{}` is not a {:?} problem", self.cfg.preset, task).to_lowercase(),
            ));
        }
        Ok(())
    }

    /// `V` (value task) or `F` (safety task) at one point.
    fn mc_point(&self, est: Estimator, xi: &[f64], t: f64, n_paths: usize, seed: u64) -> Result<McEstimate, Error> {
        let sim = self.sim()?;
        let sc = SimConfig::new(sim.dt, self.st.horizon, seed, n_paths);
        let exact = |value: f64| McEstimate {
            value,
            std_error: 0.0,
            n_samples: n_paths,
        };
        let preset = self.cfg.preset;
        match self.st.task {
            Task::Value => {
                let h = self.st.horizon;
                match est {
                    Estimator::McFull => {
                        let sys = self.st.system.as_ref().ok_or_else(|| missing("system", preset))?;
                        let cost = self.st.cost.as_ref().ok_or_else(|| missing("cost", preset))?;
                        let x = self.lift(xi)?;
                        if t >= h {
                            return Ok(exact(cost.terminal_weight * (cost.running)(&x)));
                        }
                        montecarlo::value_pathintegral(sys, &x, t, h, cost, &sc).map_err(mc)
                    }
                    Estimator::McReduced => {
                        let red = self.st.reduced.as_ref().ok_or_else(|| missing("reduced model", preset))?;
                        let cost = self.st.reduced_cost.as_ref().ok_or_else(|| missing("reduced cost", preset))?;
                        if t >= h {
                            return Ok(exact(cost.terminal_weight * (cost.running)(xi)));
                        }
                        montecarlo::value_pathintegral_reduced(red, xi, t, h, cost, &sc).map_err(mc)
                    }
                    other => unreachable!("{other:?} is not a Monte Carlo estimator"),
                }
            }
            Task::Safety => {
                let sc = sc.with_horizon(t);
                match est {
                    Estimator::McFull => {
                        let sys = self.st.system.as_ref().ok_or_else(|| missing("system", preset))?;
                        let barrier = self.st.barrier.as_ref().ok_or_else(|| missing("barrier", preset))?;
                        let x = self.lift(xi)?;
                        if !((barrier.phi)(&x) >= 0.0) {
                            return Ok(exact(0.0));
                        }
                        if t <= 0.0 {
                            return Ok(exact(1.0));
                        }
                        montecarlo::safety_mc(sys, &ControlPolicy::Zero, &x, barrier, t, &sc).map_err(mc)
                    }
                    Estimator::McReduced => {
                        let red = self.st.reduced.as_ref().ok_or_else(|| missing("reduced model", preset))?;
                        let r = self.st.reduced_barrier.as_ref().ok_or_else(|| missing("barrier", preset))?;
                        if !(r(xi) >= 0.0) {
                            return Ok(exact(0.0));
                        }
                        if t <= 0.0 {
                            return Ok(exact(1.0));
                        }
                        let levels: &[Option<f64>] = if sim.bridge { &self.st.bridge_levels } else { &[] };
                        montecarlo::safety_mc_reduced_with_bridge(red, xi, r, t, &sc, levels).map_err(mc)
                    }
                    other => unreachable!("{other:?} is not a Monte Carlo estimator"),
                }
            }
        }
    }

    /// Estimates on the grid: `φ = exp(−V)` for value problems, `F` for
    /// safety problems, with standard errors on that scale.
    fn mc_grid(&self, est: Estimator, grid: &GridSpec) -> Result<Vec<GridEstimate>, Error> {
        let n = self.sim()?.n_paths;
        let mut rows = Vec::new();
        for (i, (xi, t)) in grid.tensor().points().into_iter().enumerate() {
            // independent noise per grid point
            let seed = self.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let e = self.mc_point(est, &xi, t, n, seed)?;
            let (estimate, std_error) = match self.st.task {
                Task::Value => {
                    let phi = (-e.value).exp();
                    (phi, phi * e.std_error)
                }
                Task::Safety => (e.value, e.std_error),
            };
            rows.push(GridEstimate {
                xi,
                t,
                estimate,
                std_error,
            });
        }
        Ok(rows)
    }

    fn assumption_report(&self) -> Result<Option<PathBuf>, Error> {
        let (Some(sys), Some(fm), Some(sampler)) = (&self.st.system, &self.st.features, &self.st.sampler) else {
            return Ok(None);
        };
        let mut sampler = sampler.clone();
        sampler.seed = self.seed;
        let rep = reduction::check_assumptions(sys, &ControlPolicy::Zero, fm, &sampler, 1e-9)?;
        Ok(Some(self.json("assumptions.json", &rep)?))
    }

    fn estimate(&self, task: Task, est: Estimator) -> Result<RunSummary, Error> {
        self.check_task(task)?;
        if matches!(self.cfg.reduction, ReductionSpec::Learned { .. }) {
            return Err(config_error("reduction", "learned reductions are supported by `simulate` only"));
        }
        let grid = self.grid()?;
        let rows = self.mc_grid(est, grid)?;
        let k = self.st.k;
        let mut artifacts = vec![self.csv("estimates.csv", |w| montecarlo::write_estimates_csv(&rows, k, w))?];
        if est == Estimator::McReduced {
            artifacts.extend(self.assumption_report()?);
        }
        let lines = rows
            .iter()
            .take(10)
            .map(|r| format!("xi={:?} t={} estimate={:.6} se={:.2e}", r.xi, r.t, r.estimate, r.std_error))
            .collect();
        Ok(RunSummary { artifacts, lines })
    }

    fn solve(&self) -> Result<FdSolution, Error> {
        let problem = self.st.problem.as_ref().ok_or_else(|| missing("pde", self.cfg.preset))?;
        let fd = self.cfg.fd.as_ref().ok_or_else(|| missing("fd", self.cfg.preset))?;
        let mut opts = FdOptions::for_problem(problem);
        opts.store_every = fd.store_every.or(opts.store_every);
        if let Some(r) = fd.rannacher_steps {
            opts.rannacher_steps = r;
        }
        Ok(pde::solve_fd_with(problem, &fd.d_xi, fd.dt, &opts)?)
    }

    fn closed_form(&self, xi: &[f64], t: f64) -> Result<f64, Error> {
        match self.st.closed_form(xi, t) {
            Some(v) => Ok(v?),
            None => Err(config_error(
                "estimator",
                format!("preset `{}` has no closed-form oracle", self.cfg.preset),
            )),
        }
    }

    /// `(ξ, t, value)` over `grid` from the FD solver or the closed form.
    fn deterministic_rows(&self, est: Estimator, grid: &GridSpec) -> Result<Vec<(Vec<f64>, f64, f64)>, Error> {
        let pts = grid.tensor().points();
        match est {
            Estimator::Fd => {
                let sol = self.solve()?;
                pts.into_iter()
                    .map(|(xi, t)| {
                        let v = sol.value_at(&xi, t)?;
                        Ok((xi, t, v))
                    })
                    .collect()
            }
            Estimator::Riccati => pts
                .into_iter()
                .map(|(xi, t)| {
                    let v = self.closed_form(&xi, t)?;
                    Ok((xi, t, v))
                })
                .collect(),
            other => unreachable!("{other:?} is not deterministic"),
        }
    }

    fn solve_pde(&self, est: Estimator) -> Result<RunSummary, Error> {
        let grid = self.grid()?;
        let rows = self.deterministic_rows(est, grid)?;
        if rows.iter().any(|r| !r.2.is_finite()) {
            return Err(PdeError::InvalidGrid("solution contains non-finite values".into()).into());
        }
        let k = self.st.k;
        let p = self.csv("solution.csv", |w| pde::write_solution_csv(&rows, k, w))?;
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.2), b.max(r.2)));
        Ok(RunSummary {
            artifacts: vec![p],
            lines: vec![format!("{} rows, values in [{lo:.6}, {hi:.6}]", rows.len())],
        })
    }

    fn dataset(&self) -> Result<(TrainingDataset, Vec<String>), Error> {
        let spec = self.cfg.data.as_ref().ok_or_else(|| missing("data", self.cfg.preset))?;
        let mut notes = Vec::new();
        let points = |rows: Vec<(Vec<f64>, f64, f64)>| {
            rows.into_iter()
                .map(|(xi, t, value)| DataPoint { xi, t, value })
                .collect::<Vec<_>>()
        };
        let ds = match spec.source {
            DataSource::Fd => TrainingDataset::new(points(self.deterministic_rows(Estimator::Fd, &spec.grid)?), Provenance::Fd),
            DataSource::Riccati => TrainingDataset::new(
                points(self.deterministic_rows(Estimator::Riccati, &spec.grid)?),
                Provenance::Riccati,
            ),
            DataSource::Mc => {
                let est = match self.cfg.estimator {
                    Some(e @ (Estimator::McFull | Estimator::McReduced)) => e,
                    _ => Estimator::McReduced,
                };
                let rows = self.mc_grid(est, &spec.grid)?;
                let ceiling = self.sim()?.std_error_ceiling;
                let mut pts = Vec::with_capacity(rows.len());
                for (i, r) in rows.into_iter().enumerate() {
                    if ceiling.is_some_and(|c| r.std_error > c) {
                        notes.push(format!(
                            "warning: row {i} (xi={:?}, t={}) std_error {:.3e} exceeds ceiling",
                            r.xi, r.t, r.std_error
                        ));
                    }
                    pts.push(DataPoint {
                        xi: r.xi,
                        t: r.t,
                        value: r.estimate,
                    });
                }
                TrainingDataset::new(pts, Provenance::Mc)
            }
            DataSource::File => {
                let path = spec.file.as_ref().expect("validated");
                let f = std::fs::File::open(path).map_err(|source| Error::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                TrainingDataset::read_csv(std::io::BufReader::new(f))
                    .map_err(|m| config_error(&path.display().to_string(), m))?
            }
        };
        Ok((ds, notes))
    }

    fn make_dataset(&self) -> Result<RunSummary, Error> {
        let (ds, notes) = self.dataset()?;
        let k = self.st.k;
        let p = self.csv("dataset.csv", |w| ds.write_csv(k, &notes, w))?;
        let mut lines = vec![format!("{} rows from {}", ds.len(), ds.provenance.as_str())];
        lines.extend(notes);
        Ok(RunSummary {
            artifacts: vec![p],
            lines,
        })
    }

    fn train_pinn(&self) -> Result<RunSummary, Error> {
        let problem = self.st.problem.as_ref().ok_or_else(|| missing("pde", self.cfg.preset))?;
        let pc = self.cfg.pinn.as_ref().ok_or_else(|| missing("pinn", self.cfg.preset))?;
        let (data, _) = self.dataset()?;
        let trained = pinn::train(problem, &data, pc).map_err(|e| match e {
            TrainError::InvalidConfig(m) => config_error("pinn", m),
            other => other.into(),
        })?;
        let mut artifacts = vec![self.csv("training_log.csv", |w| pinn::write_log_csv(&trained.log, w))?];
        #[derive(Serialize)]
        struct Snapshot {
            epoch: usize,
            network: Checkpoint,
        }
        #[derive(Serialize)]
        struct PinnFile {
            network: Checkpoint,
            snapshots: Vec<Snapshot>,
        }
        let file = PinnFile {
            network: trained.net.to_checkpoint(Some(self.seed)),
            snapshots: trained
                .snapshots
                .iter()
                .map(|(e, n)| Snapshot {
                    epoch: *e,
                    network: n.to_checkpoint(Some(self.seed)),
                })
                .collect(),
        };
        artifacts.push(self.json("pinn.json", &file)?);
        let grid = self.grid()?;
        let rows = pinn::predict_grid(&trained.net, &grid.tensor())?;
        let k = self.st.k;
        artifacts.push(self.csv("pinn_grid.csv", |w| pde::write_solution_csv(&rows, k, w))?);
        let last = trained.log.last().expect("at least one log row");
        let mut lines = vec![
            format!(
                "epoch {}: loss_physics {:.3e}, loss_data {:.3e}",
                last.epoch, last.loss_physics, last.loss_data
            ),
            format!("wall clock {:.1} s", trained.wall_clock.as_secs_f64()),
        ];
        if self.st.closed_form(&rows[0].0, rows[0].1).is_some() {
            let truth: Vec<f64> = rows
                .iter()
                .map(|(xi, t, _)| self.closed_form(xi, *t))
                .collect::<Result<_, _>>()?;
            let pred: Vec<f64> = rows.iter().map(|r| r.2).collect();
            lines.push(format!(
                "vs closed form: {:.3}% error, max abs {:.3e}",
                stats::percentage_error(&pred, &truth),
                stats::max_abs_error(&pred, &truth)
            ));
        }
        Ok(RunSummary { artifacts, lines })
    }

    fn train_features(&self) -> Result<RunSummary, Error> {
        let (Some(fc), Some(ss)) = (&self.cfg.features, &self.cfg.states) else {
            return Err(missing("features", self.cfg.preset));
        };
        let preset = self.cfg.preset;
        let sys = self.st.system.as_ref().ok_or_else(|| missing("system", preset))?;
        let target: montecarlo::StateFn = match ss.target {
            ReconTarget::Cost => self.st.cost.as_ref().ok_or_else(|| missing("cost", preset))?.running.clone(),
            ReconTarget::Barrier => self.st.barrier.as_ref().ok_or_else(|| missing("barrier", preset))?.phi.clone(),
        };
        let states = featureid::state_grid(sys.state_dim(), ss.lower, ss.upper, ss.step);
        let trained = featureid::train_autoencoder(sys, &target, &states, fc).map_err(|e| match e {
            TrainError::InvalidConfig(m) => config_error("features", m),
            other => other.into(),
        })?;
        let mut artifacts = vec![self.csv("features_log.csv", |w| featureid::write_ae_log_csv(&trained.log, w))?];
        let file = AutoencoderFile {
            encoder: trained.net.encoder.to_checkpoint(Some(self.seed)),
            decoder: trained.net.decoder.to_checkpoint(Some(self.seed)),
        };
        artifacts.push(self.json("autoencoder.json", &file)?);
        let mut lines = vec![format!(
            "loss {:.4e} -> {:.4e}",
            trained.initial_loss, trained.final_loss
        )];
        if let Some(fm) = &self.st.features {
            if fm.k() == trained.net.k() {
                let rep = featureid::evaluate_features(&trained.net, &states, fm, &target);
                lines.push(format!(
                    "reconstruction {:.3}%, |corr| {:?}, mse {:?}",
                    rep.reconstruction_pct_error, rep.best_permutation_abs_corr, rep.mse_raw
                ));
                artifacts.push(self.json("feature_report.json", &rep)?);
            }
        }
        Ok(RunSummary { artifacts, lines })
    }

    /// Point values on the benchmark scale: `V` for value problems, `F` for
    /// safety problems.
    fn on_scale(&self, v: f64) -> f64 {
        match self.st.task {
            Task::Value => -v.ln(),
            Task::Safety => v,
        }
    }

    fn benchmark(&self) -> Result<RunSummary, Error> {
        let spec = self.cfg.benchmark.as_ref().ok_or_else(|| missing("benchmark", self.cfg.preset))?;
        let mut fd: Option<FdSolution> = None;
        let mut deterministic = |est: Estimator, ctx: &Ctx| -> Result<Vec<f64>, Error> {
            spec.points
                .iter()
                .map(|p| {
                    let (xi, t) = (&p[..ctx.st.k], p[ctx.st.k]);
                    let v = match est {
                        Estimator::Fd => {
                            if fd.is_none() {
                                fd = Some(ctx.solve()?);
                            }
                            fd.as_ref().expect("solved").value_at(xi, t)?
                        }
                        _ => ctx.closed_form(xi, t)?,
                    };
                    Ok(ctx.on_scale(v))
                })
                .collect()
        };
        let estimate = |est: Estimator, n: usize, seed: u64, det: &mut dyn FnMut(Estimator) -> Result<Vec<f64>, Error>| {
            match est {
                Estimator::McFull | Estimator::McReduced => spec
                    .points
                    .iter()
                    .map(|p| Ok(self.mc_point(est, &p[..self.st.k], p[self.st.k], n, seed)?.value))
                    .collect::<Result<Vec<f64>, Error>>(),
                _ => det(est),
            }
        };
        let truth = estimate(spec.oracle, *spec.sample_counts.last().expect("nonempty"), self.seed, &mut |e| {
            deterministic(e, self)
        })?;
        let mut rows = Vec::new();
        for &est in &spec.estimators {
            for &n in &spec.sample_counts {
                for rep in 0..spec.repetitions {
                    let values = estimate(est, n, self.seed.wrapping_add(rep as u64), &mut |e| deterministic(e, self))?;
                    rows.push(BenchmarkRow {
                        estimator: est,
                        n_samples: n,
                        rep,
                        error: error_metric(spec.metric, &values, &truth),
                    });
                }
            }
        }
        let p = self.csv("benchmark.csv", |w| write_benchmark_csv(&rows, w))?;
        let lines = summarise(&rows);
        Ok(RunSummary {
            artifacts: vec![p],
            lines,
        })
    }
}

/// Replace each full state by its encoding.
fn project(full: &TrajectoryBatch, ae: &AutoencoderNet) -> TrajectoryBatch {
    let k = ae.k();
    let steps = full.times.len();
    let mut states = Vec::with_capacity(full.n_paths * steps * k);
    for p in 0..full.n_paths {
        for s in 0..steps {
            states.extend(ae.encode(full.state(p, s)));
        }
    }
    TrajectoryBatch {
        times: full.times.clone(),
        states,
        n_paths: full.n_paths,
        dim: k,
        seed_used: full.seed_used,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub estimator: Estimator,
    pub n_samples: usize,
    pub rep: usize,
    pub error: f64,
}

/// Percentage error `100·Σ|ê−e|/Σ|e|` or mean absolute error.
pub fn error_metric(metric: Metric, estimate: &[f64], truth: &[f64]) -> f64 {
    match metric {
        Metric::Percentage => stats::percentage_error(estimate, truth),
        Metric::Absolute => stats::mean_abs_error(estimate, truth),
    }
}

pub fn write_benchmark_csv<W: std::io::Write>(rows: &[BenchmarkRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "estimator,n_samples,rep,error_pct")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.estimator.as_str(), r.n_samples, r.rep, r.error)?;
    }
    Ok(())
}

/// Mean error per `(estimator, n_samples)`, in first-seen order.
pub fn mean_errors(rows: &[BenchmarkRow]) -> Vec<(Estimator, usize, f64)> {
    let mut keys: Vec<(Estimator, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.estimator, r.n_samples)) {
            keys.push((r.estimator, r.n_samples));
        }
    }
    keys.into_iter()
        .map(|(e, n)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.estimator == e && r.n_samples == n)
                .map(|r| r.error)
                .collect();
            (e, n, stats::mean(&v))
        })
        .collect()
}

fn summarise(rows: &[BenchmarkRow]) -> Vec<String> {
    mean_errors(rows)
        .into_iter()
        .map(|(e, n, m)| format!("{} N={n}: mean error {m:.4}", e.as_str()))
        .collect()
}
