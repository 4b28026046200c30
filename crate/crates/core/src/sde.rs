//! Controlled SDEs `dx = f(x) dt + σ(x)(u dt + dw)` and their Euler–Maruyama
//! simulation, for both the full state and the reduced feature processes.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use crate::error::SimError;
use crate::par;
use crate::reduction::ReducedSde;
use crate::rng::{fill_normal, path_rng};

/// `out = f(x)`.
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Diffusion coefficient `σ(x)`, an `n × m` matrix.
#[derive(Clone)]
pub enum Diffusion {
    /// `σ = s·I`; requires `n == m`.
    ScaledIdentity(f64),
    /// Constant matrix, row-major `n × m`.
    Constant(Vec<f64>),
    /// Diagonal `σ(x) = diag(d(x))`; requires `n == m`.
    Diagonal(VectorField),
    /// General state-dependent matrix written row-major into the buffer.
    StateDependent(VectorField),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::ScaledIdentity(s) => write!(f, "ScaledIdentity({s})"),
            Diffusion::Constant(m) => write!(f, "Constant({} entries)", m.len()),
            Diffusion::Diagonal(_) => write!(f, "Diagonal(<fn>)"),
            Diffusion::StateDependent(_) => write!(f, "StateDependent(<fn>)"),
        }
    }
}

/// A controlled stochastic system with `n` states and `m` noise/control channels.
#[derive(Clone)]
pub struct StochasticSystem {
    state_dim: usize,
    control_dim: usize,
    drift: VectorField,
    diffusion: Diffusion,
}

impl fmt::Debug for StochasticSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StochasticSystem")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("diffusion", &self.diffusion)
            .finish_non_exhaustive()
    }
}

impl StochasticSystem {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        drift: VectorField,
        diffusion: Diffusion,
    ) -> Result<Self, SimError> {
        if state_dim == 0 || control_dim == 0 {
            return Err(SimError::InvalidConfig("dimensions must be positive".into()));
        }
        match &diffusion {
            Diffusion::ScaledIdentity(_) | Diffusion::Diagonal(_) if state_dim != control_dim => {
                return Err(SimError::InvalidConfig(format!(
                    "diagonal diffusion needs n == m, got {state_dim} x {control_dim}"
                )))
            }
            Diffusion::Constant(m) if m.len() != state_dim * control_dim => {
                return Err(SimError::InvalidConfig(format!(
                    "constant diffusion has {} entries, expected {}",
                    m.len(),
                    state_dim * control_dim
                )))
            }
            _ => {}
        }
        Ok(Self {
            state_dim,
            control_dim,
            drift,
            diffusion,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.drift_into(x, &mut out);
        out
    }

    /// Dense `σ(x)`, row-major `n × m`.
    pub fn diffusion_matrix(&self, x: &[f64]) -> Vec<f64> {
        let (n, m) = (self.state_dim, self.control_dim);
        let mut out = vec![0.0; n * m];
        match &self.diffusion {
            Diffusion::ScaledIdentity(s) => (0..n).for_each(|i| out[i * m + i] = *s),
            Diffusion::Constant(c) => out.copy_from_slice(c),
            Diffusion::Diagonal(d) => {
                let mut diag = vec![0.0; n];
                d(x, &mut diag);
                (0..n).for_each(|i| out[i * m + i] = diag[i]);
            }
            Diffusion::StateDependent(f) => f(x, &mut out),
        }
        out
    }

    /// `out = σ(x) v`. `scratch` is reused across calls to avoid allocation.
    pub fn apply_diffusion(&self, x: &[f64], v: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        let (n, m) = (self.state_dim, self.control_dim);
        match &self.diffusion {
            Diffusion::ScaledIdentity(s) => {
                out.iter_mut().zip(v).for_each(|(o, vi)| *o = s * vi);
            }
            Diffusion::Constant(c) => dense_matvec(c, n, m, v, out),
            Diffusion::Diagonal(d) => {
                scratch.resize(n, 0.0);
                d(x, scratch);
                out.iter_mut()
                    .zip(scratch.iter().zip(v))
                    .for_each(|(o, (s, vi))| *o = s * vi);
            }
            Diffusion::StateDependent(f) => {
                scratch.resize(n * m, 0.0);
                f(x, scratch);
                dense_matvec(scratch, n, m, v, out);
            }
        }
    }

    /// `σ(x)ᵀ g`, length `m`.
    pub fn diffusion_transpose_apply(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let (n, m) = (self.state_dim, self.control_dim);
        match &self.diffusion {
            Diffusion::ScaledIdentity(s) => g.iter().map(|gi| s * gi).collect(),
            _ => {
                let sigma = self.diffusion_matrix(x);
                (0..m)
                    .map(|k| (0..n).map(|i| sigma[i * m + k] * g[i]).sum())
                    .collect()
            }
        }
    }
}

fn dense_matvec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        let row = &a[i * cols..(i + 1) * cols];
        *o = row.iter().zip(v).map(|(r, x)| r * x).sum();
    }
}

/// `out = U(x, t)`.
pub type PolicyFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

/// State-feedback control policy. `Zero` realizes the uncontrolled measure.
#[derive(Clone, Default)]
pub enum ControlPolicy {
    #[default]
    Zero,
    Feedback(PolicyFn),
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPolicy::Zero => write!(f, "Zero"),
            ControlPolicy::Feedback(_) => write!(f, "Feedback(<fn>)"),
        }
    }
}

impl ControlPolicy {
    pub fn feedback(f: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        ControlPolicy::Feedback(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ControlPolicy::Zero)
    }

    pub fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            ControlPolicy::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            ControlPolicy::Feedback(f) => f(x, t, out),
        }
    }

    pub fn eval(&self, x: &[f64], t: f64, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        self.eval_into(x, t, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub n_paths: usize,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, seed: u64, n_paths: usize) -> Self {
        Self {
            dt,
            horizon,
            seed,
            n_paths,
        }
    }

    /// Same config over a different horizon.
    pub fn with_horizon(self, horizon: f64) -> Self {
        Self { horizon, ..self }
    }

    /// Number of Euler steps; rejects horizons that are not a whole number of steps.
    pub fn steps(&self) -> Result<usize, SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.n_paths == 0 {
            return Err(SimError::InvalidConfig("n_paths must be positive".into()));
        }
        let steps = (self.horizon / self.dt).round();
        if steps < 1.0 || (steps * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(SimError::InvalidConfig(format!(
                "horizon {} is not a whole number of steps of {}",
                self.horizon, self.dt
            )));
        }
        Ok(steps as usize)
    }
}

/// `N` sampled paths on a shared uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub times: Vec<f64>,
    /// Flat `[path][step][coord]`.
    pub states: Vec<f64>,
    pub n_paths: usize,
    pub dim: usize,
    pub seed_used: u64,
}

impl TrajectoryBatch {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let stride = self.times.len() * self.dim;
        let off = path * stride + step * self.dim;
        &self.states[off..off + self.dim]
    }

    /// Coordinate `coord` of every path at `step`.
    pub fn column(&self, step: usize, coord: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, step)[coord]).collect()
    }

    /// Index of the grid time closest to `t`.
    pub fn step_at(&self, t: f64) -> usize {
        let dt = self.times[1] - self.times[0];
        (((t - self.times[0]) / dt).round() as usize).min(self.n_steps())
    }

    /// CSV with header `path,t,x1,...,xd`, rows path-major then time.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path,t")?;
        for i in 1..=self.dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for (k, t) in self.times.iter().enumerate() {
                write!(w, "{p},{t}")?;
                for v in self.state(p, k) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// What an Euler step hands to a path visitor.
pub(crate) struct Step<'a> {
    pub k: usize,
    /// State at the start of the step (left endpoint).
    pub x: &'a [f64],
    /// Control applied over the step (empty for reduced paths).
    pub u: &'a [f64],
    /// Brownian increment `√dt·z` over the step.
    pub dw: &'a [f64],
}

/// Simulate one full-system path from `x0` at `t0`, calling `visit` before each
/// step. `visit` returns `false` to stop early. Returns the final state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_full_path<F>(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    x0: &[f64],
    t0: f64,
    dt: f64,
    steps: usize,
    seed: u64,
    path: usize,
    mut visit: F,
) -> Result<Vec<f64>, SimError>
where
    F: FnMut(&Step<'_>) -> bool,
{
    let (n, m) = (system.state_dim, system.control_dim);
    let mut rng = path_rng(seed, path as u64);
    let mut x = x0.to_vec();
    let mut f = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut dw = vec![0.0; m];
    let mut push = vec![0.0; m];
    let mut kick = vec![0.0; n];
    let mut scratch = Vec::new();
    let sqdt = dt.sqrt();
    let controlled = !policy.is_zero();
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        fill_normal(&mut rng, &mut z);
        dw.iter_mut().zip(&z).for_each(|(d, zi)| *d = sqdt * zi);
        if controlled {
            policy.eval_into(&x, t, &mut u);
        }
        if !visit(&Step {
            k,
            x: &x,
            u: &u,
            dw: &dw,
        }) {
            return Ok(x);
        }
        system.drift_into(&x, &mut f);
        for j in 0..m {
            push[j] = if controlled { u[j] * dt + dw[j] } else { dw[j] };
        }
        system.apply_diffusion(&x, &push, &mut kick, &mut scratch);
        for i in 0..n {
            x[i] += f[i] * dt + kick[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite {
                path,
                step: k + 1,
                state: x,
            });
        }
    }
    visit(&Step {
        k: steps,
        x: &x,
        u: &[],
        dw: &[],
    });
    Ok(x)
}

/// Reduced-path analogue of [`run_full_path`]; `dw` holds the per-coordinate
/// increments `√dt·z_i`.
pub(crate) fn run_reduced_path<F>(
    reduced: &ReducedSde,
    xi0: &[f64],
    dt: f64,
    steps: usize,
    seed: u64,
    path: usize,
    mut visit: F,
) -> Result<Vec<f64>, SimError>
where
    F: FnMut(&Step<'_>) -> bool,
{
    let k_dim = reduced.dim();
    let mut rng = path_rng(seed, path as u64);
    let mut xi = xi0.to_vec();
    let mut z = vec![0.0; k_dim];
    let mut dw = vec![0.0; k_dim];
    let sqdt = dt.sqrt();
    for k in 0..steps {
        fill_normal(&mut rng, &mut z);
        dw.iter_mut().zip(&z).for_each(|(d, zi)| *d = sqdt * zi);
        if !visit(&Step {
            k,
            x: &xi,
            u: &[],
            dw: &dw,
        }) {
            return Ok(xi);
        }
        for i in 0..k_dim {
            let a = reduced.alpha(i, xi[i]);
            if !(a > 0.0) {
                return Err(SimError::NonPositiveAlpha {
                    coordinate: i,
                    xi: xi[i],
                    alpha: a,
                });
            }
            let b = reduced.beta(i, xi[i]);
            xi[i] += a * b * dt + a.sqrt() * dw[i];
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite {
                path,
                step: k + 1,
                state: xi,
            });
        }
    }
    visit(&Step {
        k: steps,
        x: &xi,
        u: &[],
        dw: &[],
    });
    Ok(xi)
}

/// Euler–Maruyama simulation of `N` independent paths of the full system.
pub fn simulate(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<TrajectoryBatch, SimError> {
    let n = system.state_dim;
    if x0.len() != n {
        return Err(SimError::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    let steps = cfg.steps()?;
    let paths = par::try_map_indices(cfg.n_paths, |p| {
        let mut rec = Vec::with_capacity((steps + 1) * n);
        run_full_path(system, policy, x0, 0.0, cfg.dt, steps, cfg.seed, p, |s| {
            rec.extend_from_slice(s.x);
            true
        })?;
        Ok(rec)
    })?;
    Ok(TrajectoryBatch {
        times: time_grid(cfg.dt, steps),
        states: paths.concat(),
        n_paths: cfg.n_paths,
        dim: n,
        seed_used: cfg.seed,
    })
}

/// Euler–Maruyama simulation of the reduced feature SDE
/// `dξ_i = α_i β_i dt + √α_i dB_i`.
pub fn simulate_reduced(
    reduced: &ReducedSde,
    xi0: &[f64],
    cfg: &SimConfig,
) -> Result<TrajectoryBatch, SimError> {
    let k = reduced.dim();
    if xi0.len() != k {
        return Err(SimError::DimensionMismatch {
            expected: k,
            got: xi0.len(),
        });
    }
    let steps = cfg.steps()?;
    let paths = par::try_map_indices(cfg.n_paths, |p| {
        let mut rec = Vec::with_capacity((steps + 1) * k);
        run_reduced_path(reduced, xi0, cfg.dt, steps, cfg.seed, p, |s| {
            rec.extend_from_slice(s.x);
            true
        })?;
        Ok(rec)
    })?;
    Ok(TrajectoryBatch {
        times: time_grid(cfg.dt, steps),
        states: paths.concat(),
        n_paths: cfg.n_paths,
        dim: k,
        seed_used: cfg.seed,
    })
}

/// Final states only; avoids storing whole paths for large `N`.
pub fn simulate_terminal(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<Vec<Vec<f64>>, SimError> {
    if x0.len() != system.state_dim {
        return Err(SimError::DimensionMismatch {
            expected: system.state_dim,
            got: x0.len(),
        });
    }
    let steps = cfg.steps()?;
    par::try_map_indices(cfg.n_paths, |p| {
        run_full_path(system, policy, x0, 0.0, cfg.dt, steps, cfg.seed, p, |_| true)
    })
}

pub fn simulate_reduced_terminal(
    reduced: &ReducedSde,
    xi0: &[f64],
    cfg: &SimConfig,
) -> Result<Vec<Vec<f64>>, SimError> {
    if xi0.len() != reduced.dim() {
        return Err(SimError::DimensionMismatch {
            expected: reduced.dim(),
            got: xi0.len(),
        });
    }
    let steps = cfg.steps()?;
    par::try_map_indices(cfg.n_paths, |p| {
        run_reduced_path(reduced, xi0, cfg.dt, steps, cfg.seed, p, |_| true)
    })
}

fn time_grid(dt: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| k as f64 * dt).collect()
}
