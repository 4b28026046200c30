//! Path-integral value estimation, safety probabilities and
//! importance-sampling control refinement.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::McError;
use crate::par;
use crate::reduction::ReducedSde;
use crate::rng::aux_rng;
use crate::sde::{run_full_path, run_reduced_path, ControlPolicy, SimConfig, StochasticSystem};
use crate::stats::{compensated_sum, log_sum_exp, variance};

/// `x ↦ scalar`.
pub type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Running cost `c(x)` and the weight of `c(x_T)` in the exponent.
#[derive(Clone)]
pub struct CostSpec {
    pub running: StateFn,
    pub terminal_weight: f64,
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec")
            .field("terminal_weight", &self.terminal_weight)
            .finish_non_exhaustive()
    }
}

impl CostSpec {
    pub fn new(running: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, terminal_weight: f64) -> Self {
        Self {
            running: Arc::new(running),
            terminal_weight,
        }
    }

    /// Same cost shifted by a constant.
    pub fn shifted(&self, kappa: f64) -> Self {
        let c = self.running.clone();
        Self {
            running: Arc::new(move |x| c(x) + kappa),
            terminal_weight: self.terminal_weight,
        }
    }
}

/// Safe set `{x : φ(x) ≥ 0}`.
#[derive(Clone)]
pub struct BarrierSpec {
    pub phi: StateFn,
}

impl fmt::Debug for BarrierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BarrierSpec(<fn>)")
    }
}

impl BarrierSpec {
    pub fn new(phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { phi: Arc::new(phi) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

fn horizon_steps(t: f64, horizon: f64, cfg: &SimConfig) -> Result<usize, McError> {
    if !(t < horizon) {
        return Err(McError::Precondition(format!("need t < T, got t = {t}, T = {horizon}")));
    }
    Ok(cfg.with_horizon(horizon - t).steps()?)
}

/// Turn per-path log-weights `−S_i` into `V̂ = −log mean exp(−S_i)` with a
/// delta-method standard error.
fn value_from_log_weights(lw: &[f64]) -> Result<McEstimate, McError> {
    let n = lw.len();
    if lw.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(McError::Degenerate);
    }
    let lse = log_sum_exp(lw);
    if !lse.is_finite() {
        return Err(McError::Degenerate);
    }
    let value = -(lse - (n as f64).ln());
    // relative weights exp(lw - max) keep the ratio sd/mean exact
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|l| (l - m).exp()).collect();
    let mw = compensated_sum(w.iter().copied()) / n as f64;
    let std_error = if n > 1 {
        (variance(&w) / n as f64).sqrt() / mw
    } else {
        0.0
    };
    Ok(McEstimate {
        value,
        std_error,
        n_samples: n,
    })
}

/// Path-integral estimate of `V(x, t)` from `N` uncontrolled paths over `[t, T]`.
/// `cfg.horizon` is ignored; the horizon is `T − t`.
pub fn value_pathintegral(
    system: &StochasticSystem,
    x: &[f64],
    t: f64,
    horizon: f64,
    cost: &CostSpec,
    cfg: &SimConfig,
) -> Result<McEstimate, McError> {
    let steps = horizon_steps(t, horizon, cfg)?;
    if x.len() != system.state_dim() {
        return Err(crate::error::SimError::DimensionMismatch {
            expected: system.state_dim(),
            got: x.len(),
        }
        .into());
    }
    let dt = cfg.dt;
    let lw = par::try_map_indices(cfg.n_paths, |p| {
        let mut acc = 0.0;
        let mut comp = 0.0;
        let mut terminal = 0.0;
        run_full_path(system, &ControlPolicy::Zero, x, t, dt, steps, cfg.seed, p, |s| {
            if s.k < steps {
                neumaier(&mut acc, &mut comp, (cost.running)(s.x) * dt);
            } else {
                terminal = cost.terminal_weight * (cost.running)(s.x);
            }
            true
        })?;
        Ok::<_, McError>(-(acc + comp + terminal))
    })?;
    value_from_log_weights(&lw)
}

/// Dimension-reduced path-integral estimate using the feature SDE and the
/// reduced cost `r(ξ)`.
pub fn value_pathintegral_reduced(
    reduced: &ReducedSde,
    xi: &[f64],
    t: f64,
    horizon: f64,
    cost: &CostSpec,
    cfg: &SimConfig,
) -> Result<McEstimate, McError> {
    let steps = horizon_steps(t, horizon, cfg)?;
    if xi.len() != reduced.dim() {
        return Err(crate::error::SimError::DimensionMismatch {
            expected: reduced.dim(),
            got: xi.len(),
        }
        .into());
    }
    let dt = cfg.dt;
    let lw = par::try_map_indices(cfg.n_paths, |p| {
        let mut acc = 0.0;
        let mut comp = 0.0;
        let mut terminal = 0.0;
        run_reduced_path(reduced, xi, dt, steps, cfg.seed, p, |s| {
            if s.k < steps {
                neumaier(&mut acc, &mut comp, (cost.running)(s.x) * dt);
            } else {
                terminal = cost.terminal_weight * (cost.running)(s.x);
            }
            true
        })?;
        Ok::<_, McError>(-(acc + comp + terminal))
    })?;
    value_from_log_weights(&lw)
}

#[inline]
fn neumaier(sum: &mut f64, comp: &mut f64, v: f64) {
    let t = *sum + v;
    if sum.abs() >= v.abs() {
        *comp += (*sum - t) + v;
    } else {
        *comp += (v - t) + *sum;
    }
    *sum = t;
}

fn proportion(safe: &[f64]) -> McEstimate {
    let n = safe.len();
    let f = compensated_sum(safe.iter().copied()) / n as f64;
    McEstimate {
        value: f,
        std_error: (f * (1.0 - f) / n as f64).max(0.0).sqrt(),
        n_samples: n,
    }
}

/// Fraction of paths with `φ(x_τ) ≥ 0` at every grid time in `[0, T]`.
pub fn safety_mc(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    x0: &[f64],
    barrier: &BarrierSpec,
    horizon: f64,
    cfg: &SimConfig,
) -> Result<McEstimate, McError> {
    if !((barrier.phi)(x0) >= 0.0) {
        return Err(McError::Precondition("initial state is outside the safe set".into()));
    }
    let steps = horizon_steps(0.0, horizon, cfg)?;
    let safe = par::try_map_indices(cfg.n_paths, |p| {
        let mut ok = true;
        run_full_path(system, policy, x0, 0.0, cfg.dt, steps, cfg.seed, p, |s| {
            ok = (barrier.phi)(s.x) >= 0.0;
            ok
        })?;
        Ok::<_, McError>(if ok { 1.0 } else { 0.0 })
    })?;
    Ok(proportion(&safe))
}

/// Reduced safety estimate with discrete monitoring of `r(ξ) ≥ 0`.
pub fn safety_mc_reduced(
    reduced: &ReducedSde,
    xi0: &[f64],
    r: &StateFn,
    horizon: f64,
    cfg: &SimConfig,
) -> Result<McEstimate, McError> {
    safety_mc_reduced_with_bridge(reduced, xi0, r, horizon, cfg, &[])
}

/// As [`safety_mc_reduced`], additionally discounting each step by the
/// Brownian-bridge probability of crossing the upper level `L_i` between grid
/// points, `1 − exp(−2(L−ξ_k)(L−ξ_{k+1})/(α dt))`, for every coordinate with a
/// declared level. An empty `levels` slice disables the correction.
pub fn safety_mc_reduced_with_bridge(
    reduced: &ReducedSde,
    xi0: &[f64],
    r: &StateFn,
    horizon: f64,
    cfg: &SimConfig,
    levels: &[Option<f64>],
) -> Result<McEstimate, McError> {
    if !(r(xi0) >= 0.0) {
        return Err(McError::Precondition("initial feature state is outside the safe set".into()));
    }
    let steps = horizon_steps(0.0, horizon, cfg)?;
    let dt = cfg.dt;
    let weights = par::try_map_indices(cfg.n_paths, |p| {
        let mut weight = 1.0f64;
        let mut prev: Vec<f64> = Vec::new();
        run_reduced_path(reduced, xi0, dt, steps, cfg.seed, p, |s| {
            if r(s.x) < 0.0 {
                weight = 0.0;
                return false;
            }
            if !prev.is_empty() {
                for (i, lvl) in levels.iter().enumerate() {
                    if let Some(l) = lvl {
                        let a = reduced.alpha(i, prev[i]);
                        let cross = (-2.0 * (l - prev[i]) * (l - s.x[i]) / (a * dt)).exp();
                        weight *= (1.0 - cross).max(0.0);
                    }
                }
            }
            prev.clear();
            prev.extend_from_slice(s.x);
            true
        })?;
        Ok::<_, McError>(weight)
    })?;
    if levels.is_empty() {
        return Ok(proportion(&weights));
    }
    let n = weights.len();
    Ok(McEstimate {
        value: compensated_sum(weights.iter().copied()) / n as f64,
        std_error: (variance(&weights) / n as f64).sqrt(),
        n_samples: n,
    })
}

/// `u* = −σ(x)ᵀ ∇V(x, t)`.
pub fn optimal_control_from_value(
    system: &StochasticSystem,
    grad_v: impl Fn(&[f64], f64) -> Vec<f64>,
    x: &[f64],
    t: f64,
) -> Vec<f64> {
    system
        .diffusion_transpose_apply(x, &grad_v(x, t))
        .into_iter()
        .map(|v| -v)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedControl {
    /// `û(x, t) + correction`.
    pub control: Vec<f64>,
    pub correction: Vec<f64>,
    /// Bootstrap standard error of each correction component.
    pub std_error: Vec<f64>,
    pub n_samples: usize,
}

/// Number of bootstrap resamples behind [`RefinedControl::std_error`].
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Importance-sampling refinement of `û` at `(x, t)`: simulate under `û` over
/// `[t, T]`, weight each path by `exp(−S)` with
/// `S = ∫(c + ½‖û‖²)dτ + ∫ûᵀdW + w_T·c(x_T)`, and correct `û` by the weighted
/// mean Brownian increment over `[t, t + δ]` divided by `δ`.
#[allow(clippy::too_many_arguments)]
pub fn refine_control_importance_sampling(
    system: &StochasticSystem,
    u_hat: &ControlPolicy,
    cost: &CostSpec,
    x: &[f64],
    t: f64,
    horizon: f64,
    delta: f64,
    cfg: &SimConfig,
) -> Result<RefinedControl, McError> {
    let steps = horizon_steps(t, horizon, cfg)?;
    if !(delta > 0.0) {
        return Err(McError::Precondition(format!("delta must be positive, got {delta}")));
    }
    let delta_steps = ((delta / cfg.dt).round() as usize).max(1);
    if delta_steps > steps {
        return Err(McError::Precondition("delta exceeds the remaining horizon".into()));
    }
    let delta_eff = delta_steps as f64 * cfg.dt;
    let m = system.control_dim();
    let dt = cfg.dt;
    let per_path = par::try_map_indices(cfg.n_paths, |p| {
        let mut s_cost = 0.0;
        let mut comp = 0.0;
        let mut dw_sum = vec![0.0; m];
        run_full_path(system, u_hat, x, t, dt, steps, cfg.seed, p, |s| {
            if s.k < steps {
                let u2: f64 = s.u.iter().map(|v| v * v).sum();
                let udw: f64 = s.u.iter().zip(s.dw).map(|(a, b)| a * b).sum();
                neumaier(&mut s_cost, &mut comp, ((cost.running)(s.x) + 0.5 * u2) * dt + udw);
                if s.k < delta_steps {
                    dw_sum.iter_mut().zip(s.dw).for_each(|(a, b)| *a += b);
                }
            } else {
                neumaier(&mut s_cost, &mut comp, cost.terminal_weight * (cost.running)(s.x));
            }
            true
        })?;
        Ok::<_, McError>((-(s_cost + comp), dw_sum))
    })?;
    let lw: Vec<f64> = per_path.iter().map(|(l, _)| *l).collect();
    let mx = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(McError::Degenerate);
    }
    let w: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
    let correction_from = |idx: &mut dyn Iterator<Item = usize>| {
        let mut num = vec![0.0; m];
        let mut den = 0.0;
        for i in idx {
            den += w[i];
            for j in 0..m {
                num[j] += w[i] * per_path[i].1[j];
            }
        }
        num.into_iter().map(|v| v / (delta_eff * den)).collect::<Vec<f64>>()
    };
    let n = cfg.n_paths;
    let correction = correction_from(&mut (0..n));
    if correction.iter().any(|v| !v.is_finite()) {
        return Err(McError::Degenerate);
    }
    let mut rng = aux_rng(cfg.seed, 0xb007);
    let boots: Vec<Vec<f64>> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            correction_from(&mut idx.into_iter())
        })
        .collect();
    let std_error = (0..m)
        .map(|j| variance(&boots.iter().map(|b| b[j]).collect::<Vec<_>>()).sqrt())
        .collect();
    let base = u_hat.eval(x, t, m);
    Ok(RefinedControl {
        control: base.iter().zip(&correction).map(|(a, b)| a + b).collect(),
        correction,
        std_error,
        n_samples: n,
    })
}

/// One row of a grid evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEstimate {
    pub xi: Vec<f64>,
    pub t: f64,
    pub estimate: f64,
    pub std_error: f64,
}

/// CSV with header `xi1,...,xik,t,estimate,std_error`.
pub fn write_estimates_csv<W: Write>(rows: &[GridEstimate], k: usize, mut w: W) -> std::io::Result<()> {
    let mut header: Vec<String> = (1..=k).map(|i| format!("xi{i}")).collect();
    header.extend(["t", "estimate", "std_error"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        for v in &r.xi {
            write!(w, "{v},")?;
        }
        writeln!(w, "{},{},{}", r.t, r.estimate, r.std_error)?;
    }
    Ok(())
}
