//! Generator coefficients of feature maps, numerical checks of the level-set
//! assumptions, and the reduced one-dimensional SDEs they justify.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ReductionError;
use crate::rng::aux_rng;
use crate::sde::{ControlPolicy, Diffusion, StochasticSystem};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `x ↦ p(x)`, length `k`.
pub type FeatureFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// `x ↦ ∂p/∂x`, row-major `k × n`.
pub type JacobianFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// `(x, i) ↦ ∂²p_i/∂x²`, row-major `n × n`.
pub type HessianFn = Arc<dyn Fn(&[f64], usize) -> Vec<f64> + Send + Sync>;

/// A smooth feature map `p: ℝⁿ → ℝᵏ` with optional analytic derivatives.
/// Missing derivatives fall back to central differences.
#[derive(Clone)]
pub struct FeatureMap {
    k: usize,
    n: usize,
    p: FeatureFn,
    grad: Option<JacobianFn>,
    hess: Option<HessianFn>,
    linear: bool,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("k", &self.k)
            .field("n", &self.n)
            .field("analytic_grad", &self.grad.is_some())
            .field("analytic_hess", &self.hess.is_some())
            .field("linear", &self.linear)
            .finish()
    }
}

impl FeatureMap {
    pub fn new(
        k: usize,
        n: usize,
        p: FeatureFn,
        grad: Option<JacobianFn>,
        hess: Option<HessianFn>,
    ) -> Self {
        Self {
            k,
            n,
            p,
            grad,
            hess,
            linear: false,
        }
    }

    /// `p(x) = W x` with `W` given as `k` rows of length `n`.
    pub fn linear(rows: Vec<Vec<f64>>) -> Self {
        let k = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let flat: Arc<Vec<f64>> = Arc::new(rows.concat());
        let w = flat.clone();
        let p: FeatureFn = Arc::new(move |x: &[f64]| {
            (0..k)
                .map(|i| w[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        });
        let grad: JacobianFn = Arc::new(move |_| flat.to_vec());
        let hess: HessianFn = Arc::new(move |_, _| vec![0.0; n * n]);
        Self {
            k,
            n,
            p,
            grad: Some(grad),
            hess: Some(hess),
            linear: true,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.grad.is_some() && self.hess.is_some()
    }

    pub fn value(&self, x: &[f64]) -> Vec<f64> {
        (self.p)(x)
    }

    pub fn feature(&self, x: &[f64], i: usize) -> f64 {
        (self.p)(x)[i]
    }

    /// Row `i` of the Jacobian.
    pub fn grad(&self, x: &[f64], i: usize) -> Vec<f64> {
        match &self.grad {
            Some(g) => g(x)[i * self.n..(i + 1) * self.n].to_vec(),
            None => self.fd_grad(x, i),
        }
    }

    pub fn hess(&self, x: &[f64], i: usize) -> Vec<f64> {
        if self.linear {
            return vec![0.0; self.n * self.n];
        }
        match &self.hess {
            Some(h) => h(x, i),
            None => self.fd_hess(x, i),
        }
    }

    fn fd_grad(&self, x: &[f64], i: usize) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..self.n)
            .map(|j| {
                let h = 1e-5 * (1.0 + x[j].abs());
                xp[j] = x[j] + h;
                let fp = self.feature(&xp, i);
                xp[j] = x[j] - h;
                let fm = self.feature(&xp, i);
                xp[j] = x[j];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn fd_hess(&self, x: &[f64], i: usize) -> Vec<f64> {
        // differentiate the gradient when it is analytic, otherwise p twice;
        // the double difference needs a larger step to stay above roundoff
        let n = self.n;
        let mut out = vec![0.0; n * n];
        let mut xp = x.to_vec();
        if self.grad.is_some() {
            for j in 0..n {
                let h = 1e-5 * (1.0 + x[j].abs());
                xp[j] = x[j] + h;
                let gp = self.grad(&xp, i);
                xp[j] = x[j] - h;
                let gm = self.grad(&xp, i);
                xp[j] = x[j];
                for l in 0..n {
                    out[l * n + j] = (gp[l] - gm[l]) / (2.0 * h);
                }
            }
        } else {
            let f0 = self.feature(x, i);
            for j in 0..n {
                let hj = 1e-4 * (1.0 + x[j].abs());
                for l in j..n {
                    let hl = 1e-4 * (1.0 + x[l].abs());
                    let v = if j == l {
                        xp[j] = x[j] + hj;
                        let fp = self.feature(&xp, i);
                        xp[j] = x[j] - hj;
                        let fm = self.feature(&xp, i);
                        xp[j] = x[j];
                        (fp - 2.0 * f0 + fm) / (hj * hj)
                    } else {
                        let mut eval = |sj: f64, sl: f64| {
                            xp[j] = x[j] + sj * hj;
                            xp[l] = x[l] + sl * hl;
                            let v = self.feature(&xp, i);
                            xp[j] = x[j];
                            xp[l] = x[l];
                            v
                        };
                        (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                            / (4.0 * hj * hl)
                    };
                    out[j * n + l] = v;
                    out[l * n + j] = v;
                }
            }
        }
        out
    }

    /// Largest relative disagreement between the analytic derivatives and
    /// central differences over random probes in `[lower, upper]`.
    /// `None` when no analytic derivatives were supplied.
    pub fn self_check(&self, lower: &[f64], upper: &[f64], probes: usize, seed: u64) -> Option<f64> {
        let grad = self.grad.as_ref()?;
        let mut rng = aux_rng(seed, 0x5e1f);
        let n = self.n;
        let mut worst: f64 = 0.0;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        for _ in 0..probes {
            let x: Vec<f64> = (0..n).map(|j| rng.random_range(lower[j]..=upper[j])).collect();
            let g = grad(&x);
            for i in 0..self.k {
                let fd = self.fd_grad(&x, i);
                for j in 0..n {
                    worst = worst.max(rel(g[i * n + j], fd[j]));
                }
                if !self.linear {
                    if let Some(h) = &self.hess {
                        let ha = h(&x, i);
                        let hf = self.fd_hess(&x, i);
                        for (a, b) in ha.iter().zip(&hf) {
                            worst = worst.max(rel(*a, *b));
                        }
                    }
                }
            }
        }
        Some(worst)
    }
}

/// `Tr(H σσᵀ)` without forming `σσᵀ` for the structured diffusions.
fn diffusion_trace(system: &StochasticSystem, x: &[f64], h: &[f64]) -> f64 {
    let n = system.state_dim();
    match system.diffusion() {
        Diffusion::ScaledIdentity(s) => s * s * (0..n).map(|i| h[i * n + i]).sum::<f64>(),
        Diffusion::Diagonal(d) => {
            let mut diag = vec![0.0; n];
            d(x, &mut diag);
            (0..n).map(|i| diag[i] * diag[i] * h[i * n + i]).sum()
        }
        _ => {
            let m = system.control_dim();
            let s = system.diffusion_matrix(x);
            // Σ_c σ_cᵀ H σ_c over the columns of σ
            (0..m)
                .map(|c| {
                    let col: Vec<f64> = (0..n).map(|i| s[i * m + c]).collect();
                    (0..n)
                        .map(|i| col[i] * (0..n).map(|j| h[i * n + j] * col[j]).sum::<f64>())
                        .sum::<f64>()
                })
                .sum()
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_feature(fm: &FeatureMap, i: usize) -> Result<(), ReductionError> {
    if i >= fm.k {
        return Err(ReductionError::FeatureIndex {
            index: i,
            count: fm.k,
        });
    }
    Ok(())
}

/// `A^U p_i(x)` with the policy evaluated at `t`.
pub fn apply_generator_at(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    fm: &FeatureMap,
    i: usize,
    x: &[f64],
    t: f64,
) -> f64 {
    let g = fm.grad(x, i);
    let mut value = dot(&g, &system.drift(x));
    if !policy.is_zero() {
        let u = policy.eval(x, t, system.control_dim());
        let mut su = vec![0.0; system.state_dim()];
        system.apply_diffusion(x, &u, &mut su, &mut Vec::new());
        value += dot(&g, &su);
    }
    if !fm.linear {
        value += 0.5 * diffusion_trace(system, x, &fm.hess(x, i));
    }
    value
}

/// `A^U p_i(x) = ∇p_i·f + ∇p_i·σU + ½Tr(∇²p_i σσᵀ)` for a time-invariant policy.
pub fn apply_generator(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    fm: &FeatureMap,
    i: usize,
    x: &[f64],
) -> f64 {
    apply_generator_at(system, policy, fm, i, x, 0.0)
}

/// `a(x) = ‖σ(x)ᵀ ∇p_i(x)‖²`.
pub fn coeff_a(
    system: &StochasticSystem,
    fm: &FeatureMap,
    i: usize,
    x: &[f64],
) -> Result<f64, ReductionError> {
    check_feature(fm, i)?;
    let g = fm.grad(x, i);
    let a: f64 = system
        .diffusion_transpose_apply(x, &g)
        .iter()
        .map(|v| v * v)
        .sum();
    if !(a > 0.0) {
        return Err(ReductionError::NonPositiveA {
            feature: i,
            a,
            x: x.to_vec(),
        });
    }
    Ok(a)
}

/// `b(x) = A^U p_i(x) / a(x)`.
pub fn coeff_b(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    fm: &FeatureMap,
    i: usize,
    x: &[f64],
) -> Result<f64, ReductionError> {
    let a = coeff_a(system, fm, i, x)?;
    Ok(apply_generator(system, policy, fm, i, x) / a)
}

/// Rejection sampler for level sets `{x : |p_i(x) − ξ| ≤ band}` inside a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Accepted points per level set.
    pub n_samples: usize,
    /// Give up after this many draws per level set.
    pub max_draws: usize,
    /// Band half-width as a fraction of the feature range width.
    pub band_fraction: f64,
    /// Feature range per coordinate; the ξ grid spans it.
    pub xi_ranges: Vec<(f64, f64)>,
    pub levels: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, xi_ranges: Vec<(f64, f64)>) -> Self {
        Self {
            lower,
            upper,
            n_samples: 200,
            max_draws: 2_000_000,
            band_fraction: 1e-3,
            xi_ranges,
            levels: 5,
            seed: 0,
        }
    }

    fn validate(&self, n: usize) -> Result<(), ReductionError> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(ReductionError::InvalidSampler(format!(
                "probe box has {}/{} bounds, state dimension is {n}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(ReductionError::InvalidSampler("lower bound exceeds upper".into()));
        }
        if self.n_samples == 0 || self.max_draws == 0 || !(self.band_fraction > 0.0) {
            return Err(ReductionError::InvalidSampler(
                "n_samples, max_draws and band_fraction must be positive".into(),
            ));
        }
        Ok(())
    }

    fn band(&self, i: usize) -> f64 {
        let (lo, hi) = self.xi_ranges.get(i).copied().unwrap_or((0.0, 1.0));
        self.band_fraction * (hi - lo).abs().max(f64::MIN_POSITIVE)
    }
}

/// Points sampled near one level set with their coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSample {
    pub offset: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Empirical `(a⁻, a⁺, b⁻, b⁺)` over the sampled level set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelBounds {
    pub a_minus: f64,
    pub a_plus: f64,
    pub b_minus: f64,
    pub b_plus: f64,
}

fn sample_level_set(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    fm: &FeatureMap,
    i: usize,
    xi: f64,
    cfg: &SamplerConfig,
) -> Result<LevelSample, ReductionError> {
    check_feature(fm, i)?;
    cfg.validate(system.state_dim())?;
    let band = cfg.band(i);
    let mut rng = aux_rng(cfg.seed ^ xi.to_bits(), i as u64);
    let mut out = LevelSample {
        offset: Vec::with_capacity(cfg.n_samples),
        a: Vec::with_capacity(cfg.n_samples),
        b: Vec::with_capacity(cfg.n_samples),
    };
    let n = system.state_dim();
    let mut x = vec![0.0; n];
    for _ in 0..cfg.max_draws {
        for j in 0..n {
            x[j] = rng.random_range(cfg.lower[j]..=cfg.upper[j]);
        }
        let off = fm.feature(&x, i) - xi;
        if off.abs() > band {
            continue;
        }
        let a = coeff_a(system, fm, i, &x)?;
        out.offset.push(off);
        out.a.push(a);
        out.b.push(apply_generator(system, policy, fm, i, &x) / a);
        if out.a.len() == cfg.n_samples {
            break;
        }
    }
    if out.a.is_empty() {
        return Err(ReductionError::EmptyLevelSet {
            feature: i,
            xi,
            band,
        });
    }
    Ok(out)
}

fn bounds_of(s: &LevelSample) -> LevelBounds {
    let fold = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)))
    };
    let (a_minus, a_plus) = fold(&s.a);
    let (b_minus, b_plus) = fold(&s.b);
    LevelBounds {
        a_minus,
        a_plus,
        b_minus,
        b_plus,
    }
}

/// Empirical inf/sup of `a` and `b` over the band around the level set
/// `p_i(x) = ξ`. Adding samples (same seed) never narrows the bounds.
pub fn level_set_bounds(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    fm: &FeatureMap,
    i: usize,
    xi: f64,
    cfg: &SamplerConfig,
) -> Result<LevelBounds, ReductionError> {
    Ok(bounds_of(&sample_level_set(system, policy, fm, i, xi, cfg)?))
}

/// Least-squares line `y ≈ c0 + c1·s`; returns `(c0, max |residual|)`.
fn detrend(s: &[f64], y: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let ms = s.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = s.iter().map(|v| (v - ms) * (v - ms)).sum();
    let sxy: f64 = s.iter().zip(y).map(|(a, b)| (a - ms) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let c0 = my - slope * ms;
    let spread = s
        .iter()
        .zip(y)
        .map(|(a, b)| (b - c0 - slope * a).abs())
        .fold(0.0, f64::max);
    (c0, spread)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub coordinate: usize,
    pub xi: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    pub b_minus: f64,
    pub b_plus: f64,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub coordinate: usize,
    /// Largest spread of `a` within a level band once the linear trend across
    /// the band is removed.
    pub max_a_spread: f64,
    pub max_b_spread: f64,
    pub lipschitz_alpha: f64,
    pub lipschitz_beta: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub band_fraction: f64,
    pub tolerance: f64,
    pub rows: Vec<LevelRow>,
    pub coordinates: Vec<CoordinateSummary>,
    pub satisfied: bool,
}

impl AssumptionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

/// Evaluate the level-set bounds over a grid of levels per feature.
///
/// The raw `a±`, `b±` include the variation caused by the band itself (for
/// instance `b = ξ/2` moves by `band/2` across it), so the verdict compares
/// the spread left after removing a linear trend in `p_i(x) − ξ` against
/// `tol · (1 + max|value|)`.
pub fn check_assumptions(
    system: &StochasticSystem,
    policy: &ControlPolicy,
    fm: &FeatureMap,
    cfg: &SamplerConfig,
    tol: f64,
) -> Result<AssumptionReport, ReductionError> {
    let mut rows = Vec::new();
    let mut coordinates = Vec::new();
    for i in 0..fm.k() {
        let (lo, hi) = *cfg.xi_ranges.get(i).ok_or_else(|| {
            ReductionError::InvalidSampler(format!("no xi range for feature {i}"))
        })?;
        let levels = cfg.levels.max(1);
        let grid: Vec<f64> = if levels == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..levels)
                .map(|j| lo + (hi - lo) * j as f64 / (levels - 1) as f64)
                .collect()
        };
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        let (mut max_a, mut max_b) = (0.0f64, 0.0f64);
        let mut all_ok = true;
        for &xi in &grid {
            let s = sample_level_set(system, policy, fm, i, xi, cfg)?;
            let bnd = bounds_of(&s);
            let (a0, sa) = detrend(&s.offset, &s.a);
            let (b0, sb) = detrend(&s.offset, &s.b);
            let scale_a = 1.0 + bnd.a_minus.abs().max(bnd.a_plus.abs());
            let scale_b = 1.0 + bnd.b_minus.abs().max(bnd.b_plus.abs());
            let ok = sa <= tol * scale_a && sb <= tol * scale_b;
            all_ok &= ok;
            max_a = max_a.max(sa);
            max_b = max_b.max(sb);
            alpha.push(a0);
            beta.push(b0);
            rows.push(LevelRow {
                coordinate: i,
                xi,
                a_minus: bnd.a_minus,
                a_plus: bnd.a_plus,
                b_minus: bnd.b_minus,
                b_plus: bnd.b_plus,
                verdict: if ok { "satisfied" } else { "violated" }.into(),
            });
        }
        let lipschitz = |v: &[f64]| {
            grid.windows(2)
                .zip(v.windows(2))
                .map(|(g, w)| ((w[1] - w[0]) / (g[1] - g[0])).abs())
                .fold(0.0, f64::max)
        };
        coordinates.push(CoordinateSummary {
            coordinate: i,
            max_a_spread: max_a,
            max_b_spread: max_b,
            lipschitz_alpha: lipschitz(&alpha),
            lipschitz_beta: lipschitz(&beta),
            satisfied: all_ok,
        });
    }
    let satisfied = coordinates.iter().all(|c| c.satisfied);
    Ok(AssumptionReport {
        lower: cfg.lower.clone(),
        upper: cfg.upper.clone(),
        band_fraction: cfg.band_fraction,
        tolerance: tol,
        rows,
        coordinates,
        satisfied,
    })
}

/// `k` scalar feature SDEs `dξ_i = α_i β_i dt + √α_i dB_i` on ranges `I_i`.
#[derive(Clone)]
pub struct ReducedSde {
    alpha: Vec<ScalarFn>,
    beta: Vec<ScalarFn>,
    ranges: Vec<(f64, f64)>,
}

impl fmt::Debug for ReducedSde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReducedSde")
            .field("k", &self.alpha.len())
            .field("ranges", &self.ranges)
            .finish_non_exhaustive()
    }
}

impl ReducedSde {
    /// Unchecked constructor; see [`build_reduced_sde`] for the validated one.
    pub fn new(alpha: Vec<ScalarFn>, beta: Vec<ScalarFn>, ranges: Vec<(f64, f64)>) -> Self {
        assert_eq!(alpha.len(), beta.len(), "alpha/beta count mismatch");
        assert_eq!(alpha.len(), ranges.len(), "alpha/range count mismatch");
        Self {
            alpha,
            beta,
            ranges,
        }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, i: usize, xi: f64) -> f64 {
        (self.alpha[i])(xi)
    }

    pub fn beta(&self, i: usize, xi: f64) -> f64 {
        (self.beta[i])(xi)
    }

    pub fn range(&self, i: usize) -> (f64, f64) {
        self.ranges[i]
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    /// `(α_i β_i)(ξ_i)` per coordinate.
    pub fn drift(&self, xi: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|i| self.alpha(i, xi[i]) * self.beta(i, xi[i])).collect()
    }

    /// `α_i(ξ_i)` per coordinate.
    pub fn diffusion_diag(&self, xi: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|i| self.alpha(i, xi[i])).collect()
    }
}

/// Build a reduced model, rejecting it if some `α_i` is not positive and
/// finite on a grid of its range, or some `β_i` is not finite there.
pub fn build_reduced_sde(
    alpha: Vec<ScalarFn>,
    beta: Vec<ScalarFn>,
    ranges: Vec<(f64, f64)>,
) -> Result<ReducedSde, ReductionError> {
    if alpha.len() != beta.len() || alpha.len() != ranges.len() {
        return Err(ReductionError::InvalidSampler(format!(
            "{} alphas, {} betas, {} ranges",
            alpha.len(),
            beta.len(),
            ranges.len()
        )));
    }
    const GRID: usize = 201;
    for (c, &(lo, hi)) in ranges.iter().enumerate() {
        for j in 0..GRID {
            let xi = lo + (hi - lo) * j as f64 / (GRID - 1) as f64;
            let a = alpha[c](xi);
            let b = beta[c](xi);
            if !(a > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(ReductionError::RejectedAlpha {
                    coordinate: c,
                    xi,
                    alpha: a,
                });
            }
        }
    }
    Ok(ReducedSde::new(alpha, beta, ranges))
}
