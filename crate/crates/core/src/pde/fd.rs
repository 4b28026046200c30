//! Crank–Nicolson finite differences for `k ≤ 2`, with Peaceman–Rachford ADI
//! splitting in two dimensions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Candidate, Face, PdeKind, PdeProblem, PointDerivatives};
use crate::error::PdeError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdOptions {
    /// Keep every `store_every`-th time level (the last level is always kept).
    /// `None` picks a stride that bounds memory.
    pub store_every: Option<usize>,
    /// Leading steps replaced by two implicit-Euler half steps each, which
    /// damps Crank–Nicolson oscillations from discontinuous data.
    pub rannacher_steps: usize,
}

impl FdOptions {
    pub fn for_problem(problem: &PdeProblem) -> Self {
        Self {
            store_every: None,
            rannacher_steps: match problem.kind {
                PdeKind::Value => 0,
                PdeKind::Safety => 4,
            },
        }
    }
}

/// Node values on the full space grid at the stored time levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSolution {
    pub kind: PdeKind,
    pub horizon: f64,
    pub d_xi: Vec<f64>,
    /// Internal step. The requested step is split evenly when its explicit
    /// half would break monotonicity.
    pub dt: f64,
    /// Stride of stored levels in internal steps.
    pub store_every: usize,
    pub rannacher_steps: usize,
    /// Node coordinates per axis.
    pub axes: Vec<Vec<f64>>,
    /// Elapsed solve time of each stored level, ascending.
    pub elapsed: Vec<f64>,
    /// Values per stored level; nodes ordered with the last axis fastest.
    pub levels: Vec<Vec<f64>>,
    /// Node-axis pairs where the drift was upwinded (cell Péclet > 2).
    pub upwind_nodes: usize,
    pub max_peclet: f64,
}

const MEMORY_BUDGET: usize = 20_000_000;

struct Stencil {
    n: Vec<usize>,
    stride: Vec<usize>,
    /// `[axis][node] = (lower, centre, upper)`.
    coef: Vec<Vec<[f64; 3]>>,
    fixed: Vec<Option<f64>>,
    upwind: usize,
    max_peclet: f64,
    scale: f64,
    factors: Vec<Factor>,
}

fn axis_nodes(lo: f64, hi: f64, h: f64) -> Result<Vec<f64>, PdeError> {
    if !(h > 0.0) {
        return Err(PdeError::InvalidGrid(format!("spacing must be positive, got {h}")));
    }
    let cells = ((hi - lo) / h).round();
    if cells < 2.0 || (cells * h - (hi - lo)).abs() > 1e-9 * (hi - lo) {
        return Err(PdeError::InvalidGrid(format!(
            "[{lo}, {hi}] is not a whole number (>= 2) of cells of {h}"
        )));
    }
    let cells = cells as usize;
    Ok((0..=cells).map(|j| lo + (hi - lo) * j as f64 / cells as f64).collect())
}

fn node_coords(axes: &[Vec<f64>], stride: &[usize], node: usize) -> Vec<f64> {
    axes.iter()
        .zip(stride)
        .map(|(ax, s)| ax[(node / s) % ax.len()])
        .collect()
}

impl Stencil {
    fn build(
        problem: &PdeProblem,
        axes: &[Vec<f64>],
        h: &[f64],
        scale: f64,
    ) -> Result<Self, PdeError> {
        let k = problem.k;
        let n: Vec<usize> = axes.iter().map(Vec::len).collect();
        let mut stride = vec![1; k];
        for a in (0..k.saturating_sub(1)).rev() {
            stride[a] = stride[a + 1] * n[a + 1];
        }
        let total: usize = n.iter().product();
        let mut coef = vec![vec![[0.0; 3]; total]; k];
        let mut fixed = vec![None; total];
        let mut upwind = 0;
        let mut max_peclet: f64 = 0.0;
        for node in 0..total {
            let xi = node_coords(axes, &stride, node);
            let c = problem.coefficients(&xi);
            for ax in 0..k {
                let j = (node / stride[ax]) % n[ax];
                let face = if j == 0 {
                    Some(problem.boundary.faces[ax][0])
                } else if j == n[ax] - 1 {
                    Some(problem.boundary.faces[ax][1])
                } else {
                    None
                };
                match face {
                    Some(Face::Dirichlet(v)) => fixed[node] = fixed[node].or(Some(v)),
                    Some(Face::FromData) => {
                        fixed[node] = fixed[node].or(Some(problem.initial_value(&xi)))
                    }
                    _ => {}
                }
            }
            if let Some(r) = &problem.safe_set {
                if r(&xi) <= 0.0 {
                    fixed[node] = Some(0.0);
                }
            }
            for ax in 0..k {
                let d = 0.5 * c.diffusion[ax];
                if !(d > 0.0 && d.is_finite()) {
                    return Err(PdeError::InvalidProblem(format!(
                        "diffusion[{ax}] = {} at {xi:?} is not positive",
                        c.diffusion[ax]
                    )));
                }
                let b = c.drift[ax];
                let hh = h[ax];
                let pe = b.abs() * hh / d;
                max_peclet = max_peclet.max(pe);
                let diff = d / (hh * hh);
                let share = c.reaction / k as f64;
                let mut s = if pe > 2.0 {
                    upwind += 1;
                    if b > 0.0 {
                        [diff, -2.0 * diff - b / hh - share, diff + b / hh]
                    } else {
                        [diff - b / hh, -2.0 * diff + b / hh - share, diff]
                    }
                } else {
                    [diff - b / (2.0 * hh), -2.0 * diff - share, diff + b / (2.0 * hh)]
                };
                // reflecting faces: ghost node mirrors the interior neighbour
                let j = (node / stride[ax]) % n[ax];
                if j == 0 {
                    s[2] += s[0];
                    s[0] = 0.0;
                } else if j == n[ax] - 1 {
                    s[0] += s[2];
                    s[2] = 0.0;
                }
                coef[ax][node] = s;
            }
        }
        let mut st = Self {
            n,
            stride,
            coef,
            fixed,
            upwind,
            max_peclet,
            scale,
            factors: Vec::new(),
        };
        st.factorise(scale);
        Ok(st)
    }

    /// Calls `f(node, j)` for every node, in order of ascending axis index
    /// `j` along `ax` (or descending when `rev`), so that each line is swept
    /// in sequence while memory is walked contiguously.
    #[inline]
    fn sweep(&self, ax: usize, rev: bool, mut f: impl FnMut(usize, usize)) {
        let s = self.stride[ax];
        let n = self.n[ax];
        let blocks = self.fixed.len() / (n * s);
        for blk in 0..blocks {
            let base = blk * n * s;
            for jj in 0..n {
                let j = if rev { n - 1 - jj } else { jj };
                let row = base + j * s;
                for node in row..row + s {
                    f(node, j);
                }
            }
        }
    }

    /// Largest `−L_ax[node, node]` over free nodes and axes.
    fn max_rate(&self) -> f64 {
        let mut m: f64 = 0.0;
        for coef in &self.coef {
            for (node, c) in coef.iter().enumerate() {
                if self.fixed[node].is_none() {
                    m = m.max(-c[1]);
                }
            }
        }
        m
    }

    /// LU factors of `I − scale·L_ax` for every axis.
    fn factorise(&mut self, scale: f64) {
        self.scale = scale;
        let k = self.n.len();
        self.factors = (0..k)
            .map(|ax| {
                let total = self.fixed.len();
                let s = self.stride[ax];
                let mut f = Factor {
                    lower: vec![0.0; total],
                    inv_pivot: vec![0.0; total],
                    upper: vec![0.0; total],
                };
                self.sweep(ax, false, |node, j| {
                    let (sub, diag, sup) = match self.fixed[node] {
                        Some(_) => (0.0, 1.0, 0.0),
                        None => {
                            let [a, b, c] = self.coef[ax][node];
                            (-scale * a, 1.0 - scale * b, -scale * c)
                        }
                    };
                    let (w, pivot) = if j == 0 {
                        (0.0, diag)
                    } else {
                        let prev = node - s;
                        let w = sub * f.inv_pivot[prev];
                        (w, diag - w * f.upper[prev])
                    };
                    f.lower[node] = w;
                    f.inv_pivot[node] = 1.0 / pivot;
                    f.upper[node] = sup;
                });
                f
            })
            .collect();
    }

    /// `out = (I + scale·L_ax) u` on free nodes, fixed values elsewhere.
    fn apply(&self, ax: usize, u: &[f64], scale: f64, out: &mut [f64]) {
        let s = self.stride[ax];
        let n = self.n[ax];
        let coef = &self.coef[ax];
        self.sweep(ax, false, |node, j| {
            if let Some(v) = self.fixed[node] {
                out[node] = v;
                return;
            }
            let [a, b, c] = coef[node];
            let mut acc = b * u[node];
            if j > 0 {
                acc += a * u[node - s];
            }
            if j + 1 < n {
                acc += c * u[node + s];
            }
            out[node] = u[node] + scale * acc;
        });
    }

    /// Solve `(I − scale·L_ax) out = rhs` with the stored factors.
    fn solve(&self, ax: usize, rhs: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(scale, self.scale);
        let s = self.stride[ax];
        let n = self.n[ax];
        let f = &self.factors[ax];
        for (node, o) in out.iter_mut().enumerate() {
            *o = self.fixed[node].unwrap_or(rhs[node]);
        }
        self.sweep(ax, false, |node, j| {
            if j > 0 {
                out[node] -= f.lower[node] * out[node - s];
            }
        });
        self.sweep(ax, true, |node, j| {
            if j + 1 == n {
                out[node] *= f.inv_pivot[node];
            } else {
                out[node] = (out[node] - f.upper[node] * out[node + s]) * f.inv_pivot[node];
            }
        });
    }
}

struct Factor {
    lower: Vec<f64>,
    inv_pivot: Vec<f64>,
    upper: Vec<f64>,
}

fn grid_for(problem: &PdeProblem, d_xi: &[f64], dt: f64) -> Result<(Vec<Vec<f64>>, usize), PdeError> {
    problem.validate()?;
    if problem.k > 2 {
        return Err(PdeError::InvalidGrid(format!(
            "finite differences support k <= 2, got k = {}",
            problem.k
        )));
    }
    if d_xi.len() != problem.k {
        return Err(PdeError::InvalidGrid(format!(
            "{} spacings for {} axes",
            d_xi.len(),
            problem.k
        )));
    }
    let axes = problem
        .domain
        .iter()
        .zip(d_xi)
        .map(|((lo, hi), h)| axis_nodes(*lo, *hi, *h))
        .collect::<Result<Vec<_>, _>>()?;
    if !(dt > 0.0) {
        return Err(PdeError::InvalidGrid(format!("dt must be positive, got {dt}")));
    }
    let steps = (problem.horizon / dt).round();
    if steps < 1.0 || (steps * dt - problem.horizon).abs() > 1e-9 * problem.horizon {
        return Err(PdeError::InvalidGrid(format!(
            "horizon {} is not a whole number of steps of {dt}",
            problem.horizon
        )));
    }
    Ok((axes, steps as usize))
}

struct Stepper<'a> {
    st: &'a Stencil,
    k: usize,
    dt: f64,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
}

impl Stepper<'_> {
    fn crank_nicolson(&mut self, u: &mut [f64]) {
        let h = 0.5 * self.dt;
        if self.k == 1 {
            self.st.apply(0, u, h, &mut self.tmp);
            self.st.solve(0, &self.tmp, h, u);
        } else {
            self.st.apply(1, u, h, &mut self.tmp);
            self.st.solve(0, &self.tmp, h, &mut self.tmp2);
            self.st.apply(0, &self.tmp2, h, &mut self.tmp);
            self.st.solve(1, &self.tmp, h, u);
        }
    }

    fn implicit_half_steps(&mut self, u: &mut [f64]) {
        let h = 0.5 * self.dt;
        for _ in 0..2 {
            self.tmp.copy_from_slice(u);
            if self.k == 1 {
                self.st.solve(0, &self.tmp, h, u);
            } else {
                self.st.solve(0, &self.tmp, h, &mut self.tmp2);
                self.st.solve(1, &self.tmp2, h, u);
            }
        }
    }
}

/// Finite-difference solve with default options.
pub fn solve_fd(problem: &PdeProblem, d_xi: &[f64], dt: f64) -> Result<FdSolution, PdeError> {
    solve_fd_with(problem, d_xi, dt, &FdOptions::for_problem(problem))
}

pub fn solve_fd_with(
    problem: &PdeProblem,
    d_xi: &[f64],
    dt: f64,
    opts: &FdOptions,
) -> Result<FdSolution, PdeError> {
    let (axes, steps) = grid_for(problem, d_xi, dt)?;
    let mut st = Stencil::build(problem, &axes, d_xi, 0.5 * dt)?;
    // the explicit half of a Crank–Nicolson step is monotone only while
    // dt/2 times the largest diagonal rate stays below 1
    let sub = ((0.5 * dt * st.max_rate()).ceil() as usize).max(1);
    let dt_outer = dt;
    let dt = dt_outer / sub as f64;
    if sub > 1 {
        st.factorise(0.5 * dt);
    }
    let total: usize = st.n.iter().product();
    let store_every = opts.store_every.unwrap_or_else(|| {
        if total * (steps + 1) <= MEMORY_BUDGET {
            1
        } else {
            let by_time = ((0.01 / dt_outer).round() as usize).max(1);
            by_time.max((total * (steps + 1)).div_ceil(MEMORY_BUDGET))
        }
    });
    if store_every == 0 {
        return Err(PdeError::InvalidGrid("store_every must be positive".into()));
    }
    let (steps, store_every) = (steps * sub, store_every * sub);
    let mut u: Vec<f64> = (0..total)
        .map(|node| problem.initial_value(&node_coords(&axes, &st.stride, node)))
        .collect();
    let mut elapsed = vec![0.0];
    let mut levels = vec![u.clone()];
    let mut stepper = Stepper {
        st: &st,
        k: problem.k,
        dt,
        tmp: vec![0.0; total],
        tmp2: vec![0.0; total],
    };
    for step in 1..=steps {
        if step <= opts.rannacher_steps {
            stepper.implicit_half_steps(&mut u);
        } else {
            stepper.crank_nicolson(&mut u);
        }
        if step % store_every == 0 || step == steps {
            elapsed.push(step as f64 * dt);
            levels.push(u.clone());
        }
    }
    Ok(FdSolution {
        kind: problem.kind,
        horizon: problem.horizon,
        d_xi: d_xi.to_vec(),
        dt,
        store_every,
        rannacher_steps: opts.rannacher_steps,
        axes,
        elapsed,
        levels,
        upwind_nodes: st.upwind,
        max_peclet: st.max_peclet,
    })
}

impl FdSolution {
    pub fn k(&self) -> usize {
        self.axes.len()
    }

    fn strides(&self) -> Vec<usize> {
        let k = self.k();
        let mut stride = vec![1; k];
        for a in (0..k.saturating_sub(1)).rev() {
            stride[a] = stride[a + 1] * self.axes[a + 1].len();
        }
        stride
    }

    fn to_elapsed(&self, t: f64) -> f64 {
        match self.kind {
            PdeKind::Value => self.horizon - t,
            PdeKind::Safety => t,
        }
    }

    /// Calendar times of the stored levels, ascending.
    pub fn times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.elapsed.iter().map(|s| self.to_elapsed(*s)).collect();
        t.sort_by(f64::total_cmp);
        t
    }

    /// Stored level closest to calendar time `t`.
    pub fn level_at(&self, t: f64) -> &[f64] {
        let s = self.to_elapsed(t);
        let i = self
            .elapsed
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        &self.levels[i]
    }

    fn spatial(&self, level: &[f64], xi: &[f64]) -> f64 {
        let stride = self.strides();
        let k = self.k();
        let mut base = 0usize;
        let mut frac = vec![0.0; k];
        for a in 0..k {
            let ax = &self.axes[a];
            let h = (ax[ax.len() - 1] - ax[0]) / (ax.len() - 1) as f64;
            let pos = ((xi[a] - ax[0]) / h).clamp(0.0, (ax.len() - 1) as f64);
            let j = (pos.floor() as usize).min(ax.len() - 2);
            frac[a] = pos - j as f64;
            base += j * stride[a];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            let mut node = base;
            for a in 0..k {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    node += stride[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * level[node];
            }
        }
        acc
    }

    /// Multilinear interpolation in space, linear between stored levels.
    pub fn value_at(&self, xi: &[f64], t: f64) -> Result<f64, PdeError> {
        let k = self.k();
        let inside = xi.len() == k
            && xi.iter().zip(&self.axes).all(|(v, ax)| {
                *v >= ax[0] - 1e-12 && *v <= ax[ax.len() - 1] + 1e-12
            });
        let s = self.to_elapsed(t);
        let s_max = *self.elapsed.last().unwrap();
        if !inside || s < -1e-12 || s > s_max + 1e-12 {
            let mut p = xi.to_vec();
            p.push(t);
            return Err(PdeError::OutOfDomain(p));
        }
        let i = self.elapsed.partition_point(|e| *e <= s).clamp(1, self.elapsed.len() - 1);
        let (s0, s1) = (self.elapsed[i - 1], self.elapsed[i]);
        let w = ((s - s0) / (s1 - s0)).clamp(0.0, 1.0);
        let v0 = self.spatial(&self.levels[i - 1], xi);
        if w == 0.0 {
            return Ok(v0);
        }
        let v1 = self.spatial(&self.levels[i], xi);
        Ok(v0 + w * (v1 - v0))
    }

    pub fn node_count(&self) -> usize {
        self.levels[0].len()
    }

    pub fn node(&self, index: usize) -> Vec<f64> {
        node_coords(&self.axes, &self.strides(), index)
    }

    /// Largest violation of the discrete update identity over consecutive
    /// stored Crank–Nicolson levels. `None` unless every level was stored.
    pub fn scheme_defect(&self, problem: &PdeProblem) -> Option<f64> {
        if self.store_every != 1 {
            return None;
        }
        let st = Stencil::build(problem, &self.axes, &self.d_xi, 0.5 * self.dt).ok()?;
        let total = self.node_count();
        let h = 0.5 * self.dt;
        let mut a = vec![0.0; total];
        let mut b = vec![0.0; total];
        let mut v = vec![0.0; total];
        let mut worst: f64 = 0.0;
        for n in self.rannacher_steps..self.levels.len() - 1 {
            let (u0, u1) = (&self.levels[n], &self.levels[n + 1]);
            if self.k() == 1 {
                st.apply(0, u1, -h, &mut a);
                st.apply(0, u0, h, &mut b);
            } else {
                st.apply(1, u0, h, &mut a);
                st.solve(0, &a, h, &mut v);
                st.apply(1, u1, -h, &mut a);
                st.apply(0, &v, h, &mut b);
            }
            for node in 0..total {
                if st.fixed[node].is_none() {
                    worst = worst.max((a[node] - b[node]).abs());
                }
            }
        }
        Some(worst)
    }

    /// `(ξ, t, value)` at every node of the stored level nearest each `t`.
    pub fn rows_at(&self, times: &[f64]) -> Vec<(Vec<f64>, f64, f64)> {
        let mut rows = Vec::new();
        for &t in times {
            let level = self.level_at(t);
            for (i, v) in level.iter().enumerate() {
                rows.push((self.node(i), t, *v));
            }
        }
        rows
    }
}

impl Candidate for FdSolution {
    /// Central differences of the interpolant on the grid and stored-level
    /// spacing, one-sided at the edges.
    fn derivatives(&self, xi: &[f64], t: f64) -> PointDerivatives {
        let k = self.k();
        let f = |p: &[f64], tt: f64| self.value_at(p, tt).unwrap_or(f64::NAN);
        let value = f(xi, t);
        let ds = self.elapsed.get(1).map_or(self.dt, |e| e - self.elapsed[0]);
        let times = self.times();
        let (t0, t1) = (times[0], times[times.len() - 1]);
        let (lo, hi) = ((t - ds).max(t0), (t + ds).min(t1));
        let dt = (f(xi, hi) - f(xi, lo)) / (hi - lo);
        let mut grad = vec![0.0; k];
        let mut hess_diag = vec![0.0; k];
        let mut p = xi.to_vec();
        for a in 0..k {
            let h = self.d_xi[a];
            let ax = &self.axes[a];
            let centre = xi[a].clamp(ax[0] + h, ax[ax.len() - 1] - h);
            p[a] = centre - h;
            let fm = f(&p, t);
            p[a] = centre;
            let f0 = f(&p, t);
            p[a] = centre + h;
            let fp = f(&p, t);
            p[a] = xi[a];
            grad[a] = (fp - fm) / (2.0 * h);
            hess_diag[a] = (fp - 2.0 * f0 + fm) / (h * h);
        }
        PointDerivatives {
            value,
            dt,
            grad,
            hess_diag,
        }
    }
}

/// CSV with header `xi1,...,xik,t,value`.
pub fn write_solution_csv<W: Write>(
    rows: &[(Vec<f64>, f64, f64)],
    k: usize,
    mut w: W,
) -> std::io::Result<()> {
    let mut header: Vec<String> = (1..=k).map(|i| format!("xi{i}")).collect();
    header.extend(["t", "value"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for (xi, t, v) in rows {
        for x in xi {
            write!(w, "{x},")?;
        }
        writeln!(w, "{t},{v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::StateFn;
    use crate::pde::{assemble_safety_pde, assemble_value_pde, residual, riccati_value, Boundary};
    use crate::presets;
    use crate::reduction::ReducedSde;
    use std::sync::Arc;

    fn heat_error(dx: f64, dt: f64) -> f64 {
        let p = presets::heat_oracle_problem();
        let sol = solve_fd(&p, &[dx], dt).unwrap();
        let mut worst: f64 = 0.0;
        for (i, s) in sol.elapsed.iter().enumerate() {
            let t = p.horizon - s;
            for (node, v) in sol.levels[i].iter().enumerate() {
                let x = sol.node(node)[0];
                worst = worst.max((v - presets::heat_exact(x, t)).abs());
            }
        }
        worst
    }

    #[test]
    fn heat_oracle_accuracy_and_order() {
        let coarse = heat_error(std::f64::consts::PI / 314.0, 1e-3);
        let fine = heat_error(std::f64::consts::PI / 628.0, 5e-4);
        assert!(coarse <= 1e-3, "coarse error {coarse}");
        assert!(coarse / fine >= 3.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn rejects_bad_grids() {
        let p = presets::heat_oracle_problem();
        assert!(matches!(solve_fd(&p, &[0.3], 1e-3), Err(PdeError::InvalidGrid(_))));
        assert!(matches!(
            solve_fd(&p, &[std::f64::consts::PI / 10.0], 0.3),
            Err(PdeError::InvalidGrid(_))
        ));
    }

    #[test]
    fn no_reaction_constant_terminal_stays_one() {
        let red = presets::sys3d_reduced();
        let zero: StateFn = Arc::new(|_| 0.0);
        let p = assemble_value_pde(&red, zero, 0.0, vec![(-2.0, 2.0); 2], 1.0);
        let sol = solve_fd(&p, &[0.1, 0.1], 0.01).unwrap();
        for level in &sol.levels {
            assert!(level.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn reflecting_safe_box_stays_one() {
        let red = presets::sys3d_reduced();
        let one: StateFn = Arc::new(|_| 1.0);
        let mut p = assemble_safety_pde(&red, one, vec![(-2.0, 2.0); 2], 1.0).unwrap();
        p.boundary = Boundary::uniform(2, Face::Neumann);
        let sol = solve_fd(&p, &[0.1, 0.1], 0.01).unwrap();
        for level in &sol.levels {
            assert!(level.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn safety_solution_is_a_probability() {
        let p = presets::sys3d_safety_problem();
        let sol = solve_fd(&p, &[0.05, 0.05], 1e-3).unwrap();
        let first = &sol.levels[0];
        for (node, v) in first.iter().enumerate() {
            assert_eq!(*v, p.initial_value(&sol.node(node)));
        }
        for level in &sol.levels {
            assert!(level.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
        let f = sol.value_at(&[1.5, 1.5], 1.0).unwrap();
        assert!(f > 0.0 && f < 1.0);
    }

    #[test]
    fn value_solution_stays_in_unit_interval() {
        let p = presets::sys3d_value_problem();
        let sol = solve_fd(&p, &[0.05, 0.05], 5e-3).unwrap();
        for level in &sol.levels {
            assert!(level.iter().all(|v| *v > 0.0 && *v <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn value_solution_matches_riccati() {
        let p = presets::sys3d_value_problem();
        let opts = FdOptions {
            store_every: Some(500),
            rannacher_steps: 0,
        };
        let sol = solve_fd_with(&p, &[0.04, 0.04], 1e-3, &opts).unwrap();
        let lq = presets::sys3d_lq();
        let mut worst: f64 = 0.0;
        for i in 0..=10 {
            for j in 0..=10 {
                let xi = [1.0 + 0.1 * i as f64, 1.0 + 0.1 * j as f64];
                let fd = sol.value_at(&xi, 0.5).unwrap();
                let exact = riccati_value(&lq, &xi, 0.5).unwrap();
                worst = worst.max((fd - exact).abs() / exact);
            }
        }
        assert!(worst <= 0.01, "max relative gap {worst}");
    }

    #[test]
    fn update_identity_holds() {
        let p = presets::heat_oracle_problem();
        let sol = solve_fd(&p, &[std::f64::consts::PI / 100.0], 1e-3).unwrap();
        assert_eq!(sol.dt, 1e-3);
        assert!(sol.scheme_defect(&p).unwrap() < 1e-12);
        let p2 = presets::sys3d_value_problem();
        let mut small = p2.clone();
        small.horizon = 0.05;
        let sol2 = solve_fd(&small, &[0.2, 0.2], 1e-2).unwrap();
        assert!(sol2.scheme_defect(&small).unwrap() < 1e-12);
    }

    #[test]
    fn coarse_steps_are_split_to_stay_monotone() {
        let p = presets::heat_oracle_problem();
        // dt/2 · 2d/h² ≈ 5.1 at this spacing
        let sol = solve_fd(&p, &[std::f64::consts::PI / 100.0], 1e-2).unwrap();
        assert!((sol.dt - 1e-2 / 6.0).abs() < 1e-15, "{}", sol.dt);
        assert_eq!(sol.store_every, 6);
        assert_eq!(sol.elapsed.len(), sol.levels.len());
        assert!((sol.elapsed[1] - 1e-2).abs() < 1e-12);
        let peak = sol.levels[0].iter().cloned().fold(0.0, f64::max);
        for level in &sol.levels {
            assert!(level.iter().all(|v| (-1e-12..=peak + 1e-12).contains(v)));
        }
    }

    #[test]
    fn fd_candidate_residual_is_small() {
        let p = presets::heat_oracle_problem();
        let dx = std::f64::consts::PI / 200.0;
        let sol = solve_fd(&p, &[dx], 1e-3).unwrap();
        let ds = sol.elapsed[1] - sol.elapsed[0];
        let truncation = dx * dx + ds * ds;
        for x in [0.5, 1.3, 2.2] {
            for t in [0.2, 0.5, 0.8] {
                let r = residual(&p, &sol, &[x], t);
                assert!(r.abs() <= 10.0 * truncation, "residual {r} at ({x}, {t})");
            }
        }
    }

    #[test]
    fn upwinding_engages_at_high_peclet() {
        let red = ReducedSde::new(
            vec![Arc::new(|_| 0.02)],
            vec![Arc::new(|x| 50.0 * x)],
            vec![(-1.0, 1.0)],
        );
        let one: StateFn = Arc::new(|x| 0.9 - x[0]);
        let p = assemble_safety_pde(&red, one, vec![(-1.0, 1.0)], 0.5).unwrap();
        let sol = solve_fd(&p, &[0.05], 1e-3).unwrap();
        assert!(sol.upwind_nodes > 0 && sol.max_peclet > 2.0);
        for level in &sol.levels {
            assert!(level.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn out_of_domain_query_errors() {
        let p = presets::heat_oracle_problem();
        let sol = solve_fd(&p, &[std::f64::consts::PI / 50.0], 1e-2).unwrap();
        assert!(matches!(sol.value_at(&[4.0], 0.5), Err(PdeError::OutOfDomain(_))));
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        write_solution_csv(&[(vec![1.0, 2.0], 0.5, 0.25)], 2, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "xi1,xi2,t,value\n1,2,0.5,0.25\n");
    }
}
