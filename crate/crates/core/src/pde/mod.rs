//! Reduced value and safety PDEs: assembly, pointwise residuals, the
//! finite-difference oracle and the Riccati oracle for linear-quadratic cases.

mod fd;
mod riccati;

pub use fd::{solve_fd, solve_fd_with, write_solution_csv, FdOptions, FdSolution};
pub use riccati::{riccati_solution, riccati_value, LqPreset};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::PdeError;
use crate::montecarlo::StateFn;
use crate::reduction::ReducedSde;

/// `ξ ↦ vector[k]`.
pub type FieldFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Value,
    Safety,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDirection {
    /// Terminal data at `t = T`, solved backward.
    Backward,
    /// Initial data at `t = 0`, solved forward.
    Forward,
}

/// Condition on one face of the domain box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    Dirichlet(f64),
    /// Dirichlet with the terminal/initial data frozen in time.
    FromData,
    /// Zero normal derivative (reflecting).
    Neumann,
}

/// `[lower, upper]` face per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub faces: Vec<[Face; 2]>,
}

impl Boundary {
    pub fn uniform(k: usize, face: Face) -> Self {
        Self {
            faces: vec![[face; 2]; k],
        }
    }
}

/// A reduced PDE on a box `Ω × [0, T]`.
///
/// Both kinds are solved as `u_s = drift·∇u + ½Σ a_i ∂²u/∂ξ_i² − r u` in the
/// elapsed time `s` (`s = T − t` for value problems, `s = t` for safety).
#[derive(Clone)]
pub struct PdeProblem {
    pub kind: PdeKind,
    pub k: usize,
    pub drift: FieldFn,
    pub diffusion_diag: FieldFn,
    pub reaction: StateFn,
    pub time_direction: TimeDirection,
    pub data: StateFn,
    /// Safe-set function for safety problems; nodes with `r(ξ) ≤ 0` are held at 0.
    pub safe_set: Option<StateFn>,
    pub boundary: Boundary,
    pub domain: Vec<(f64, f64)>,
    pub horizon: f64,
}

impl fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PdeProblem")
            .field("kind", &self.kind)
            .field("k", &self.k)
            .field("time_direction", &self.time_direction)
            .field("boundary", &self.boundary)
            .field("domain", &self.domain)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// Pointwise PDE coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub reaction: f64,
}

impl PdeProblem {
    pub fn coefficients(&self, xi: &[f64]) -> Coefficients {
        Coefficients {
            drift: (self.drift)(xi),
            diffusion: (self.diffusion_diag)(xi),
            reaction: (self.reaction)(xi),
        }
    }

    /// Elapsed solve time for calendar time `t`.
    pub fn elapsed(&self, t: f64) -> f64 {
        match self.time_direction {
            TimeDirection::Backward => self.horizon - t,
            TimeDirection::Forward => t,
        }
    }

    pub fn contains(&self, xi: &[f64]) -> bool {
        xi.len() == self.k
            && xi
                .iter()
                .zip(&self.domain)
                .all(|(v, (lo, hi))| *v >= lo - 1e-12 && *v <= hi + 1e-12)
    }

    /// Data at `s = 0`, including the zero outside the safe set.
    pub fn initial_value(&self, xi: &[f64]) -> f64 {
        match &self.safe_set {
            Some(r) if r(xi) <= 0.0 => 0.0,
            _ => (self.data)(xi),
        }
    }

    pub fn validate(&self) -> Result<(), PdeError> {
        if self.k == 0 || self.domain.len() != self.k || self.boundary.faces.len() != self.k {
            return Err(PdeError::InvalidProblem(format!(
                "dimension {} with {} domain axes and {} boundary axes",
                self.k,
                self.domain.len(),
                self.boundary.faces.len()
            )));
        }
        if self.domain.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(PdeError::InvalidProblem("empty domain axis".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(PdeError::InvalidProblem("horizon must be positive".into()));
        }
        Ok(())
    }
}

fn value_boundary(k: usize) -> Boundary {
    Boundary::uniform(k, Face::FromData)
}

/// Value PDE `φ_t + αβ·∇φ + ½Σα_i φ_ii − rφ = 0` with
/// `φ(ξ, T) = exp(−w_T·r(ξ))`, truncated to `domain` with frozen terminal data
/// on the faces.
pub fn assemble_value_pde(
    reduced: &ReducedSde,
    r: StateFn,
    terminal_weight: f64,
    domain: Vec<(f64, f64)>,
    horizon: f64,
) -> PdeProblem {
    let k = reduced.dim();
    let (ra, rb) = (reduced.clone(), reduced.clone());
    let rt = r.clone();
    PdeProblem {
        kind: PdeKind::Value,
        k,
        drift: Arc::new(move |xi| ra.drift(xi)),
        diffusion_diag: Arc::new(move |xi| rb.diffusion_diag(xi)),
        reaction: r,
        time_direction: TimeDirection::Backward,
        data: Arc::new(move |xi| (-terminal_weight * rt(xi)).exp()),
        safe_set: None,
        boundary: value_boundary(k),
        domain,
        horizon,
    }
}

/// Safety PDE `F_t − αβ·∇F − ½Σα_i F_ii = 0` with `F(ξ, 0) = 1` on the safe
/// set `{r ≥ 0}` and `F = 0` outside it. Faces of the box that lie inside
/// the safe set get `Face::FromData` unless overridden afterwards.
pub fn assemble_safety_pde(
    reduced: &ReducedSde,
    r: StateFn,
    domain: Vec<(f64, f64)>,
    horizon: f64,
) -> Result<PdeProblem, PdeError> {
    let k = reduced.dim();
    // probe the box for an interior safe point
    const PROBES: usize = 21;
    let total = PROBES.pow(k as u32);
    let nonempty = (0..total).any(|mut idx| {
        let xi: Vec<f64> = domain
            .iter()
            .map(|(lo, hi)| {
                let j = idx % PROBES;
                idx /= PROBES;
                lo + (hi - lo) * (j as f64 + 0.5) / PROBES as f64
            })
            .collect();
        r(&xi) > 0.0
    });
    if !nonempty {
        return Err(PdeError::EmptySafeSet);
    }
    let (ra, rb) = (reduced.clone(), reduced.clone());
    Ok(PdeProblem {
        kind: PdeKind::Safety,
        k,
        drift: Arc::new(move |xi| ra.drift(xi)),
        diffusion_diag: Arc::new(move |xi| rb.diffusion_diag(xi)),
        reaction: Arc::new(|_| 0.0),
        time_direction: TimeDirection::Forward,
        data: Arc::new(|_| 1.0),
        safe_set: Some(r),
        boundary: Boundary::uniform(k, Face::FromData),
        domain,
        horizon,
    })
}

/// Value and derivatives of a candidate solution at one space-time point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDerivatives {
    pub value: f64,
    pub dt: f64,
    pub grad: Vec<f64>,
    pub hess_diag: Vec<f64>,
}

/// Anything that can report value, time derivative, gradient and Hessian
/// diagonal at `(ξ, t)`.
pub trait Candidate {
    fn derivatives(&self, xi: &[f64], t: f64) -> PointDerivatives;
}

impl<F> Candidate for F
where
    F: Fn(&[f64], f64) -> PointDerivatives,
{
    fn derivatives(&self, xi: &[f64], t: f64) -> PointDerivatives {
        self(xi, t)
    }
}

/// Residual from precomputed coefficients:
/// value `φ_t + drift·∇φ + ½Σa φ_ii − rφ`, safety `F_t − drift·∇F − ½Σa F_ii`.
pub fn residual_from(kind: PdeKind, c: &Coefficients, d: &PointDerivatives) -> f64 {
    let gen: f64 = c
        .drift
        .iter()
        .zip(&d.grad)
        .map(|(b, g)| b * g)
        .sum::<f64>()
        + 0.5 * c.diffusion.iter().zip(&d.hess_diag).map(|(a, h)| a * h).sum::<f64>();
    match kind {
        PdeKind::Value => d.dt + gen - c.reaction * d.value,
        PdeKind::Safety => d.dt - gen,
    }
}

/// Signed PDE residual of `candidate` at `(ξ, t)`.
pub fn residual(problem: &PdeProblem, candidate: &dyn Candidate, xi: &[f64], t: f64) -> f64 {
    residual_from(problem.kind, &problem.coefficients(xi), &candidate.derivatives(xi, t))
}
