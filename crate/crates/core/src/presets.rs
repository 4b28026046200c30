//! Systems, features, costs and PDE problems pinned for the reference
//! experiments.

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::montecarlo::{BarrierSpec, CostSpec, StateFn};
use crate::pde::{self, Boundary, Face, LqPreset, PdeProblem};
use crate::reduction::{FeatureMap, ReducedSde};
use crate::sde::{Diffusion, StochasticSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    Sys3dValue,
    Sys3dSafety,
    Sys1000dValue,
    LqScalar,
    HeatOracle,
    #[serde(rename = "feature-ae-3d")]
    FeatureAe3d,
}

impl PresetName {
    pub const ALL: [PresetName; 6] = [
        PresetName::Sys3dValue,
        PresetName::Sys3dSafety,
        PresetName::Sys1000dValue,
        PresetName::LqScalar,
        PresetName::HeatOracle,
        PresetName::FeatureAe3d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Sys3dValue => "sys3d-value",
            PresetName::Sys3dSafety => "sys3d-safety",
            PresetName::Sys1000dValue => "sys1000d-value",
            PresetName::LqScalar => "lq-scalar",
            PresetName::HeatOracle => "heat-oracle",
            PresetName::FeatureAe3d => "feature-ae-3d",
        }
    }
}

impl FromStr for PresetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|p| p.as_str()).collect();
                format!("unknown preset `{s}` (expected one of {})", names.join(", "))
            })
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---- 3-d system: dx1 = (x1+x3)dt, dx2 = (x2−x3)dt, dx3 = x3 dt, σ = I ----

pub fn sys3d_system() -> StochasticSystem {
    StochasticSystem::new(
        3,
        3,
        Arc::new(|x: &[f64], f: &mut [f64]| {
            f[0] = x[0] + x[2];
            f[1] = x[1] - x[2];
            f[2] = x[2];
        }),
        Diffusion::ScaledIdentity(1.0),
    )
    .expect("valid 3-d system")
}

/// `ξ1 = x1 + x2`, `ξ2 = x3`.
pub fn sys3d_features() -> FeatureMap {
    FeatureMap::linear(vec![vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])
}

pub fn sys3d_reduced() -> ReducedSde {
    ReducedSde::new(
        vec![Arc::new(|_| 2.0), Arc::new(|_| 1.0)],
        vec![Arc::new(|x| x / 2.0), Arc::new(|x| x)],
        vec![(-6.0, 6.0); 2],
    )
}

/// `c(x) = ½(x1+x2)² + ½x3²` with unit terminal weight.
pub fn sys3d_cost() -> CostSpec {
    CostSpec::new(|x| 0.5 * (x[0] + x[1]).powi(2) + 0.5 * x[2] * x[2], 1.0)
}

/// `r(ξ) = ½ξ1² + ½ξ2²`.
pub fn sys3d_reaction() -> StateFn {
    Arc::new(|xi: &[f64]| 0.5 * xi[0] * xi[0] + 0.5 * xi[1] * xi[1])
}

pub fn sys3d_reduced_cost() -> CostSpec {
    CostSpec {
        running: sys3d_reaction(),
        terminal_weight: 1.0,
    }
}

pub const SYS3D_HORIZON: f64 = 1.5;
pub const SYS3D_FD_DOMAIN: (f64, f64) = (-6.0, 6.0);

pub fn sys3d_value_problem() -> PdeProblem {
    pde::assemble_value_pde(
        &sys3d_reduced(),
        sys3d_reaction(),
        1.0,
        vec![SYS3D_FD_DOMAIN; 2],
        SYS3D_HORIZON,
    )
}

pub fn sys3d_lq() -> LqPreset {
    LqPreset {
        k: 2,
        m: vec![1.0, 0.0, 0.0, 1.0],
        sigma: vec![2.0, 0.0, 0.0, 1.0],
        r: vec![0.5, 0.0, 0.0, 0.5],
        r_terminal: vec![0.5, 0.0, 0.0, 0.5],
        horizon: SYS3D_HORIZON,
    }
}

/// A full state with the given feature values: `x = (ξ1/2, ξ1/2, ξ2)`.
pub fn sys3d_lift(xi: &[f64]) -> Vec<f64> {
    vec![0.5 * xi[0], 0.5 * xi[0], xi[1]]
}

// ---- 3-d safety: φ(x) = min{−(x1+x2), −x3} + 4 ----

pub const SAFETY_LEVEL: f64 = 4.0;
pub const SAFETY_HORIZON: f64 = 1.0;
pub const SAFETY_FD_DOMAIN: (f64, f64) = (-4.0, 4.0);

pub fn sys3d_barrier() -> BarrierSpec {
    BarrierSpec::new(|x| (-(x[0] + x[1])).min(-x[2]) + SAFETY_LEVEL)
}

pub fn sys3d_reduced_barrier() -> StateFn {
    Arc::new(|xi: &[f64]| (-xi[0]).min(-xi[1]) + SAFETY_LEVEL)
}

/// Lower faces reflect (the far side of the safe set, where the coordinate
/// no longer matters); upper faces are the unsafe boundary.
pub fn sys3d_safety_problem() -> PdeProblem {
    let mut p = pde::assemble_safety_pde(
        &sys3d_reduced(),
        sys3d_reduced_barrier(),
        vec![SAFETY_FD_DOMAIN; 2],
        SAFETY_HORIZON,
    )
    .expect("safe set is non-empty");
    p.boundary = Boundary {
        faces: vec![[Face::Neumann, Face::Dirichlet(0.0)]; 2],
    };
    p
}

// ---- 1000-d system: dx = Āx dt + (u dt + dw), Ā = diag(A, A) ----

pub const SYS1000D_BLOCK: usize = 500;

/// Column index of the coupling at `offset` from row `i` (0-based), wrapping
/// modulo the block size.
fn wrap(i: usize, offset: usize) -> usize {
    (i + offset) % SYS1000D_BLOCK
}

pub fn sys1000d_system() -> StochasticSystem {
    let n = 2 * SYS1000D_BLOCK;
    StochasticSystem::new(
        n,
        n,
        Arc::new(|x: &[f64], f: &mut [f64]| {
            for blk in 0..2 {
                let o = blk * SYS1000D_BLOCK;
                let xb = &x[o..o + SYS1000D_BLOCK];
                for i in 0..SYS1000D_BLOCK {
                    f[o + i] = 1.1 * xb[i] + 0.1 * (xb[wrap(i, 2)] + xb[wrap(i, 4)])
                        - 0.1 * (xb[wrap(i, 6)] + xb[wrap(i, 8)]);
                }
            }
        }),
        Diffusion::ScaledIdentity(1.0),
    )
    .expect("valid 1000-d system")
}

pub fn sys1000d_features() -> FeatureMap {
    let n = 2 * SYS1000D_BLOCK;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    a[..SYS1000D_BLOCK].fill(1.0);
    b[SYS1000D_BLOCK..].fill(1.0);
    FeatureMap::linear(vec![a, b])
}

/// The stated reduction `α = 500`, `β = ξ/500`.
pub fn sys1000d_reduced() -> ReducedSde {
    ReducedSde::new(
        vec![Arc::new(|_| 500.0), Arc::new(|_| 500.0)],
        vec![Arc::new(|x| x / 500.0), Arc::new(|x| x / 500.0)],
        vec![(-200.0, 200.0); 2],
    )
}

/// The reduction implied by the column sums of `A` (all 1.1): `β = 1.1ξ/500`.
pub fn sys1000d_reduced_from_columns() -> ReducedSde {
    ReducedSde::new(
        vec![Arc::new(|_| 500.0), Arc::new(|_| 500.0)],
        vec![Arc::new(|x| 1.1 * x / 500.0), Arc::new(|x| 1.1 * x / 500.0)],
        vec![(-200.0, 200.0); 2],
    )
}

pub fn sys1000d_cost() -> CostSpec {
    CostSpec::new(
        |x| {
            let s1: f64 = x[..SYS1000D_BLOCK].iter().sum();
            let s2: f64 = x[SYS1000D_BLOCK..].iter().sum();
            (s1 * s1 + s2 * s2) / 500.0
        },
        1.0,
    )
}

pub fn sys1000d_reaction() -> StateFn {
    Arc::new(|xi: &[f64]| (xi[0] * xi[0] + xi[1] * xi[1]) / 500.0)
}

pub fn sys1000d_reduced_cost() -> CostSpec {
    CostSpec {
        running: sys1000d_reaction(),
        terminal_weight: 1.0,
    }
}

pub const SYS1000D_HORIZON: f64 = 1.5;
pub const SYS1000D_FD_DOMAIN: (f64, f64) = (-60.0, 60.0);

pub fn sys1000d_value_problem() -> PdeProblem {
    pde::assemble_value_pde(
        &sys1000d_reduced(),
        sys1000d_reaction(),
        1.0,
        vec![SYS1000D_FD_DOMAIN; 2],
        SYS1000D_HORIZON,
    )
}

pub fn sys1000d_lq() -> LqPreset {
    LqPreset {
        k: 2,
        m: vec![1.0, 0.0, 0.0, 1.0],
        sigma: vec![500.0, 0.0, 0.0, 500.0],
        r: vec![1.0 / 500.0, 0.0, 0.0, 1.0 / 500.0],
        r_terminal: vec![1.0 / 500.0, 0.0, 0.0, 1.0 / 500.0],
        horizon: SYS1000D_HORIZON,
    }
}

// ---- scalar LQ: dx = x dt + (u dt + dw), c = ½x² ----

pub fn lq_scalar_system() -> StochasticSystem {
    StochasticSystem::new(
        1,
        1,
        Arc::new(|x: &[f64], f: &mut [f64]| f[0] = x[0]),
        Diffusion::ScaledIdentity(1.0),
    )
    .expect("valid scalar system")
}

pub fn lq_scalar_cost() -> CostSpec {
    CostSpec::new(|x| 0.5 * x[0] * x[0], 1.0)
}

pub const LQ_SCALAR_HORIZON: f64 = 1.0;
pub const LQ_SCALAR_STATE: f64 = 1.0;

pub fn lq_scalar_lq() -> LqPreset {
    LqPreset {
        k: 1,
        m: vec![1.0],
        sigma: vec![1.0],
        r: vec![0.5],
        r_terminal: vec![0.5],
        horizon: LQ_SCALAR_HORIZON,
    }
}

// ---- heat oracle: φ_t + ½φ_ξξ = 0 on [0, π], φ(T) = sin ξ ----

pub const HEAT_HORIZON: f64 = 1.0;

pub fn heat_oracle_problem() -> PdeProblem {
    let red = ReducedSde::new(
        vec![Arc::new(|_| 1.0)],
        vec![Arc::new(|_| 0.0)],
        vec![(0.0, std::f64::consts::PI)],
    );
    let mut p = pde::assemble_value_pde(
        &red,
        Arc::new(|_| 0.0),
        0.0,
        vec![(0.0, std::f64::consts::PI)],
        HEAT_HORIZON,
    );
    p.data = Arc::new(|xi: &[f64]| xi[0].sin());
    p.boundary = Boundary::uniform(1, Face::Dirichlet(0.0));
    p
}

pub fn heat_exact(xi: f64, t: f64) -> f64 {
    (-(HEAT_HORIZON - t) / 2.0).exp() * xi.sin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduction::{coeff_a, coeff_b};
    use crate::sde::ControlPolicy;

    #[test]
    fn names_round_trip() {
        for p in PresetName::ALL {
            assert_eq!(p.as_str().parse::<PresetName>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("nope".parse::<PresetName>().is_err());
    }

    #[test]
    fn thousand_d_coefficients() {
        let sys = sys1000d_system();
        let fm = sys1000d_features();
        let x: Vec<f64> = (0..1000).map(|i| ((i * 37) % 11) as f64 * 0.01).collect();
        assert!((coeff_a(&sys, &fm, 0, &x).unwrap() - 500.0).abs() < 1e-9);
        let xi = fm.value(&x);
        let b = coeff_b(&sys, &ControlPolicy::Zero, &fm, 0, &x).unwrap();
        // the column sums of A are 1.1, not 1
        assert!((b - 1.1 * xi[0] / 500.0).abs() < 1e-9);
    }

    #[test]
    fn lift_hits_requested_features() {
        let fm = sys3d_features();
        assert_eq!(fm.value(&sys3d_lift(&[1.1, 1.7])), vec![1.1, 1.7]);
        assert_eq!((sys3d_barrier().phi)(&sys3d_lift(&[1.0, 2.0])), 2.0);
    }
}
