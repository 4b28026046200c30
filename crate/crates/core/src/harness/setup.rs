//! Per-preset model objects and default configuration blocks.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::featureid::AeTrainConfig;
use crate::montecarlo::{BarrierSpec, CostSpec, StateFn};
use crate::pde::{self, LqPreset, PdeKind, PdeProblem};
use crate::pinn::PinnConfig;
use crate::presets::{self, PresetName};
use crate::reduction::{FeatureMap, ReducedSde, SamplerConfig};
use crate::sde::StochasticSystem;

use super::config::{
    BenchmarkSpec, DataSource, DataSpec, Estimator, FdBlock, GridSpec, Metric, ReconTarget, SimBlock, StatesSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Value,
    Safety,
}

/// Everything a preset pins down. Absent parts make the matching commands
/// config errors.
pub struct Setup {
    pub name: PresetName,
    pub k: usize,
    pub task: Task,
    pub horizon: f64,
    pub system: Option<StochasticSystem>,
    pub features: Option<FeatureMap>,
    pub reduced: Option<ReducedSde>,
    pub cost: Option<CostSpec>,
    pub reduced_cost: Option<CostSpec>,
    pub barrier: Option<BarrierSpec>,
    pub reduced_barrier: Option<StateFn>,
    pub bridge_levels: Vec<Option<f64>>,
    pub problem: Option<PdeProblem>,
    pub lq: Option<LqPreset>,
    pub exact: Option<fn(&[f64], f64) -> f64>,
    pub lift: Option<fn(&[f64]) -> Vec<f64>>,
    pub sampler: Option<SamplerConfig>,
}

fn lift_1000d(xi: &[f64]) -> Vec<f64> {
    let b = presets::SYS1000D_BLOCK;
    let mut x = vec![xi[0] / b as f64; 2 * b];
    x[b..].fill(xi[1] / b as f64);
    x
}

fn identity(xi: &[f64]) -> Vec<f64> {
    xi.to_vec()
}

fn heat_exact(xi: &[f64], t: f64) -> f64 {
    presets::heat_exact(xi[0], t)
}

fn lq_scalar_reduced() -> ReducedSde {
    ReducedSde::new(vec![Arc::new(|_| 1.0)], vec![Arc::new(|x| x)], vec![(-6.0, 6.0)])
}

fn lq_scalar_reaction() -> StateFn {
    Arc::new(|xi: &[f64]| 0.5 * xi[0] * xi[0])
}

impl Setup {
    pub fn new(name: PresetName) -> Self {
        let blank = Setup {
            name,
            k: 2,
            task: Task::Value,
            horizon: presets::SYS3D_HORIZON,
            system: None,
            features: None,
            reduced: None,
            cost: None,
            reduced_cost: None,
            barrier: None,
            reduced_barrier: None,
            bridge_levels: Vec::new(),
            problem: None,
            lq: None,
            exact: None,
            lift: None,
            sampler: None,
        };
        let sys3d_sampler = || SamplerConfig::new(vec![-3.0; 3], vec![3.0; 3], vec![(-2.0, 2.0); 2]);
        match name {
            PresetName::Sys3dValue => Setup {
                system: Some(presets::sys3d_system()),
                features: Some(presets::sys3d_features()),
                reduced: Some(presets::sys3d_reduced()),
                cost: Some(presets::sys3d_cost()),
                reduced_cost: Some(presets::sys3d_reduced_cost()),
                problem: Some(presets::sys3d_value_problem()),
                lq: Some(presets::sys3d_lq()),
                lift: Some(presets::sys3d_lift),
                sampler: Some(sys3d_sampler()),
                ..blank
            },
            PresetName::Sys3dSafety => Setup {
                task: Task::Safety,
                horizon: presets::SAFETY_HORIZON,
                system: Some(presets::sys3d_system()),
                features: Some(presets::sys3d_features()),
                reduced: Some(presets::sys3d_reduced()),
                barrier: Some(presets::sys3d_barrier()),
                reduced_barrier: Some(presets::sys3d_reduced_barrier()),
                bridge_levels: vec![Some(presets::SAFETY_LEVEL); 2],
                problem: Some(presets::sys3d_safety_problem()),
                lift: Some(presets::sys3d_lift),
                sampler: Some(sys3d_sampler()),
                ..blank
            },
            PresetName::Sys1000dValue => Setup {
                horizon: presets::SYS1000D_HORIZON,
                system: Some(presets::sys1000d_system()),
                features: Some(presets::sys1000d_features()),
                reduced: Some(presets::sys1000d_reduced()),
                cost: Some(presets::sys1000d_cost()),
                reduced_cost: Some(presets::sys1000d_reduced_cost()),
                problem: Some(presets::sys1000d_value_problem()),
                lq: Some(presets::sys1000d_lq()),
                lift: Some(lift_1000d),
                ..blank
            },
            PresetName::LqScalar => Setup {
                k: 1,
                horizon: presets::LQ_SCALAR_HORIZON,
                system: Some(presets::lq_scalar_system()),
                features: Some(FeatureMap::linear(vec![vec![1.0]])),
                reduced: Some(lq_scalar_reduced()),
                cost: Some(presets::lq_scalar_cost()),
                reduced_cost: Some(CostSpec {
                    running: lq_scalar_reaction(),
                    terminal_weight: 1.0,
                }),
                problem: Some(pde::assemble_value_pde(
                    &lq_scalar_reduced(),
                    lq_scalar_reaction(),
                    1.0,
                    vec![(-6.0, 6.0)],
                    presets::LQ_SCALAR_HORIZON,
                )),
                lq: Some(presets::lq_scalar_lq()),
                lift: Some(identity),
                sampler: Some(SamplerConfig::new(vec![-3.0], vec![3.0], vec![(-2.0, 2.0)])),
                ..blank
            },
            PresetName::HeatOracle => Setup {
                k: 1,
                horizon: presets::HEAT_HORIZON,
                problem: Some(presets::heat_oracle_problem()),
                exact: Some(heat_exact),
                ..blank
            },
            PresetName::FeatureAe3d => Setup {
                system: Some(presets::sys3d_system()),
                features: Some(presets::sys3d_features()),
                cost: Some(presets::sys3d_cost()),
                barrier: Some(presets::sys3d_barrier()),
                lift: Some(presets::sys3d_lift),
                ..blank
            },
        }
    }

    /// Closed-form solution (`φ` or `F`) if the preset has one.
    pub fn closed_form(&self, xi: &[f64], t: f64) -> Option<Result<f64, crate::error::PdeError>> {
        if let Some(f) = self.exact {
            return Some(Ok(f(xi, t)));
        }
        self.lq.as_ref().map(|lq| pde::riccati_value(lq, xi, t))
    }

    pub fn pde_kind(&self) -> PdeKind {
        match self.task {
            Task::Value => PdeKind::Value,
            Task::Safety => PdeKind::Safety,
        }
    }
}

fn sq(lo: f64, hi: f64, k: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![lo; k], vec![hi; k])
}

pub fn default_grid(name: PresetName) -> Option<GridSpec> {
    let g = |(lo, hi): (Vec<f64>, Vec<f64>), d: f64, times: Vec<f64>| {
        let k = lo.len();
        GridSpec::new(lo, hi, vec![d; k], times)
    };
    Some(match name {
        PresetName::Sys3dValue => g(sq(1.0, 2.0, 2), 0.1, vec![0.5]),
        PresetName::Sys3dSafety => g(sq(1.0, 2.0, 2), 0.5, vec![1.0]),
        PresetName::Sys1000dValue => g(sq(1.1, 2.0, 2), 0.1, vec![0.5]),
        PresetName::LqScalar => g(sq(1.0, 1.0, 1), 0.1, vec![0.0]),
        PresetName::HeatOracle => g(sq(0.0, PI, 1), PI / 10.0, vec![0.0, 0.5]),
        PresetName::FeatureAe3d => return None,
    })
}

pub fn default_sim(name: PresetName) -> Option<SimBlock> {
    let s = |dt: f64, n_paths: usize, bridge: bool| SimBlock {
        dt,
        n_paths,
        x0: None,
        reduced: false,
        horizon: None,
        bridge,
        std_error_ceiling: None,
    };
    Some(match name {
        PresetName::Sys3dValue => s(1e-3, 10_000, false),
        PresetName::Sys3dSafety => s(1e-4, 10_000, false),
        PresetName::Sys1000dValue => s(1e-3, 1_000, false),
        PresetName::LqScalar => s(1e-3, 10_000, false),
        PresetName::FeatureAe3d => s(1e-3, 100, false),
        PresetName::HeatOracle => return None,
    })
}

pub fn default_fd(name: PresetName) -> Option<FdBlock> {
    let f = |d: f64, k: usize, dt: f64| FdBlock {
        d_xi: vec![d; k],
        dt,
        store_every: None,
        rannacher_steps: None,
    };
    Some(match name {
        PresetName::Sys3dValue => f(0.04, 2, 1e-3),
        PresetName::Sys3dSafety => f(0.05, 2, 1e-3),
        PresetName::Sys1000dValue => f(0.5, 2, 1e-3),
        PresetName::LqScalar => f(0.01, 1, 1e-3),
        PresetName::HeatOracle => f(PI / 314.0, 1, 1e-3),
        PresetName::FeatureAe3d => return None,
    })
}

pub fn default_pinn(name: PresetName) -> Option<PinnConfig> {
    let mut p = PinnConfig::default();
    match name {
        PresetName::Sys3dValue | PresetName::Sys1000dValue => {
            p.domain = Some(vec![(1.0, 2.0); 2]);
            p.snapshots = vec![20_000];
        }
        PresetName::Sys3dSafety => {
            p.domain = Some(vec![(1.0, 2.0); 2]);
            p.epochs = 20_000;
        }
        PresetName::LqScalar => {
            p.domain = Some(vec![(0.0, 2.0)]);
            p.epochs = 5_000;
        }
        PresetName::HeatOracle => p.epochs = 5_000,
        PresetName::FeatureAe3d => return None,
    }
    Some(p)
}

pub fn default_data(name: PresetName) -> Option<DataSpec> {
    let d = |source, (lo, hi): (Vec<f64>, Vec<f64>), dx: f64, span| {
        let k = lo.len();
        DataSpec {
            source,
            file: None,
            grid: GridSpec::spanning(lo, hi, vec![dx; k], span, 0.1),
        }
    };
    Some(match name {
        PresetName::Sys3dValue | PresetName::Sys1000dValue => d(DataSource::Fd, sq(1.0, 2.0, 2), 0.1, (1.0, 1.5)),
        PresetName::Sys3dSafety => d(DataSource::Fd, sq(1.0, 2.0, 2), 0.1, (0.0, 1.0)),
        PresetName::LqScalar => d(DataSource::Riccati, sq(0.0, 2.0, 1), 0.1, (0.0, 1.0)),
        PresetName::HeatOracle => d(DataSource::Riccati, sq(0.0, PI, 1), PI / 10.0, (0.0, 1.0)),
        PresetName::FeatureAe3d => return None,
    })
}

pub fn default_features(name: PresetName) -> Option<(AeTrainConfig, StatesSpec)> {
    match name {
        PresetName::FeatureAe3d => Some((
            AeTrainConfig::default(),
            StatesSpec {
                lower: 0.0,
                upper: 1.0,
                step: 0.01,
                target: ReconTarget::Cost,
            },
        )),
        _ => None,
    }
}

pub fn default_benchmark(name: PresetName) -> Option<BenchmarkSpec> {
    let b = |counts: Vec<usize>, estimators: Vec<Estimator>, metric, oracle, repetitions, points| BenchmarkSpec {
        sample_counts: counts,
        estimators,
        metric,
        oracle,
        repetitions,
        points,
    };
    use Estimator::*;
    Some(match name {
        PresetName::Sys3dValue => b(
            vec![1_000, 10_000, 100_000],
            vec![McReduced, McFull],
            Metric::Percentage,
            Riccati,
            10,
            vec![vec![1.5, 1.5, 0.5]],
        ),
        PresetName::Sys3dSafety => b(
            vec![1_000, 10_000],
            vec![McReduced],
            Metric::Absolute,
            Fd,
            3,
            vec![vec![1.5, 1.5, 1.0]],
        ),
        PresetName::Sys1000dValue => b(
            vec![1_000, 10_000],
            vec![McReduced],
            Metric::Percentage,
            Riccati,
            3,
            vec![vec![1.5, 1.5, 0.5]],
        ),
        PresetName::LqScalar => b(
            vec![1_000, 10_000],
            vec![McReduced, McFull],
            Metric::Percentage,
            Riccati,
            5,
            vec![vec![1.0, 0.0]],
        ),
        PresetName::HeatOracle => b(vec![1], vec![Fd], Metric::Absolute, Riccati, 1, vec![vec![PI / 2.0, 0.0]]),
        PresetName::FeatureAe3d => return None,
    })
}
