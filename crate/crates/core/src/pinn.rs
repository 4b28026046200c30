//! Physics-informed training: fit a network to a PDE residual on collocation
//! points plus a data term, then evaluate it anywhere in space-time.
//!
//! The network input is `(ξ1, ..., ξk, t)` with `t` in real time; the residual
//! convention is the one of [`crate::pde::residual_from`].

use std::io::{BufRead, Write};
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, TrainError};
use crate::neural::{adam_step, jet_backward, jet_forward, Activation, AdamState, Channels, DenseNetwork};
use crate::par;
use crate::pde::{self, Candidate, Coefficients, PdeKind, PdeProblem, PointDerivatives};
use crate::rng::aux_rng;

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PinnConfig {
    pub omega_p: f64,
    pub omega_d: f64,
    /// Collocation point count.
    pub n_domain: usize,
    pub epochs: usize,
    /// `None` is full batch; otherwise each epoch takes one Adam step per
    /// shuffled batch of this many collocation points.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub seed: u64,
    /// Hidden layer widths (tanh).
    pub hidden: Vec<usize>,
    /// Spatial box for collocation; the problem domain if absent.
    pub domain: Option<Vec<(f64, f64)>>,
    /// Time span for collocation; `[0, T]` if absent.
    pub time_span: Option<(f64, f64)>,
    pub resample_collocation: bool,
    pub log_every: usize,
    /// Epoch counts at which a copy of the network is kept.
    pub snapshots: Vec<usize>,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            omega_p: 1.0,
            omega_d: 1.0,
            n_domain: 600,
            epochs: 50_000,
            batch_size: None,
            lr: 1e-3,
            seed: 0,
            hidden: vec![32, 32, 32],
            domain: None,
            time_span: None,
            resample_collocation: false,
            log_every: 100,
            snapshots: Vec::new(),
        }
    }
}

impl PinnConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.omega_p >= 0.0 && self.omega_d >= 0.0) || !(self.omega_p + self.omega_d > 0.0) {
            return bad("loss weights must be nonnegative with a positive sum");
        }
        if self.omega_p > 0.0 && self.n_domain == 0 {
            return bad("n_domain must be positive when omega_p > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be nonempty and positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    pub fn widths(&self, k: usize) -> Vec<usize> {
        let mut w = vec![k + 1];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mc,
    Fd,
    Riccati,
    File,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Mc => "mc",
            Provenance::Fd => "fd",
            Provenance::Riccati => "riccati",
            Provenance::File => "file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub xi: Vec<f64>,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDataset {
    pub points: Vec<DataPoint>,
    pub provenance: Provenance,
}

fn inside(domain: &[(f64, f64)], span: (f64, f64), xi: &[f64], t: f64) -> bool {
    const SLACK: f64 = 1e-9;
    xi.len() == domain.len()
        && xi
            .iter()
            .zip(domain)
            .all(|(x, (lo, hi))| *x >= lo - SLACK && *x <= hi + SLACK)
        && t >= span.0 - SLACK
        && t <= span.1 + SLACK
}

impl TrainingDataset {
    pub fn new(points: Vec<DataPoint>, provenance: Provenance) -> Self {
        Self { points, provenance }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, domain: &[(f64, f64)], span: (f64, f64)) -> Result<(), TrainError> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.value.is_finite() {
                return Err(TrainError::InvalidConfig(format!("data point {i} has a non-finite target")));
            }
            if !inside(domain, span, &p.xi, p.t) {
                return Err(TrainError::InvalidConfig(format!(
                    "data point {i} at ({:?}, t={}) lies outside the domain",
                    p.xi, p.t
                )));
            }
        }
        Ok(())
    }

    /// CSV `xi1,...,xik,t,value`, preceded by `#` comment lines carrying the
    /// provenance and any extra notes.
    pub fn write_csv<W: Write>(&self, k: usize, notes: &[String], mut w: W) -> std::io::Result<()> {
        writeln!(w, "# provenance: {}", self.provenance.as_str())?;
        for n in notes {
            for line in n.lines() {
                writeln!(w, "# {line}")?;
            }
        }
        let rows: Vec<(Vec<f64>, f64, f64)> = self.points.iter().map(|p| (p.xi.clone(), p.t, p.value)).collect();
        pde::write_solution_csv(&rows, k, w)
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, String> {
        let mut provenance = Provenance::File;
        let mut header: Option<usize> = None;
        let mut points = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(p) = c.trim().strip_prefix("provenance:") {
                    provenance = match p.trim() {
                        "mc" => Provenance::Mc,
                        "fd" => Provenance::Fd,
                        "riccati" => Provenance::Riccati,
                        _ => Provenance::File,
                    };
                }
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            match header {
                None => {
                    let k = cols.len().checked_sub(2).ok_or("header too short")?;
                    let expected: Vec<String> = (1..=k)
                        .map(|i| format!("xi{i}"))
                        .chain(["t".to_string(), "value".to_string()])
                        .collect();
                    if cols != expected {
                        return Err(format!("unexpected header `{line}`"));
                    }
                    header = Some(k);
                }
                Some(k) => {
                    if cols.len() != k + 2 {
                        return Err(format!("line {}: expected {} columns", ln + 1, k + 2));
                    }
                    let v: Vec<f64> = cols
                        .iter()
                        .map(|c| c.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| format!("line {}: {e}", ln + 1))?;
                    points.push(DataPoint {
                        xi: v[..k].to_vec(),
                        t: v[k],
                        value: v[k + 1],
                    });
                }
            }
        }
        if header.is_none() {
            return Err("missing header".into());
        }
        Ok(Self { points, provenance })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationPoint {
    pub xi: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationSet {
    pub points: Vec<CollocationPoint>,
}

impl CollocationSet {
    /// `n` i.i.d. uniform points in the space-time box.
    pub fn sample(domain: &[(f64, f64)], span: (f64, f64), n: usize, seed: u64) -> Self {
        let mut rng = aux_rng(seed, 0xc011);
        Self::draw(domain, span, n, &mut rng)
    }

    fn draw<R: Rng>(domain: &[(f64, f64)], span: (f64, f64), n: usize, rng: &mut R) -> Self {
        let points = (0..n)
            .map(|_| CollocationPoint {
                xi: domain.iter().map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect(),
                t: span.0 + (span.1 - span.0) * rng.random::<f64>(),
            })
            .collect();
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Tensor grid of space-time evaluation points, last spatial axis fastest and
/// time slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub axes: Vec<Vec<f64>>,
    pub times: Vec<f64>,
}

/// `lo, lo+h, ..., hi` with the count rounded to the nearest whole step.
pub fn linspace_step(lo: f64, hi: f64, h: f64) -> Vec<f64> {
    if hi <= lo || h <= 0.0 {
        return vec![lo];
    }
    let n = ((hi - lo) / h).round() as usize;
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n.max(1) as f64).collect()
}

impl TensorGrid {
    pub fn from_steps(box_: &[(f64, f64)], d_xi: &[f64], span: (f64, f64), dt: f64) -> Self {
        Self {
            axes: box_
                .iter()
                .zip(d_xi)
                .map(|((lo, hi), h)| linspace_step(*lo, *hi, *h))
                .collect(),
            times: linspace_step(span.0, span.1, dt),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len() * self.axes.iter().map(Vec::len).product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial points in row-major order.
    pub fn space_points(&self) -> Vec<Vec<f64>> {
        let mut pts = vec![Vec::new()];
        for axis in &self.axes {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |x| {
                        let mut q = p.clone();
                        q.push(*x);
                        q
                    })
                })
                .collect();
        }
        pts
    }

    pub fn points(&self) -> Vec<(Vec<f64>, f64)> {
        let space = self.space_points();
        self.times
            .iter()
            .flat_map(|t| space.iter().map(move |x| (x.clone(), *t)))
            .collect()
    }
}

/// Collocation points with their PDE coefficients, evaluated once.
struct PhysicsBatch {
    kind: PdeKind,
    k: usize,
    x: Array2<f64>,
    coeffs: Vec<Coefficients>,
}

impl PhysicsBatch {
    fn new(problem: &PdeProblem, colloc: &[CollocationPoint]) -> Self {
        let k = problem.k;
        let mut x = Array2::<f64>::zeros((colloc.len(), k + 1));
        for (i, p) in colloc.iter().enumerate() {
            for j in 0..k {
                x[[i, j]] = p.xi[j];
            }
            x[[i, k]] = p.t;
        }
        Self {
            kind: problem.kind,
            k,
            x,
            coeffs: colloc.iter().map(|p| problem.coefficients(&p.xi)).collect(),
        }
    }

    fn len(&self) -> usize {
        self.coeffs.len()
    }

    /// Sum of squared residuals over rows `range` and, if requested, its
    /// parameter gradient.
    fn chunk(&self, net: &DenseNetwork, range: std::ops::Range<usize>, want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let b = range.len();
        let k = self.k;
        let x = self.x.slice(ndarray::s![range.clone(), ..]);
        let ch = Channels::with_derivatives(b, k + 1, (0..k).collect());
        let (out, cache) = jet_forward(net, x, ch.clone());
        let sign = match self.kind {
            PdeKind::Value => 1.0,
            PdeKind::Safety => -1.0,
        };
        let mut sse = 0.0;
        let mut adj = want_grad.then(|| Array2::<f64>::zeros(out.raw_dim()));
        for (row, idx) in range.enumerate() {
            let c = &self.coeffs[idx];
            let v = out[[ch.value().start + row, 0]];
            let dt = out[[ch.first(k).start + row, 0]];
            let mut gen = 0.0;
            for j in 0..k {
                gen += c.drift[j] * out[[ch.first(j).start + row, 0]];
                gen += 0.5 * c.diffusion[j] * out[[ch.second(j).start + row, 0]];
            }
            let react = if self.kind == PdeKind::Value { c.reaction } else { 0.0 };
            let r = dt + sign * gen - react * v;
            sse += r * r;
            if let Some(a) = adj.as_mut() {
                let g = 2.0 * r;
                a[[ch.value().start + row, 0]] = -react * g;
                a[[ch.first(k).start + row, 0]] = g;
                for j in 0..k {
                    a[[ch.first(j).start + row, 0]] = sign * c.drift[j] * g;
                    a[[ch.second(j).start + row, 0]] = sign * 0.5 * c.diffusion[j] * g;
                }
            }
        }
        let grad = adj.map(|a| jet_backward(net, &cache, a).0);
        (sse, grad)
    }
}

struct DataBatch {
    x: Array2<f64>,
    y: Vec<f64>,
}

impl DataBatch {
    fn new(data: &TrainingDataset, k: usize) -> Self {
        let mut x = Array2::<f64>::zeros((data.len(), k + 1));
        for (i, p) in data.points.iter().enumerate() {
            for j in 0..k {
                x[[i, j]] = p.xi[j];
            }
            x[[i, k]] = p.t;
        }
        Self {
            x,
            y: data.points.iter().map(|p| p.value).collect(),
        }
    }

    fn chunk(&self, net: &DenseNetwork, range: std::ops::Range<usize>, want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let b = range.len();
        let x = self.x.slice(ndarray::s![range.clone(), ..]);
        let (out, cache) = jet_forward(net, x, Channels::value_only(b));
        let mut sse = 0.0;
        let mut adj = want_grad.then(|| Array2::<f64>::zeros(out.raw_dim()));
        for (row, idx) in range.enumerate() {
            let e = out[[row, 0]] - self.y[idx];
            sse += e * e;
            if let Some(a) = adj.as_mut() {
                a[[row, 0]] = 2.0 * e;
            }
        }
        (sse, adj.map(|a| jet_backward(net, &cache, a).0))
    }
}

/// Mean of `f(chunk)` outputs over `n` rows, with the summed gradient scaled
/// to match. Chunks run concurrently; the reduction order is fixed.
fn reduce_chunks<F>(n: usize, n_params: usize, want_grad: bool, f: F) -> (f64, Vec<f64>)
where
    F: Fn(std::ops::Range<usize>) -> (f64, Option<Vec<f64>>) + Sync + Send,
{
    if n == 0 {
        return (0.0, vec![0.0; n_params]);
    }
    let chunks = n.div_ceil(CHUNK);
    let parts = par::map_indices(chunks, |c| f(c * CHUNK..((c + 1) * CHUNK).min(n)));
    let mut sse = 0.0;
    let mut grad = vec![0.0; if want_grad { n_params } else { 0 }];
    for (s, g) in parts {
        sse += s;
        if let Some(g) = g {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (sse * inv, grad)
}

fn check_input(net: &DenseNetwork, k: usize) -> Result<(), NeuralError> {
    if net.d_in() != k + 1 || net.d_out() != 1 {
        return Err(NeuralError::InputLength {
            expected: k + 1,
            got: net.d_in(),
        });
    }
    Ok(())
}

/// Mean squared PDE residual over the collocation set.
pub fn physics_loss(net: &DenseNetwork, problem: &PdeProblem, colloc: &CollocationSet) -> Result<f64, NeuralError> {
    check_input(net, problem.k)?;
    let batch = PhysicsBatch::new(problem, &colloc.points);
    Ok(reduce_chunks(batch.len(), net.n_params(), false, |r| batch.chunk(net, r, false)).0)
}

/// Mean squared PDE residual of an arbitrary candidate (an analytic solution,
/// an FD table, a network wrapped in [`NetCandidate`]).
pub fn physics_loss_candidate(problem: &PdeProblem, cand: &dyn Candidate, colloc: &CollocationSet) -> f64 {
    let n = colloc.len().max(1) as f64;
    colloc
        .points
        .iter()
        .map(|p| pde::residual(problem, cand, &p.xi, p.t).powi(2))
        .sum::<f64>()
        / n
}

/// Mean squared error against the dataset targets.
pub fn data_loss(net: &DenseNetwork, data: &TrainingDataset) -> Result<f64, NeuralError> {
    let k = net.d_in().saturating_sub(1);
    if let Some(p) = data.points.iter().find(|p| p.xi.len() != k) {
        return Err(NeuralError::InputLength {
            expected: k,
            got: p.xi.len(),
        });
    }
    let batch = DataBatch::new(data, k);
    Ok(reduce_chunks(data.len(), net.n_params(), false, |r| batch.chunk(net, r, false)).0)
}

/// A network viewed as a PDE candidate via its input derivatives.
pub struct NetCandidate<'a>(pub &'a DenseNetwork);

impl Candidate for NetCandidate<'_> {
    fn derivatives(&self, xi: &[f64], t: f64) -> PointDerivatives {
        let k = xi.len();
        let mut input = xi.to_vec();
        input.push(t);
        let b = self.0.forward_with_derivatives(&input).expect("input matches network");
        PointDerivatives {
            value: b.value[0],
            dt: b.input_jacobian[k],
            grad: b.input_jacobian[..k].to_vec(),
            hess_diag: b.input_hessian_diag[..k].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub loss_physics: f64,
    pub loss_data: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedPinn {
    pub net: DenseNetwork,
    pub log: Vec<LogRow>,
    pub snapshots: Vec<(usize, DenseNetwork)>,
    pub collocation: CollocationSet,
    pub wall_clock: Duration,
}

pub fn write_log_csv<W: Write>(log: &[LogRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,loss_physics,loss_data")?;
    for r in log {
        writeln!(w, "{},{:e},{:e}", r.epoch, r.loss_physics, r.loss_data)?;
    }
    Ok(())
}

struct Objective<'a> {
    cfg: &'a PinnConfig,
    data: DataBatch,
    n_data: usize,
    n_params: usize,
}

impl Objective<'_> {
    fn eval(&self, net: &DenseNetwork, phys: &PhysicsBatch, rows: Option<&[usize]>) -> (f64, f64, Vec<f64>) {
        let mut grad = vec![0.0; self.n_params];
        let lp = if self.cfg.omega_p > 0.0 {
            let (l, g) = match rows {
                None => reduce_chunks(phys.len(), self.n_params, true, |r| phys.chunk(net, r, true)),
                Some(idx) => {
                    let sub = phys.select(idx);
                    reduce_chunks(sub.len(), self.n_params, true, |r| sub.chunk(net, r, true))
                }
            };
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += self.cfg.omega_p * b);
            l
        } else {
            0.0
        };
        let ld = if self.cfg.omega_d > 0.0 {
            let (l, g) = reduce_chunks(self.n_data, self.n_params, true, |r| self.data.chunk(net, r, true));
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += self.cfg.omega_d * b);
            l
        } else {
            0.0
        };
        (lp, ld, grad)
    }
}

impl PhysicsBatch {
    fn select(&self, rows: &[usize]) -> PhysicsBatch {
        PhysicsBatch {
            kind: self.kind,
            k: self.k,
            x: self.x.select(ndarray::Axis(0), rows),
            coeffs: rows.iter().map(|&i| self.coeffs[i].clone()).collect(),
        }
    }
}

/// Adam on `ω_p·L_p + ω_d·L_d`. Deterministic for a given config and seed.
pub fn train(problem: &PdeProblem, data: &TrainingDataset, cfg: &PinnConfig) -> Result<TrainedPinn, TrainError> {
    cfg.validate()?;
    problem
        .validate()
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let k = problem.k;
    let domain = cfg.domain.clone().unwrap_or_else(|| problem.domain.clone());
    let span = cfg.time_span.unwrap_or((0.0, problem.horizon));
    if domain.len() != k {
        return Err(TrainError::InvalidConfig(format!(
            "collocation box has {} axes, problem has {k}",
            domain.len()
        )));
    }
    if cfg.omega_d > 0.0 && data.is_empty() {
        return Err(TrainError::InvalidConfig("empty dataset with omega_d > 0".into()));
    }
    data.validate(&problem.domain, (0.0, problem.horizon))?;

    let start = Instant::now();
    let net = DenseNetwork::glorot(cfg.widths(k), Activation::Identity, cfg.seed)?;
    let mut theta = net.params.clone();
    let mut net = net;
    let mut rng = aux_rng(cfg.seed, 0xc011);
    let mut colloc = CollocationSet::draw(&domain, span, cfg.n_domain, &mut rng);
    let mut phys = PhysicsBatch::new(problem, &colloc.points);
    let obj = Objective {
        cfg,
        data: DataBatch::new(data, k),
        n_data: data.len(),
        n_params: net.n_params(),
    };
    let mut adam = AdamState::new(net.n_params());
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let mut order: Vec<usize> = (0..cfg.n_domain).collect();
    let mut shuffle_rng = aux_rng(cfg.seed, 0x5bf1);

    for epoch in 0..=cfg.epochs {
        net.params.copy_from_slice(&theta);
        if cfg.snapshots.contains(&epoch) {
            snapshots.push((epoch, net.clone()));
        }
        let last = epoch == cfg.epochs;
        if cfg.resample_collocation && epoch > 0 && !last {
            colloc = CollocationSet::draw(&domain, span, cfg.n_domain, &mut rng);
            phys = PhysicsBatch::new(problem, &colloc.points);
        }
        let (lp, ld, grad) = obj.eval(&net, &phys, None);
        let total = cfg.omega_p * lp + cfg.omega_d * ld;
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                last_good: Box::new(net),
            });
        }
        if epoch % cfg.log_every == 0 || last {
            log.push(LogRow {
                epoch,
                loss_physics: lp,
                loss_data: ld,
                loss_total: total,
            });
        }
        if last {
            break;
        }
        match cfg.batch_size {
            Some(bs) if bs < cfg.n_domain => {
                use rand::seq::SliceRandom;
                order.shuffle(&mut shuffle_rng);
                for rows in order.chunks(bs) {
                    net.params.copy_from_slice(&theta);
                    let (_, _, g) = obj.eval(&net, &phys, Some(rows));
                    adam_step(&mut adam, &mut theta, &g, cfg.lr)?;
                }
            }
            _ => adam_step(&mut adam, &mut theta, &grad, cfg.lr)?,
        }
    }
    Ok(TrainedPinn {
        net,
        log,
        snapshots,
        collocation: colloc,
        wall_clock: start.elapsed(),
    })
}

/// Evaluate the network on every grid point (time slowest), using the plain
/// forward pass.
pub fn predict_grid(net: &DenseNetwork, grid: &TensorGrid) -> Result<Vec<(Vec<f64>, f64, f64)>, NeuralError> {
    grid.points()
        .into_iter()
        .map(|(xi, t)| {
            let mut input = xi.clone();
            input.push(t);
            Ok((xi, t, net.forward(&input)?[0]))
        })
        .collect()
}

/// Batched value-only evaluation through the jet engine.
pub fn predict_points(net: &DenseNetwork, x: ArrayView2<'_, f64>) -> Vec<f64> {
    let (out, _) = jet_forward(net, x, Channels::value_only(x.nrows()));
    out.column(0).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_params_fd;
    use crate::pde::{assemble_safety_pde, assemble_value_pde, riccati_value};
    use crate::presets;
    use crate::reduction::ReducedSde;
    use std::sync::Arc;

    fn heat_like() -> PdeProblem {
        let red = ReducedSde::new(vec![Arc::new(|_| 2.0)], vec![Arc::new(|_| 0.0)], vec![(0.0, 3.0)]);
        assemble_value_pde(&red, Arc::new(|_| 0.0), 0.0, vec![(0.0, 3.0)], 1.0)
    }

    fn constant_net(c: f64, k: usize) -> DenseNetwork {
        let mut n = DenseNetwork::glorot(vec![k + 1, 4, 1], Activation::Identity, 1).unwrap();
        n.params.iter_mut().for_each(|p| *p = 0.0);
        *n.params.last_mut().unwrap() = c;
        n
    }

    fn sys3d_data(grid: &TensorGrid) -> TrainingDataset {
        let lq = presets::sys3d_lq();
        TrainingDataset::new(
            grid.points()
                .into_iter()
                .map(|(xi, t)| DataPoint {
                    value: riccati_value(&lq, &xi, t).unwrap(),
                    xi,
                    t,
                })
                .collect(),
            Provenance::Riccati,
        )
    }

    #[test]
    fn constant_net_has_zero_physics_loss() {
        let p = heat_like();
        let colloc = CollocationSet::sample(&p.domain, (0.0, 1.0), 50, 3);
        let loss = physics_loss(&constant_net(1.0, 1), &p, &colloc).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn eigenfunction_has_zero_physics_loss() {
        // F = e^{-t} sin ξ solves F_t = ½·2·F_ξξ
        let red = ReducedSde::new(vec![Arc::new(|_| 2.0)], vec![Arc::new(|_| 0.0)], vec![(-10.0, 10.0)]);
        let p = assemble_safety_pde(&red, Arc::new(|_| 1.0), vec![(0.0, 3.0)], 1.0).unwrap();
        let f = |xi: &[f64], t: f64| PointDerivatives {
            value: (-t).exp() * xi[0].sin(),
            dt: -(-t).exp() * xi[0].sin(),
            grad: vec![(-t).exp() * xi[0].cos()],
            hess_diag: vec![-(-t).exp() * xi[0].sin()],
        };
        let colloc = CollocationSet::sample(&p.domain, (0.0, 1.0), 200, 4);
        assert!(physics_loss_candidate(&p, &f, &colloc) <= 1e-10);
    }

    #[test]
    fn jet_loss_matches_pointwise_residuals() {
        let p = presets::sys3d_value_problem();
        let net = DenseNetwork::glorot(vec![3, 8, 8, 1], Activation::Identity, 5).unwrap();
        let colloc = CollocationSet::sample(&[(1.0, 2.0); 2], (0.0, 1.5), 300, 6);
        let fast = physics_loss(&net, &p, &colloc).unwrap();
        let slow = physics_loss_candidate(&p, &NetCandidate(&net), &colloc);
        assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0), "{fast} vs {slow}");
        let sp = presets::sys3d_safety_problem();
        let fast = physics_loss(&net, &sp, &colloc).unwrap();
        let slow = physics_loss_candidate(&sp, &NetCandidate(&net), &colloc);
        assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0));
    }

    #[test]
    fn training_gradient_matches_finite_differences() {
        let p = presets::sys3d_safety_problem();
        let net = DenseNetwork::glorot(vec![3, 6, 6, 1], Activation::Identity, 7).unwrap();
        let colloc = CollocationSet::sample(&[(1.0, 2.0); 2], (0.0, 1.0), 40, 8);
        let grid = TensorGrid::from_steps(&[(1.0, 2.0); 2], &[0.5, 0.5], (0.5, 1.0), 0.5);
        let data = sys3d_data(&grid);
        let cfg = PinnConfig {
            omega_p: 1.0,
            omega_d: 2.0,
            ..Default::default()
        };
        let obj = Objective {
            cfg: &cfg,
            data: DataBatch::new(&data, 2),
            n_data: data.len(),
            n_params: net.n_params(),
        };
        let phys = PhysicsBatch::new(&p, &colloc.points);
        let (_, _, g) = obj.eval(&net, &phys, None);
        let fd = grad_params_fd(
            &net,
            |n| physics_loss(n, &p, &colloc).unwrap() + 2.0 * data_loss(n, &data).unwrap(),
            1e-6,
        );
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn data_loss_trivial_cases() {
        let data = TrainingDataset::new(
            (0..5)
                .map(|i| DataPoint {
                    xi: vec![i as f64 * 0.1],
                    t: 0.5,
                    value: 1.0,
                })
                .collect(),
            Provenance::File,
        );
        assert_eq!(data_loss(&constant_net(0.0, 1), &data).unwrap(), 1.0);
        assert_eq!(data_loss(&constant_net(1.0, 1), &data).unwrap(), 0.0);
    }

    #[test]
    fn empty_data_with_data_weight_is_rejected() {
        let p = heat_like();
        let empty = TrainingDataset::new(vec![], Provenance::File);
        let cfg = PinnConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train(&p, &empty, &cfg), Err(TrainError::InvalidConfig(_))));
        let phys_only = PinnConfig {
            omega_d: 0.0,
            epochs: 1,
            n_domain: 10,
            ..Default::default()
        };
        assert!(train(&p, &empty, &phys_only).is_ok());
    }

    #[test]
    fn loss_decreases_and_log_decomposes() {
        let p = presets::sys3d_value_problem();
        let grid = TensorGrid::from_steps(&[(1.0, 2.0); 2], &[0.1, 0.1], (1.0, 1.5), 0.1);
        let data = sys3d_data(&grid);
        let mut decreased = 0;
        for seed in 0..20 {
            let cfg = PinnConfig {
                epochs: 100,
                n_domain: 200,
                seed,
                domain: Some(vec![(1.0, 2.0); 2]),
                log_every: 50,
                ..Default::default()
            };
            let out = train(&p, &data, &cfg).unwrap();
            let first = out.log.first().unwrap();
            let last = out.log.last().unwrap();
            assert_eq!(last.epoch, 100);
            for r in &out.log {
                assert_eq!(r.loss_total, cfg.omega_p * r.loss_physics + cfg.omega_d * r.loss_data);
            }
            if last.loss_total < first.loss_total {
                decreased += 1;
            }
        }
        assert!(decreased >= 18, "{decreased}/20");
    }

    #[test]
    fn training_is_deterministic() {
        let p = heat_like();
        let grid = TensorGrid::from_steps(&[(0.0, 3.0)], &[0.5], (0.0, 1.0), 0.5);
        let data = TrainingDataset::new(
            grid.points()
                .into_iter()
                .map(|(xi, t)| DataPoint {
                    value: xi[0].sin(),
                    xi,
                    t,
                })
                .collect(),
            Provenance::File,
        );
        let cfg = PinnConfig {
            epochs: 30,
            n_domain: 40,
            hidden: vec![8, 8],
            batch_size: Some(16),
            ..Default::default()
        };
        let a = train(&p, &data, &cfg).unwrap();
        let b = train(&p, &data, &cfg).unwrap();
        assert_eq!(a.net.params, b.net.params);
    }

    #[test]
    fn regression_only_fits_dense_data() {
        let p = heat_like();
        let grid = TensorGrid::from_steps(&[(0.0, 3.0)], &[0.3], (0.0, 1.0), 0.1);
        let data = TrainingDataset::new(
            grid.points()
                .into_iter()
                .map(|(xi, t)| DataPoint {
                    value: (-(1.0 - t)).exp() * xi[0].sin(),
                    xi,
                    t,
                })
                .collect(),
            Provenance::File,
        );
        let cfg = PinnConfig {
            omega_p: 0.0,
            epochs: 3000,
            lr: 1e-2,
            hidden: vec![16, 16],
            ..Default::default()
        };
        let out = train(&p, &data, &cfg).unwrap();
        assert!(out.log.last().unwrap().loss_data < 1e-4, "{:?}", out.log.last());
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good() {
        let mut p = heat_like();
        p.reaction = Arc::new(|_| f64::NAN);
        let grid = TensorGrid::from_steps(&[(0.0, 3.0)], &[1.0], (0.0, 1.0), 1.0);
        let data = TrainingDataset::new(
            grid.points()
                .into_iter()
                .map(|(xi, t)| DataPoint { xi, t, value: 0.0 })
                .collect(),
            Provenance::File,
        );
        let cfg = PinnConfig {
            epochs: 5,
            n_domain: 10,
            ..Default::default()
        };
        match train(&p, &data, &cfg) {
            Err(TrainError::NonFiniteLoss { epoch, last_good }) => {
                assert_eq!(epoch, 0);
                assert_eq!(last_good.n_params(), param_count_for(&cfg));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn param_count_for(cfg: &PinnConfig) -> usize {
        crate::neural::param_count(&cfg.widths(1))
    }

    #[test]
    fn predict_grid_matches_forward_bitwise() {
        let net = DenseNetwork::glorot(vec![3, 5, 1], Activation::Identity, 9).unwrap();
        let single = TensorGrid {
            axes: vec![vec![1.5], vec![1.2]],
            times: vec![0.5],
        };
        let rows = predict_grid(&net, &single).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].2, net.forward(&[1.5, 1.2, 0.5]).unwrap()[0]);
        let grid = TensorGrid::from_steps(&[(1.0, 2.0); 2], &[0.25, 0.5], (0.0, 1.0), 0.5);
        assert_eq!(grid.len(), 5 * 3 * 3);
        for (xi, t, v) in predict_grid(&net, &grid).unwrap() {
            let mut input = xi.clone();
            input.push(t);
            assert_eq!(v.to_bits(), net.forward(&input).unwrap()[0].to_bits());
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let data = TrainingDataset::new(
            vec![
                DataPoint {
                    xi: vec![1.0, 2.0],
                    t: 0.5,
                    value: 0.25,
                },
                DataPoint {
                    xi: vec![1.1, 2.0],
                    t: 0.5,
                    value: 1e-9,
                },
            ],
            Provenance::Fd,
        );
        let mut buf = Vec::new();
        data.write_csv(2, &["grid = 0.1".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().any(|l| l == "xi1,xi2,t,value"));
        let back = TrainingDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back, data);
    }
}
