//! Dense tanh networks with input derivatives up to second order, parameter
//! gradients through those derivatives, Adam, and JSON checkpoints.

mod jet;
mod tape;

pub use jet::{jet_backward, jet_forward, Channels, JetCache};
pub use tape::{Tape, Var};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::NeuralError;
use crate::rng::aux_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Feedforward map with tanh hidden layers. Parameters are stored per layer
/// as the row-major `out × in` weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetwork {
    pub widths: Vec<usize>,
    pub output_activation: Activation,
    pub params: Vec<f64>,
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Glorot-uniform weights `U(±√(6/(fan_in+fan_out)))`, zero biases.
pub fn glorot_init(widths: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = aux_rng(seed, 0x61);
    let mut theta = Vec::with_capacity(param_count(widths));
    for w in widths.windows(2) {
        let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
        for _ in 0..w[0] * w[1] {
            theta.push(rng.random_range(-bound..bound));
        }
        theta.extend(std::iter::repeat_n(0.0, w[1]));
    }
    theta
}

/// Value, input Jacobian (`d_out × d_in`) and per-input second derivatives
/// (`d_out × d_in`).
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle {
    pub value: Vec<f64>,
    pub input_jacobian: Vec<f64>,
    pub input_hessian_diag: Vec<f64>,
}

impl DenseNetwork {
    pub fn new(widths: Vec<usize>, output_activation: Activation, params: Vec<f64>) -> Result<Self, NeuralError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NeuralError::InvalidWidths(format!("{widths:?}")));
        }
        let expected = param_count(&widths);
        if params.len() != expected {
            return Err(NeuralError::ParamLength {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            widths,
            output_activation,
            params,
        })
    }

    pub fn glorot(widths: Vec<usize>, output_activation: Activation, seed: u64) -> Result<Self, NeuralError> {
        let params = glorot_init(&widths, seed);
        Self::new(widths, output_activation, params)
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Offsets of `(W, b)` for layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let before = param_count(&self.widths[..=l]);
        (before, before + self.widths[l] * self.widths[l + 1])
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let (w, b) = self.layer_offsets(l);
        &self.params[w..b]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_offsets(l);
        &self.params[b..b + self.widths[l + 1]]
    }

    pub fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.n_layers() {
            self.output_activation
        } else {
            Activation::Tanh
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NeuralError> {
        if input.len() != self.d_in() {
            return Err(NeuralError::InputLength {
                expected: self.d_in(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(input)?;
        let mut h = input.to_vec();
        for l in 0..self.n_layers() {
            let z = affine(self.weights(l), self.bias(l), &h);
            h = match self.activation(l) {
                Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    /// Forward-mode propagation of first and second directional derivatives
    /// along each input axis.
    pub fn forward_with_derivatives(&self, input: &[f64]) -> Result<DerivativeBundle, NeuralError> {
        self.check_input(input)?;
        let d = self.d_in();
        let mut h = input.to_vec();
        let mut h1: Vec<Vec<f64>> = (0..d)
            .map(|j| (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut h2: Vec<Vec<f64>> = vec![vec![0.0; d]; d];
        for l in 0..self.n_layers() {
            let w = self.weights(l);
            let z = affine(w, self.bias(l), &h);
            let z1: Vec<Vec<f64>> = h1.iter().map(|v| matvec(w, v)).collect();
            let z2: Vec<Vec<f64>> = h2.iter().map(|v| matvec(w, v)).collect();
            match self.activation(l) {
                Activation::Tanh => {
                    h = z.iter().map(|v| v.tanh()).collect();
                    let s1: Vec<f64> = h.iter().map(|v| 1.0 - v * v).collect();
                    let s2: Vec<f64> = h.iter().zip(&s1).map(|(v, s)| -2.0 * v * s).collect();
                    for j in 0..d {
                        h2[j] = (0..h.len())
                            .map(|u| s2[u] * z1[j][u] * z1[j][u] + s1[u] * z2[j][u])
                            .collect();
                        h1[j] = (0..h.len()).map(|u| s1[u] * z1[j][u]).collect();
                    }
                }
                Activation::Identity => {
                    h = z;
                    h1 = z1;
                    h2 = z2;
                }
            }
        }
        let out = self.d_out();
        let mut jac = vec![0.0; out * d];
        let mut hess = vec![0.0; out * d];
        for o in 0..out {
            for j in 0..d {
                jac[o * d + j] = h1[j][o];
                hess[o * d + j] = h2[j][o];
            }
        }
        Ok(DerivativeBundle {
            value: h,
            input_jacobian: jac,
            input_hessian_diag: hess,
        })
    }

    pub fn to_checkpoint(&self, seed: Option<u64>) -> Checkpoint {
        Checkpoint {
            widths: self.widths.clone(),
            activation: "tanh".into(),
            output_activation: self.output_activation,
            params: self.params.clone(),
            seed,
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| {
            let row = &w[o * n..(o + 1) * n];
            row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bo
        })
        .collect()
}

fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..w.len() / n)
        .map(|o| w[o * n..(o + 1) * n].iter().zip(x).map(|(a, v)| a * v).sum())
        .collect()
}

/// Tape-valued derivative bundle, laid out like [`DerivativeBundle`].
#[derive(Debug, Clone)]
pub struct TapedBundle {
    pub value: Vec<Var>,
    pub input_jacobian: Vec<Var>,
    pub input_hessian_diag: Vec<Var>,
}

/// A tape with the network parameters registered as its first variables.
pub struct NetTape<'a> {
    pub tape: Tape,
    pub params: Vec<Var>,
    net: &'a DenseNetwork,
}

impl<'a> NetTape<'a> {
    pub fn new(net: &'a DenseNetwork) -> Self {
        let mut tape = Tape::new();
        let params = net.params.iter().map(|p| tape.var(*p)).collect();
        Self { tape, params, net }
    }

    fn layer_vars(&self, l: usize) -> (&[Var], &[Var]) {
        let (w, b) = self.net.layer_offsets(l);
        let out = self.net.widths[l + 1];
        (&self.params[w..b], &self.params[b..b + out])
    }

    fn activate(&mut self, l: usize, z: Vec<Var>) -> Vec<Var> {
        match self.net.activation(l) {
            Activation::Tanh => z.into_iter().map(|v| self.tape.tanh(v)).collect(),
            Activation::Identity => z,
        }
    }

    fn affine(&mut self, l: usize, h: &[Var], with_bias: bool) -> Vec<Var> {
        let n = h.len();
        let (w, b) = self.layer_vars(l);
        let (w, b) = (w.to_vec(), b.to_vec());
        (0..b.len())
            .map(|o| {
                let d = self.tape.dot(&w[o * n..(o + 1) * n], h);
                if with_bias {
                    self.tape.add(d, b[o])
                } else {
                    d
                }
            })
            .collect()
    }

    pub fn forward(&mut self, input: &[f64]) -> Result<Vec<Var>, NeuralError> {
        self.net.check_input(input)?;
        let mut h: Vec<Var> = input.iter().map(|x| self.tape.constant(*x)).collect();
        for l in 0..self.net.n_layers() {
            let z = self.affine(l, &h, true);
            h = self.activate(l, z);
        }
        Ok(h)
    }

    /// The forward-mode derivative recurrences recorded on the tape, so that
    /// parameter gradients flow through the input derivatives.
    pub fn forward_with_derivatives(&mut self, input: &[f64]) -> Result<TapedBundle, NeuralError> {
        self.net.check_input(input)?;
        let d = self.net.d_in();
        let mut h: Vec<Var> = input.iter().map(|x| self.tape.constant(*x)).collect();
        let mut h1: Vec<Vec<Var>> = (0..d)
            .map(|j| (0..d).map(|i| self.tape.constant(if i == j { 1.0 } else { 0.0 })).collect())
            .collect();
        let mut h2: Vec<Vec<Var>> = (0..d)
            .map(|_| (0..d).map(|_| self.tape.constant(0.0)).collect())
            .collect();
        for l in 0..self.net.n_layers() {
            let z = self.affine(l, &h, true);
            let z1: Vec<Vec<Var>> = h1.iter().map(|v| self.affine(l, v, false)).collect();
            let z2: Vec<Vec<Var>> = h2.iter().map(|v| self.affine(l, v, false)).collect();
            match self.net.activation(l) {
                Activation::Tanh => {
                    h = z.iter().map(|v| self.tape.tanh(*v)).collect();
                    let s1: Vec<Var> = h
                        .iter()
                        .map(|v| {
                            let sq = self.tape.square(*v);
                            let neg = self.tape.neg(sq);
                            self.tape.add_const(neg, 1.0)
                        })
                        .collect();
                    let s2: Vec<Var> = h
                        .iter()
                        .zip(&s1)
                        .map(|(v, s)| {
                            let p = self.tape.mul(*v, *s);
                            self.tape.scale(p, -2.0)
                        })
                        .collect();
                    for j in 0..d {
                        let mut nh1 = Vec::with_capacity(h.len());
                        let mut nh2 = Vec::with_capacity(h.len());
                        for u in 0..h.len() {
                            let zz = self.tape.square(z1[j][u]);
                            let a = self.tape.mul(s2[u], zz);
                            let b = self.tape.mul(s1[u], z2[j][u]);
                            nh2.push(self.tape.add(a, b));
                            nh1.push(self.tape.mul(s1[u], z1[j][u]));
                        }
                        h1[j] = nh1;
                        h2[j] = nh2;
                    }
                }
                Activation::Identity => {
                    h = z;
                    h1 = z1;
                    h2 = z2;
                }
            }
        }
        let out = self.net.d_out();
        let mut jac = Vec::with_capacity(out * d);
        let mut hess = Vec::with_capacity(out * d);
        for o in 0..out {
            for j in 0..d {
                jac.push(h1[j][o]);
                hess.push(h2[j][o]);
            }
        }
        Ok(TapedBundle {
            value: h,
            input_jacobian: jac,
            input_hessian_diag: hess,
        })
    }
}

/// Exact reverse-mode gradient of a scalar loss built on a [`NetTape`].
/// Fails if the loss passed through a non-differentiable point.
pub fn grad_params<F>(net: &DenseNetwork, loss: F) -> Result<Vec<f64>, NeuralError>
where
    F: FnOnce(&mut NetTape<'_>) -> Result<Var, NeuralError>,
{
    let mut nt = NetTape::new(net);
    let out = loss(&mut nt)?;
    if let Some(why) = nt.tape.nonsmooth() {
        return Err(NeuralError::NonDifferentiable(why.to_string()));
    }
    let adj = nt.tape.gradient(out);
    Ok(nt.params.iter().map(|p| adj[p.index()]).collect())
}

/// Central-difference gradient of `loss(θ)`; the cross-checking fallback.
pub fn grad_params_fd<F>(net: &DenseNetwork, loss: F, step: f64) -> Vec<f64>
where
    F: Fn(&DenseNetwork) -> f64,
{
    let mut probe = net.clone();
    (0..net.n_params())
        .map(|i| {
            let p = net.params[i];
            let h = step * (1.0 + p.abs());
            probe.params[i] = p + h;
            let fp = loss(&probe);
            probe.params[i] = p - h;
            let fm = loss(&probe);
            probe.params[i] = p;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<(), NeuralError> {
    if let Some((index, value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(NeuralError::NonFiniteGradient { index, value: *value });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..theta.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grad[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        theta[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// On-disk network: widths, activation tags, `θ` and the seed it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub widths: Vec<usize>,
    pub activation: String,
    pub output_activation: Activation,
    pub params: Vec<f64>,
    pub seed: Option<u64>,
}

impl Checkpoint {
    pub fn into_network(self) -> Result<DenseNetwork, NeuralError> {
        if self.activation != "tanh" {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported hidden activation `{}`",
                self.activation
            )));
        }
        DenseNetwork::new(self.widths, self.output_activation, self.params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint is plain data")
    }

    pub fn from_json(s: &str) -> Result<Self, NeuralError> {
        serde_json::from_str(s).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        std::fs::write(path, self.to_json()).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let s = std::fs::read_to_string(path).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        Self::from_json(&s)
    }
}
