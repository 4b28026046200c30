//! Feature discovery with an autoencoder-like network.
//!
//! The encoder `p_θ: ℝⁿ → ℝᵏ` proposes features, the decoder reconstructs the
//! running cost (or barrier) from them, and a second loss term pushes the
//! reduction coefficients `a_i`, `b_i` of the learned features towards being
//! constant on each level set ("preimage bucket") of the feature.

use std::io::Write;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::montecarlo::StateFn;
use crate::neural::{adam_step, jet_backward, jet_forward, Activation, AdamState, Channels, DenseNetwork};
use crate::par;
use crate::reduction::FeatureMap;
use crate::rng::aux_rng;
use crate::sde::{Diffusion, StochasticSystem};
use crate::stats;

/// Below this `a_i` is clamped and a quadratic penalty applies.
pub const A_FLOOR: f64 = 1e-3;
pub const BARRIER_WEIGHT: f64 = 1e3;

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderNet {
    pub encoder: DenseNetwork,
    pub decoder: DenseNetwork,
}

impl AutoencoderNet {
    /// Tanh everywhere except the decoder output, which is linear.
    pub fn new(n: usize, k: usize, encoder_hidden: &[usize], decoder_hidden: &[usize], seed: u64) -> Result<Self, TrainError> {
        let mut ew = vec![n];
        ew.extend(encoder_hidden);
        ew.push(k);
        let mut dw = vec![k];
        dw.extend(decoder_hidden);
        dw.push(1);
        Ok(Self {
            encoder: DenseNetwork::glorot(ew, Activation::Tanh, seed)?,
            decoder: DenseNetwork::glorot(dw, Activation::Identity, seed ^ 0xdec0)?,
        })
    }

    pub fn from_parts(encoder: DenseNetwork, decoder: DenseNetwork) -> Result<Self, TrainError> {
        if encoder.d_out() != decoder.d_in() || decoder.d_out() != 1 {
            return Err(TrainError::InvalidConfig(format!(
                "encoder emits {} features, decoder takes {} and emits {}",
                encoder.d_out(),
                decoder.d_in(),
                decoder.d_out()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn n(&self) -> usize {
        self.encoder.d_in()
    }

    pub fn k(&self) -> usize {
        self.encoder.d_out()
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward(x).expect("state length matches encoder")
    }

    pub fn reconstruct(&self, x: &[f64]) -> f64 {
        self.decoder.forward(&self.encode(x)).expect("feature length matches decoder")[0]
    }

    /// Batched encoding of row-major states.
    pub fn encode_batch(&self, states: &[Vec<f64>]) -> Array2<f64> {
        let x = states_matrix(states, self.n());
        jet_forward(&self.encoder, x.view(), Channels::value_only(states.len())).0
    }

    pub fn reconstruct_batch(&self, states: &[Vec<f64>]) -> Vec<f64> {
        let xi = self.encode_batch(states);
        let (out, _) = jet_forward(&self.decoder, xi.view(), Channels::value_only(states.len()));
        out.column(0).to_vec()
    }

    /// The encoder as a feature map with network input derivatives; second
    /// derivatives fall back to differences of the gradient.
    pub fn feature_map(&self) -> FeatureMap {
        let enc = Arc::new(self.encoder.clone());
        let e2 = enc.clone();
        FeatureMap::new(
            self.k(),
            self.n(),
            Arc::new(move |x: &[f64]| enc.forward(x).expect("state length")),
            Some(Arc::new(move |x: &[f64]| {
                e2.forward_with_derivatives(x).expect("state length").input_jacobian
            })),
            None,
        )
    }
}

fn states_matrix(states: &[Vec<f64>], n: usize) -> Array2<f64> {
    let mut x = Array2::<f64>::zeros((states.len(), n));
    for (i, s) in states.iter().enumerate() {
        x.row_mut(i).assign(&ArrayView2::from_shape((1, n), s).expect("state length").row(0));
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonOrder {
    /// Consecutive differences of the sorted samples.
    #[default]
    Sorted,
    /// Consecutive differences in the order the samples arrived.
    ArrivalOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterRule {
    /// Chain neighbours closer than `ε` in sorted order.
    #[default]
    SingleLinkage,
    /// Bins of width `ε` anchored at the minimum.
    FixedWidth,
}

/// One fifth of the mean absolute consecutive difference.
pub fn epsilon_default(samples: &[f64], order: EpsilonOrder) -> Result<f64, TrainError> {
    if samples.len() < 2 {
        return Err(TrainError::InvalidConfig("need at least two feature samples".into()));
    }
    let mut v = samples.to_vec();
    if order == EpsilonOrder::Sorted {
        v.sort_by(f64::total_cmp);
    }
    let sum = stats::compensated_sum(v.windows(2).map(|w| (w[1] - w[0]).abs()));
    let eps = sum / (v.len() - 1) as f64 / 5.0;
    if !(eps > 0.0) {
        return Err(TrainError::DegenerateThreshold);
    }
    Ok(eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Mean feature value of the members.
    pub key: f64,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBuckets {
    pub epsilon: f64,
    pub range: (f64, f64),
    pub buckets: Vec<Bucket>,
}

/// Level-set buckets per feature over a fixed batch of states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreimageIndex {
    pub states: Vec<Vec<f64>>,
    pub features: Vec<FeatureBuckets>,
}

impl PreimageIndex {
    pub fn bucket_counts(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.buckets.len()).collect()
    }
}

/// Group `values` into buckets under `rule` with threshold `eps`.
pub fn cluster_values(values: &[f64], eps: f64, rule: ClusterRule) -> FeatureBuckets {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let lo = order.first().map_or(0.0, |&i| values[i]);
    let hi = order.last().map_or(0.0, |&i| values[i]);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut prev_key: Option<i64> = None;
    for (pos, &i) in order.iter().enumerate() {
        let start_new = match rule {
            ClusterRule::SingleLinkage => pos == 0 || values[i] - values[order[pos - 1]] >= eps,
            ClusterRule::FixedWidth => {
                let bin = ((values[i] - lo) / eps).floor() as i64;
                let new = prev_key != Some(bin);
                prev_key = Some(bin);
                new
            }
        };
        if start_new {
            groups.push(Vec::new());
        }
        groups.last_mut().expect("group exists").push(i);
    }
    let buckets = groups
        .into_iter()
        .map(|mut members| {
            members.sort_unstable();
            let key = stats::mean(&members.iter().map(|&i| values[i]).collect::<Vec<_>>());
            Bucket { key, members }
        })
        .collect();
    FeatureBuckets {
        epsilon: eps,
        range: (lo, hi),
        buckets,
    }
}

/// Encode the batch and bucket each feature. `eps` per feature; `None` uses
/// [`epsilon_default`] on the encoded batch.
pub fn build_preimage(
    states: &[Vec<f64>],
    encoder: &DenseNetwork,
    eps: Option<&[f64]>,
    order: EpsilonOrder,
    rule: ClusterRule,
) -> Result<PreimageIndex, TrainError> {
    let x = states_matrix(states, encoder.d_in());
    let (xi, _) = jet_forward(encoder, x.view(), Channels::value_only(states.len()));
    let k = encoder.d_out();
    let mut features = Vec::with_capacity(k);
    for i in 0..k {
        let col = xi.column(i).to_vec();
        let e = match eps {
            Some(e) => e[i],
            None => epsilon_default(&col, order)?,
        };
        features.push(cluster_values(&col, e, rule));
    }
    Ok(PreimageIndex {
        states: states.to_vec(),
        features,
    })
}

/// Mean of `(c(x) − r̂(p(x)))²` over the batch.
pub fn loss_rc(net: &AutoencoderNet, states: &[Vec<f64>], c: &StateFn) -> f64 {
    let r = net.reconstruct_batch(states);
    let sq: Vec<f64> = states.iter().zip(&r).map(|(x, ri)| (c(x) - ri).powi(2)).collect();
    stats::mean(&sq)
}

/// Percentage reconstruction error `100·Σ|c − r̂| / Σ|c|`.
pub fn reconstruction_pct_error(net: &AutoencoderNet, states: &[Vec<f64>], c: &StateFn) -> f64 {
    let r = net.reconstruct_batch(states);
    let truth: Vec<f64> = states.iter().map(|x| c(x)).collect();
    stats::percentage_error(&r, &truth)
}

/// Diagonal of `σσᵀ` at `x`, if the diffusion has no cross terms.
fn diffusion_diag(system: &StochasticSystem) -> Result<Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync + '_>, TrainError> {
    let n = system.state_dim();
    let m = system.control_dim();
    match system.diffusion() {
        Diffusion::ScaledIdentity(s) => {
            let s2 = s * s;
            Ok(Box::new(move |_, out: &mut [f64]| out.fill(s2)))
        }
        Diffusion::Diagonal(d) => Ok(Box::new(move |x, out: &mut [f64]| {
            d(x, out);
            out.iter_mut().for_each(|v| *v *= *v);
        })),
        Diffusion::Constant(c) => {
            let mut diag = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let s: f64 = (0..m).map(|l| c[i * m + l] * c[j * m + l]).sum();
                    if i == j {
                        diag[i] = s;
                    } else if s.abs() > 1e-14 {
                        return Err(TrainError::Unsupported(
                            "comparison loss needs a diffusion with diagonal σσᵀ".into(),
                        ));
                    }
                }
            }
            Ok(Box::new(move |_, out: &mut [f64]| out.copy_from_slice(&diag)))
        }
        Diffusion::StateDependent(_) => Err(TrainError::Unsupported(
            "comparison loss needs a diffusion with diagonal σσᵀ".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtValue {
    pub loss: f64,
    /// Probe points where some `a_i` fell below [`A_FLOOR`].
    pub clamped: usize,
}

/// Per-state weight `1/(k·|R_i|·|M_ξ,i|)` for each feature.
fn ct_weights(pre: &PreimageIndex) -> Vec<Vec<f64>> {
    let k = pre.features.len();
    let mut w = vec![vec![0.0; k]; pre.states.len()];
    for (i, f) in pre.features.iter().enumerate() {
        let nb = f.buckets.len() as f64;
        for b in &f.buckets {
            let wb = 1.0 / (k as f64 * nb * b.members.len() as f64);
            for &m in &b.members {
                w[m][i] = wb;
            }
        }
    }
    w
}

struct CtContext<'a> {
    system: &'a StochasticSystem,
    diag: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync + 'a>,
    fd_step: f64,
}

impl CtContext<'_> {
    /// Loss contribution, clamp count and (optionally) encoder gradient for
    /// the states `range` of the preimage batch.
    fn chunk(
        &self,
        enc: &DenseNetwork,
        pre: &PreimageIndex,
        weights: &[Vec<f64>],
        range: std::ops::Range<usize>,
        want_grad: bool,
    ) -> (f64, usize, Option<Vec<f64>>) {
        let n = enc.d_in();
        let k = enc.d_out();
        let per = 2 * n;
        let rows = range.len() * per;
        let mut x = Array2::<f64>::zeros((rows, n));
        let mut steps = vec![0.0; range.len() * n];
        for (s, idx) in range.clone().enumerate() {
            let base = &pre.states[idx];
            for j in 0..n {
                let h = self.fd_step * (1.0 + base[j].abs());
                steps[s * n + j] = h;
                for (side, sgn) in [(0, 1.0), (1, -1.0)] {
                    let r = s * per + 2 * j + side;
                    x.row_mut(r).assign(&ndarray::ArrayView1::from(base.as_slice()));
                    x[[r, j]] += sgn * h;
                }
            }
        }
        let ch = Channels::with_derivatives(rows, n, (0..n).collect());
        let (out, cache) = jet_forward(enc, x.view(), ch.clone());
        // a, A, b per probe row and feature
        let mut f = vec![0.0; n];
        let mut dd = vec![0.0; n];
        let mut a = vec![0.0; rows * k];
        let mut big_a = vec![0.0; rows * k];
        let mut fs = vec![0.0; rows * n];
        let mut ds = vec![0.0; rows * n];
        for r in 0..rows {
            let xr: Vec<f64> = x.row(r).to_vec();
            self.system.drift_into(&xr, &mut f);
            (self.diag)(&xr, &mut dd);
            fs[r * n..(r + 1) * n].copy_from_slice(&f);
            ds[r * n..(r + 1) * n].copy_from_slice(&dd);
            for i in 0..k {
                let mut ai = 0.0;
                let mut gen = 0.0;
                for j in 0..n {
                    let g = out[[ch.first(j).start + r, i]];
                    let s2 = out[[ch.second(j).start + r, i]];
                    ai += dd[j] * g * g;
                    gen += f[j] * g + 0.5 * dd[j] * s2;
                }
                a[r * k + i] = ai;
                big_a[r * k + i] = gen;
            }
        }
        let b = |r: usize, i: usize| big_a[r * k + i] / a[r * k + i].max(A_FLOOR);
        let mut loss = 0.0;
        let mut clamped = 0;
        let mut a_adj = vec![0.0; rows * k];
        let mut b_adj = vec![0.0; rows * k];
        for (s, idx) in range.clone().enumerate() {
            for i in 0..k {
                let w = weights[idx][i];
                for j in 0..n {
                    let h = steps[s * n + j];
                    let (rp, rm) = (s * per + 2 * j, s * per + 2 * j + 1);
                    let da = (a[rp * k + i] - a[rm * k + i]) / (2.0 * h);
                    let db = (b(rp, i) - b(rm, i)) / (2.0 * h);
                    loss += w * (da * da + db * db);
                    a_adj[rp * k + i] += w * da / h;
                    a_adj[rm * k + i] -= w * da / h;
                    b_adj[rp * k + i] += w * db / h;
                    b_adj[rm * k + i] -= w * db / h;
                }
            }
        }
        for r in 0..rows {
            let s = r / per;
            let idx = range.start + s;
            let mut any = false;
            for i in 0..k {
                let ai = a[r * k + i];
                if ai < A_FLOOR {
                    any = true;
                    let w = weights[idx][i];
                    let gap = (A_FLOOR - ai) / A_FLOOR;
                    loss += w * BARRIER_WEIGHT * gap * gap;
                    a_adj[r * k + i] -= w * BARRIER_WEIGHT * 2.0 * gap / A_FLOOR;
                }
            }
            if any {
                clamped += 1;
            }
        }
        if !want_grad {
            return (loss, clamped, None);
        }
        let mut adj = Array2::<f64>::zeros(out.raw_dim());
        for r in 0..rows {
            for i in 0..k {
                let ai = a[r * k + i];
                let ac = ai.max(A_FLOOR);
                let free = ai >= A_FLOOR;
                let bi = big_a[r * k + i] / ac;
                let (aa, ba) = (a_adj[r * k + i], b_adj[r * k + i]);
                for j in 0..n {
                    let g = out[[ch.first(j).start + r, i]];
                    let d = ds[r * n + j];
                    let da_dg = 2.0 * d * g;
                    let mut db_dg = fs[r * n + j] / ac;
                    if free {
                        db_dg -= bi / ac * da_dg;
                    }
                    adj[[ch.first(j).start + r, i]] = aa * da_dg + ba * db_dg;
                    adj[[ch.second(j).start + r, i]] = ba * 0.5 * d / ac;
                }
            }
        }
        let (grad, _) = jet_backward(enc, &cache, adj);
        (loss, clamped, Some(grad))
    }
}

fn ct_eval(
    enc: &DenseNetwork,
    system: &StochasticSystem,
    pre: &PreimageIndex,
    fd_step: f64,
    want_grad: bool,
) -> Result<(CtValue, Vec<f64>), TrainError> {
    if system.state_dim() != enc.d_in() {
        return Err(TrainError::InvalidConfig(format!(
            "system has {} states, encoder takes {}",
            system.state_dim(),
            enc.d_in()
        )));
    }
    let ctx = CtContext {
        system,
        diag: diffusion_diag(system)?,
        fd_step,
    };
    let weights = ct_weights(pre);
    let n_states = pre.states.len();
    let chunks = n_states.div_ceil(CHUNK);
    let parts = par::map_indices(chunks, |c| {
        ctx.chunk(enc, pre, &weights, c * CHUNK..((c + 1) * CHUNK).min(n_states), want_grad)
    });
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut grad = vec![0.0; if want_grad { enc.n_params() } else { 0 }];
    for (l, c, g) in parts {
        loss += l;
        clamped += c;
        if let Some(g) = g {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((CtValue { loss, clamped }, grad))
}

/// Comparison loss of the learned features over the preimage buckets.
pub fn loss_ct(
    net: &AutoencoderNet,
    system: &StochasticSystem,
    preimage: &PreimageIndex,
    fd_step: f64,
) -> Result<CtValue, TrainError> {
    Ok(ct_eval(&net.encoder, system, preimage, fd_step, false)?.0)
}

/// Reconstruction loss and its gradient (encoder params then decoder params).
fn rc_eval(net: &AutoencoderNet, states: &[Vec<f64>], c: &StateFn, freeze_encoder: bool) -> (f64, Vec<f64>) {
    let n_states = states.len();
    let chunks = n_states.div_ceil(256);
    let parts = par::map_indices(chunks, |ci| {
        let sl = &states[ci * 256..((ci + 1) * 256).min(n_states)];
        let x = states_matrix(sl, net.n());
        let (xi, ecache) = jet_forward(&net.encoder, x.view(), Channels::value_only(sl.len()));
        let (r, dcache) = jet_forward(&net.decoder, xi.view(), Channels::value_only(sl.len()));
        let mut adj = Array2::<f64>::zeros(r.raw_dim());
        let mut sse = 0.0;
        for (i, s) in sl.iter().enumerate() {
            let e = r[[i, 0]] - c(s);
            sse += e * e;
            adj[[i, 0]] = 2.0 * e;
        }
        let (gd, xi_adj) = jet_backward(&net.decoder, &dcache, adj);
        let ge = if freeze_encoder {
            vec![0.0; net.encoder.n_params()]
        } else {
            jet_backward(&net.encoder, &ecache, xi_adj).0
        };
        (sse, ge, gd)
    });
    let ne = net.encoder.n_params();
    let mut grad = vec![0.0; ne + net.decoder.n_params()];
    let mut sse = 0.0;
    for (s, ge, gd) in parts {
        sse += s;
        grad[..ne].iter_mut().zip(&ge).for_each(|(a, b)| *a += b);
        grad[ne..].iter_mut().zip(&gd).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / n_states.max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (sse * inv, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub w_rc: f64,
    pub w_ct: f64,
    /// Preimage refresh period in batches.
    pub refresh_every: usize,
    pub epochs: usize,
    /// Batches per epoch.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub k: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub epsilon_order: EpsilonOrder,
    pub cluster_rule: ClusterRule,
    /// Relative step of the central differences of `a_i`, `b_i`.
    pub fd_step: f64,
    /// Train only the decoder.
    pub freeze_encoder: bool,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            w_rc: 1.0,
            w_ct: 10.0,
            refresh_every: 1,
            epochs: 5,
            iterations: 100,
            batch_size: 1000,
            lr: 1e-3,
            seed: 0,
            k: 2,
            encoder_hidden: vec![100, 10],
            decoder_hidden: vec![10, 100],
            epsilon_order: EpsilonOrder::Sorted,
            cluster_rule: ClusterRule::SingleLinkage,
            fd_step: 1e-4,
            freeze_encoder: false,
        }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.w_rc >= 0.0 && self.w_ct >= 0.0) || !(self.w_rc + self.w_ct > 0.0) {
            return bad("loss weights must be nonnegative with a positive sum");
        }
        if self.refresh_every == 0 {
            return bad("refresh_every must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr > 0.0) || !(self.fd_step > 0.0) {
            return bad("lr and fd_step must be positive");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeLogRow {
    pub epoch: usize,
    pub iteration: usize,
    pub loss_rc: f64,
    pub loss_ct: f64,
    pub loss_total: f64,
    pub clamped: usize,
    pub buckets: Vec<usize>,
}

pub fn write_ae_log_csv<W: Write>(log: &[AeLogRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,iteration,loss_rc,loss_ct,loss_total,clamped_probes")?;
    for r in log {
        writeln!(
            w,
            "{},{},{:e},{:e},{:e},{}",
            r.epoch, r.iteration, r.loss_rc, r.loss_ct, r.loss_total, r.clamped
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainedAutoencoder {
    pub net: AutoencoderNet,
    pub log: Vec<AeLogRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn split_params(net: &mut AutoencoderNet, theta: &[f64]) {
    let ne = net.encoder.n_params();
    net.encoder.params.copy_from_slice(&theta[..ne]);
    net.decoder.params.copy_from_slice(&theta[ne..]);
}

/// Total loss `w_RC·L_RC + w_CT·L_CT` on a batch and its gradient.
fn total_eval(
    net: &AutoencoderNet,
    system: &StochasticSystem,
    c: &StateFn,
    batch: &[Vec<f64>],
    pre: &PreimageIndex,
    cfg: &AeTrainConfig,
) -> Result<(f64, f64, CtValue, Vec<f64>), TrainError> {
    let (lrc, mut grad) = rc_eval(net, batch, c, cfg.freeze_encoder);
    grad.iter_mut().for_each(|g| *g *= cfg.w_rc);
    let ct = if cfg.w_ct > 0.0 {
        let (ct, g) = ct_eval(&net.encoder, system, pre, cfg.fd_step, !cfg.freeze_encoder)?;
        if !cfg.freeze_encoder {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += cfg.w_ct * b);
        }
        ct
    } else {
        CtValue { loss: 0.0, clamped: 0 }
    };
    Ok((lrc, ct.loss, ct, grad))
}

/// Batch loop with periodic preimage refresh and Adam updates.
pub fn train_autoencoder(
    system: &StochasticSystem,
    c: &StateFn,
    states: &[Vec<f64>],
    cfg: &AeTrainConfig,
) -> Result<TrainedAutoencoder, TrainError> {
    cfg.validate()?;
    let n = system.state_dim();
    if states.len() < 2 || states.iter().any(|s| s.len() != n) {
        return Err(TrainError::InvalidConfig(format!("need at least two states of length {n}")));
    }
    let net = AutoencoderNet::new(n, cfg.k, &cfg.encoder_hidden, &cfg.decoder_hidden, cfg.seed)?;
    train_autoencoder_from(net, system, c, states, cfg)
}

/// As [`train_autoencoder`], starting from a given network.
pub fn train_autoencoder_from(
    mut net: AutoencoderNet,
    system: &StochasticSystem,
    c: &StateFn,
    states: &[Vec<f64>],
    cfg: &AeTrainConfig,
) -> Result<TrainedAutoencoder, TrainError> {
    cfg.validate()?;
    let mut theta: Vec<f64> = net.encoder.params.iter().chain(&net.decoder.params).copied().collect();
    let mut adam = AdamState::new(theta.len());
    let mut log = Vec::new();
    let mut pre: Option<PreimageIndex> = None;
    let mut order: Vec<usize> = (0..states.len()).collect();
    let bs = cfg.batch_size.min(states.len());
    let mut batch_no = 0;
    let mut initial_loss = f64::NAN;
    let mut last_batch: Vec<Vec<f64>> = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = aux_rng(cfg.seed, 0xae00 + epoch as u64);
        order.shuffle(&mut rng);
        for it in 0..cfg.iterations {
            let batch: Vec<Vec<f64>> = (0..bs)
                .map(|j| states[order[(it * bs + j) % states.len()]].clone())
                .collect();
            if batch_no % cfg.refresh_every == 0 || pre.is_none() {
                pre = Some(build_preimage(&batch, &net.encoder, None, cfg.epsilon_order, cfg.cluster_rule)?);
            }
            let p = pre.as_ref().expect("preimage built");
            let (lrc, lct, ct, grad) = total_eval(&net, system, c, &batch, p, cfg)?;
            let total = cfg.w_rc * lrc + cfg.w_ct * lct;
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    last_good: Box::new(net.encoder.clone()),
                });
            }
            if batch_no == 0 {
                initial_loss = total;
            }
            log.push(AeLogRow {
                epoch,
                iteration: it,
                loss_rc: lrc,
                loss_ct: lct,
                loss_total: total,
                clamped: ct.clamped,
                buckets: p.bucket_counts(),
            });
            adam_step(&mut adam, &mut theta, &grad, cfg.lr)?;
            split_params(&mut net, &theta);
            batch_no += 1;
            last_batch = batch;
        }
    }
    let final_loss = if last_batch.is_empty() {
        initial_loss
    } else {
        let p = build_preimage(&last_batch, &net.encoder, None, cfg.epsilon_order, cfg.cluster_rule)?;
        let (lrc, lct, _, _) = total_eval(&net, system, c, &last_batch, &p, cfg)?;
        cfg.w_rc * lrc + cfg.w_ct * lct
    };
    Ok(TrainedAutoencoder {
        net,
        log,
        initial_loss,
        final_loss,
    })
}

/// Comparison of learned against reference features over a state set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub reconstruction_pct_error: f64,
    /// `corr(ξ̂_i, ξ_i)` for matching indices.
    pub correlation: Vec<f64>,
    pub mse_raw: Vec<f64>,
    /// MSE after choosing the better sign of each learned feature.
    pub mse_best_sign: Vec<f64>,
    /// `|corr|` under the best assignment of learned to reference features.
    pub best_permutation: Vec<usize>,
    pub best_permutation_abs_corr: Vec<f64>,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

pub fn evaluate_features(net: &AutoencoderNet, states: &[Vec<f64>], reference: &FeatureMap, c: &StateFn) -> FeatureReport {
    let k = net.k();
    let learned = net.encode_batch(states);
    let truth: Vec<Vec<f64>> = (0..k)
        .map(|i| states.iter().map(|x| reference.feature(x, i)).collect())
        .collect();
    let col = |i: usize| learned.column(i).to_vec();
    let corr = |i: usize, j: usize| stats::pearson(&col(i), &truth[j]);
    let mse = |a: &[f64], b: &[f64]| stats::mean(&a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect::<Vec<_>>());
    let correlation: Vec<f64> = (0..k).map(|i| corr(i, i)).collect();
    let mse_raw: Vec<f64> = (0..k).map(|i| mse(&col(i), &truth[i])).collect();
    let mse_best_sign = (0..k)
        .map(|i| {
            let neg: Vec<f64> = col(i).iter().map(|v| -v).collect();
            mse(&col(i), &truth[i]).min(mse(&neg, &truth[i]))
        })
        .collect();
    let (best_permutation, best_permutation_abs_corr) = permutations(k)
        .into_iter()
        .map(|p| {
            let c: Vec<f64> = p.iter().enumerate().map(|(j, &i)| corr(i, j).abs()).collect();
            (p, c)
        })
        .max_by(|a, b| a.1.iter().sum::<f64>().total_cmp(&b.1.iter().sum::<f64>()))
        .expect("at least one permutation");
    FeatureReport {
        reconstruction_pct_error: reconstruction_pct_error(net, states, c),
        correlation,
        mse_raw,
        mse_best_sign,
        best_permutation,
        best_permutation_abs_corr,
    }
}

/// All points of `[lo, hi]ⁿ` at spacing `h`.
pub fn state_grid(n: usize, lo: f64, hi: f64, h: f64) -> Vec<Vec<f64>> {
    let axis = crate::pinn::linspace_step(lo, hi, h);
    let mut pts = vec![Vec::new()];
    for _ in 0..n {
        pts = pts
            .into_iter()
            .flat_map(|p: Vec<f64>| {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use rand::Rng;

    fn linear_encoder() -> DenseNetwork {
        DenseNetwork::new(
            vec![3, 2],
            Activation::Identity,
            vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap()
    }

    fn random_states(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = aux_rng(seed, 1);
        (0..n)
            .map(|_| (0..3).map(|_| (rng.random_range(0..=100) as f64) * 0.01).collect())
            .collect()
    }

    #[test]
    fn epsilon_examples() {
        // one fifth of the single gap 1
        assert!((epsilon_default(&[0.0, 1.0], EpsilonOrder::Sorted).unwrap() - 0.2).abs() < 1e-15);
        let h = 0.3;
        let mut seq: Vec<f64> = (0..50).map(|i| i as f64 * h).collect();
        seq.shuffle(&mut aux_rng(1, 2));
        assert!((epsilon_default(&seq, EpsilonOrder::Sorted).unwrap() - h / 5.0).abs() < 1e-12);
        assert!(epsilon_default(&seq, EpsilonOrder::ArrivalOrder).unwrap() > h / 5.0);
        assert!(matches!(
            epsilon_default(&[2.0; 10], EpsilonOrder::Sorted),
            Err(TrainError::DegenerateThreshold)
        ));
    }

    #[test]
    fn clustering_extremes() {
        let v: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        for rule in [ClusterRule::SingleLinkage, ClusterRule::FixedWidth] {
            let one = cluster_values(&v, 10.0, rule);
            assert_eq!(one.buckets.len(), 1);
            assert_eq!(one.buckets[0].members.len(), 20);
            let single = cluster_values(&v, 1e-9, rule);
            assert_eq!(single.buckets.len(), 20);
        }
    }

    #[test]
    fn single_linkage_buckets_chain_within_epsilon() {
        let states = random_states(500, 3);
        let pre = build_preimage(&states, &linear_encoder(), None, EpsilonOrder::ArrivalOrder, ClusterRule::SingleLinkage)
            .unwrap();
        let f = &pre.features[0];
        let mut seen = 0;
        for (bi, b) in f.buckets.iter().enumerate() {
            let mut vals: Vec<f64> = b.members.iter().map(|&m| states[m][0] + states[m][1]).collect();
            vals.sort_by(f64::total_cmp);
            for w in vals.windows(2) {
                assert!(w[1] - w[0] < f.epsilon);
            }
            // neighbouring buckets are at least ε apart
            if let Some(next) = f.buckets.get(bi + 1) {
                let lo_next = next.members.iter().map(|&m| states[m][0] + states[m][1]).fold(f64::INFINITY, f64::min);
                assert!(lo_next - vals.last().unwrap() >= f.epsilon - 1e-12);
            }
            seen += b.members.len();
        }
        assert_eq!(seen, states.len());
    }

    #[test]
    fn fixed_width_members_stay_near_key() {
        let states = random_states(400, 4);
        let pre =
            build_preimage(&states, &linear_encoder(), None, EpsilonOrder::Sorted, ClusterRule::FixedWidth).unwrap();
        for (i, f) in pre.features.iter().enumerate() {
            for b in &f.buckets {
                for &m in &b.members {
                    let v = if i == 0 { states[m][0] + states[m][1] } else { states[m][2] };
                    assert!((v - b.key).abs() < f.epsilon + 1e-12);
                }
            }
        }
    }

    #[test]
    fn arrival_order_fixed_width_gives_about_fifteen_buckets() {
        let states = random_states(1000, 5);
        let pre =
            build_preimage(&states, &linear_encoder(), None, EpsilonOrder::ArrivalOrder, ClusterRule::FixedWidth).unwrap();
        let m = pre.bucket_counts();
        assert!(m.iter().all(|&c| (10..=20).contains(&c)), "{m:?}");
    }

    #[test]
    fn comparison_loss_of_analytic_features() {
        let sys = presets::sys3d_system();
        let net = AutoencoderNet::from_parts(linear_encoder(), DenseNetwork::glorot(vec![2, 3, 1], Activation::Identity, 1).unwrap()).unwrap();
        let states = random_states(200, 6);
        let pre = build_preimage(&states, &net.encoder, None, EpsilonOrder::Sorted, ClusterRule::SingleLinkage).unwrap();
        let ct = loss_ct(&net, &sys, &pre, 1e-4).unwrap();
        // ∇b1 = (½,½,0), ∇b2 = (0,0,1), a constant: (½ + 1)/2
        assert!((ct.loss - 0.75).abs() < 1e-6, "{}", ct.loss);
        assert_eq!(ct.clamped, 0);
    }

    #[test]
    fn comparison_loss_vanishes_without_drift() {
        let sys = StochasticSystem::new(3, 3, Arc::new(|_: &[f64], f: &mut [f64]| f.fill(0.0)), Diffusion::ScaledIdentity(1.0)).unwrap();
        let net = AutoencoderNet::from_parts(linear_encoder(), DenseNetwork::glorot(vec![2, 3, 1], Activation::Identity, 1).unwrap()).unwrap();
        let states = random_states(100, 7);
        let pre = build_preimage(&states, &net.encoder, None, EpsilonOrder::Sorted, ClusterRule::SingleLinkage).unwrap();
        assert!(loss_ct(&net, &sys, &pre, 1e-4).unwrap().loss < 1e-12);
    }

    #[test]
    fn comparison_loss_ignores_member_order() {
        let sys = presets::sys3d_system();
        let net = AutoencoderNet::new(3, 2, &[8], &[4], 3).unwrap();
        let states = random_states(120, 8);
        let pre = build_preimage(&states, &net.encoder, None, EpsilonOrder::ArrivalOrder, ClusterRule::FixedWidth).unwrap();
        let base = loss_ct(&net, &sys, &pre, 1e-4).unwrap().loss;
        let mut shuffled = pre.clone();
        for f in &mut shuffled.features {
            for b in &mut f.buckets {
                b.members.reverse();
            }
            f.buckets.reverse();
        }
        let again = loss_ct(&net, &sys, &shuffled, 1e-4).unwrap().loss;
        assert!((base - again).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn reconstruction_loss_of_constant_decoder_is_variance() {
        let c = presets::sys3d_cost().running;
        let states = random_states(300, 9);
        let vals: Vec<f64> = states.iter().map(|x| c(x)).collect();
        let mean = stats::mean(&vals);
        let mut dec = DenseNetwork::glorot(vec![2, 4, 1], Activation::Identity, 2).unwrap();
        dec.params.iter_mut().for_each(|p| *p = 0.0);
        *dec.params.last_mut().unwrap() = mean;
        let net = AutoencoderNet::from_parts(linear_encoder(), dec).unwrap();
        let pop_var = stats::variance(&vals) * (vals.len() - 1) as f64 / vals.len() as f64;
        assert!((loss_rc(&net, &states, &c) - pop_var).abs() < 1e-12);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let sys = presets::sys3d_system();
        let c = presets::sys3d_cost().running;
        let mut net = AutoencoderNet::new(3, 2, &[5], &[4], 11).unwrap();
        let states = random_states(30, 10);
        let pre = build_preimage(&states, &net.encoder, None, EpsilonOrder::ArrivalOrder, ClusterRule::FixedWidth).unwrap();
        let cfg = AeTrainConfig {
            fd_step: 1e-3,
            ..Default::default()
        };
        let (_, _, _, grad) = total_eval(&net, &sys, &c, &states, &pre, &cfg).unwrap();
        let theta: Vec<f64> = net.encoder.params.iter().chain(&net.decoder.params).copied().collect();
        let f = |net: &mut AutoencoderNet, th: &[f64]| {
            split_params(net, th);
            let (a, b, _, _) = total_eval(net, &sys, &c, &states, &pre, &cfg).unwrap();
            cfg.w_rc * a + cfg.w_ct * b
        };
        for i in (0..theta.len()).step_by(3) {
            let h = 1e-6;
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (f(&mut net, &tp) - f(&mut net, &tm)) / (2.0 * h);
            assert!((grad[i] - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn barrier_engages_for_flat_features() {
        let sys = presets::sys3d_system();
        let mut enc = linear_encoder();
        enc.params[..6].iter_mut().for_each(|p| *p *= 1e-3);
        let net = AutoencoderNet::from_parts(enc, DenseNetwork::glorot(vec![2, 3, 1], Activation::Identity, 1).unwrap()).unwrap();
        let states = random_states(50, 12);
        let pre = build_preimage(&states, &net.encoder, None, EpsilonOrder::Sorted, ClusterRule::SingleLinkage).unwrap();
        let ct = loss_ct(&net, &sys, &pre, 1e-4).unwrap();
        assert!(ct.clamped > 0 && ct.loss > 100.0);
    }

    #[test]
    fn cross_diffusion_is_unsupported() {
        let sys = StochasticSystem::new(
            2,
            2,
            Arc::new(|_: &[f64], f: &mut [f64]| f.fill(0.0)),
            Diffusion::Constant(vec![1.0, 1.0, 0.0, 1.0]),
        )
        .unwrap();
        let net = AutoencoderNet::new(2, 1, &[3], &[3], 1).unwrap();
        let pre = build_preimage(&[vec![0.0, 0.0], vec![1.0, 0.5]], &net.encoder, Some(&[0.1]), EpsilonOrder::Sorted, ClusterRule::SingleLinkage)
            .unwrap();
        assert!(matches!(loss_ct(&net, &sys, &pre, 1e-4), Err(TrainError::Unsupported(_))));
    }

    #[test]
    fn grid_size_and_permutations() {
        assert_eq!(state_grid(3, 0.0, 1.0, 0.25).len(), 125);
        assert_eq!(permutations(3).len(), 6);
    }

    #[test]
    fn feature_map_wraps_encoder() {
        let net = AutoencoderNet::new(3, 2, &[6], &[4], 4).unwrap();
        let fm = net.feature_map();
        let x = [0.2, 0.4, 0.9];
        assert_eq!(fm.value(&x), net.encode(&x));
        let g = fm.grad(&x, 1);
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fd = (fm.feature(&xp, 1) - fm.feature(&xm, 1)) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-7);
        }
    }
}
