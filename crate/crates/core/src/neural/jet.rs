//! Batched Taylor-mode evaluation on matrices, with a hand-written adjoint.
//!
//! Rows are stacked channel-major: the value channel, one first-order channel
//! per input axis (if requested), and one second-order channel per entry of
//! `second_dirs`. A single matrix product per layer then propagates every
//! channel at once.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::{Activation, DenseNetwork};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channels {
    pub batch: usize,
    pub first: usize,
    pub second_dirs: Vec<usize>,
}

impl Channels {
    pub fn value_only(batch: usize) -> Self {
        Self {
            batch,
            first: 0,
            second_dirs: Vec::new(),
        }
    }

    /// First derivatives along every input axis, second along `second_dirs`.
    pub fn with_derivatives(batch: usize, d_in: usize, second_dirs: Vec<usize>) -> Self {
        Self {
            batch,
            first: d_in,
            second_dirs,
        }
    }

    pub fn count(&self) -> usize {
        1 + self.first + self.second_dirs.len()
    }

    pub fn rows(&self) -> usize {
        self.count() * self.batch
    }

    pub fn value(&self) -> std::ops::Range<usize> {
        0..self.batch
    }

    pub fn first(&self, j: usize) -> std::ops::Range<usize> {
        let s = (1 + j) * self.batch;
        s..s + self.batch
    }

    pub fn second(&self, i: usize) -> std::ops::Range<usize> {
        let s = (1 + self.first + i) * self.batch;
        s..s + self.batch
    }
}

/// Per-layer inputs and pre-activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct JetCache {
    pub channels: Channels,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

fn layer_weights(net: &DenseNetwork, l: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((net.widths[l + 1], net.widths[l]), net.weights(l)).expect("layer shape")
}

/// Evaluate the channel stack for inputs `x` (`batch × d_in`). Returns the
/// output stack (`rows × d_out`) and the cache for [`jet_backward`].
pub fn jet_forward(net: &DenseNetwork, x: ArrayView2<'_, f64>, channels: Channels) -> (Array2<f64>, JetCache) {
    let b = channels.batch;
    let d = net.d_in();
    assert_eq!(x.dim(), (b, d), "input batch shape");
    assert!(channels.second_dirs.is_empty() || channels.first == d);
    let mut h = Array2::<f64>::zeros((channels.rows(), d));
    h.slice_mut(s![channels.value(), ..]).assign(&x);
    for j in 0..channels.first {
        h.slice_mut(s![channels.first(j), j]).fill(1.0);
    }
    let mut inputs = Vec::with_capacity(net.n_layers());
    let mut pre = Vec::with_capacity(net.n_layers());
    let mut post = Vec::with_capacity(net.n_layers());
    for l in 0..net.n_layers() {
        let w = layer_weights(net, l);
        let mut z = h.dot(&w.t());
        let bias = ndarray::ArrayView1::from(net.bias(l));
        z.slice_mut(s![channels.value(), ..]).outer_iter_mut().for_each(|mut row| row += &bias);
        let out = match net.activation(l) {
            Activation::Identity => z.clone(),
            Activation::Tanh => activate(&z, &channels),
        };
        inputs.push(h);
        pre.push(z);
        h = out.clone();
        post.push(out);
    }
    (
        h,
        JetCache {
            channels,
            inputs,
            pre,
            post,
        },
    )
}

fn activate(z: &Array2<f64>, ch: &Channels) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(z.raw_dim());
    let zv = z.slice(s![ch.value(), ..]);
    let hv = zv.mapv(f64::tanh);
    let s1 = hv.mapv(|h| 1.0 - h * h);
    let s2 = &hv * &s1 * -2.0;
    for j in 0..ch.first {
        let zj = z.slice(s![ch.first(j), ..]);
        out.slice_mut(s![ch.first(j), ..]).assign(&(&s1 * &zj));
    }
    for (i, &dir) in ch.second_dirs.iter().enumerate() {
        let z1 = z.slice(s![ch.first(dir), ..]);
        let z2 = z.slice(s![ch.second(i), ..]);
        let v = &s2 * &z1 * &z1 + &s1 * &z2;
        out.slice_mut(s![ch.second(i), ..]).assign(&v);
    }
    out.slice_mut(s![ch.value(), ..]).assign(&hv);
    out
}

/// Reverse pass: given `∂L/∂(output stack)`, return `∂L/∂θ` and the
/// gradient with respect to the value-channel inputs (`batch × d_in`).
pub fn jet_backward(net: &DenseNetwork, cache: &JetCache, out_adjoint: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let ch = &cache.channels;
    let mut grad = vec![0.0; net.n_params()];
    let mut hbar = out_adjoint;
    for l in (0..net.n_layers()).rev() {
        let zbar = match net.activation(l) {
            Activation::Identity => hbar,
            Activation::Tanh => activation_adjoint(&cache.pre[l], &cache.post[l], &hbar, ch),
        };
        let (wo, bo) = net.layer_offsets(l);
        let gw = zbar.t().dot(&cache.inputs[l]);
        grad[wo..bo].copy_from_slice(gw.as_slice().expect("contiguous"));
        let gb = zbar.slice(s![ch.value(), ..]).sum_axis(Axis(0));
        grad[bo..bo + net.widths[l + 1]].copy_from_slice(gb.as_slice().expect("contiguous"));
        hbar = zbar.dot(&layer_weights(net, l));
    }
    let input_grad = hbar.slice(s![ch.value(), ..]).to_owned();
    (grad, input_grad)
}

/// With `h = tanh z`, `s1 = 1 − h²`, `s2 = −2h·s1`, `s3 = −2s1² + 4h²s1`:
///   h'  = s1 z',  h'' = s2 z'² + s1 z''
/// so
///   z̄'' = s1 h̄''
///   z̄'  = s1 h̄' + 2 s2 z' Σ h̄''   (over second channels along that axis)
///   z̄   = s1 h̄ + s2 Σ h̄' z' + Σ h̄'' (s3 z'² + s2 z'')
fn activation_adjoint(z: &Array2<f64>, post: &Array2<f64>, hbar: &Array2<f64>, ch: &Channels) -> Array2<f64> {
    let mut zbar = Array2::<f64>::zeros(z.raw_dim());
    let h = post.slice(s![ch.value(), ..]);
    let s1 = h.mapv(|v| 1.0 - v * v);
    let s2 = &h * &s1 * -2.0;
    let s3 = (&s1 * &s1) * -2.0 + &(&h * &h * &s1 * 4.0);
    let mut zv = &s1 * &hbar.slice(s![ch.value(), ..]);
    for j in 0..ch.first {
        let z1 = z.slice(s![ch.first(j), ..]);
        let hb1 = hbar.slice(s![ch.first(j), ..]);
        zv = zv + &(&s2 * &hb1 * &z1);
        zbar.slice_mut(s![ch.first(j), ..]).assign(&(&s1 * &hb1));
    }
    for (i, &dir) in ch.second_dirs.iter().enumerate() {
        let z1 = z.slice(s![ch.first(dir), ..]);
        let z2 = z.slice(s![ch.second(i), ..]);
        let hb2 = hbar.slice(s![ch.second(i), ..]);
        zv = zv + &(&hb2 * &(&s3 * &z1 * &z1 + &(&s2 * &z2)));
        let add = &hb2 * &s2 * &z1 * 2.0;
        let mut zb1 = zbar.slice_mut(s![ch.first(dir), ..]);
        zb1 += &add;
        zbar.slice_mut(s![ch.second(i), ..]).assign(&(&s1 * &hb2));
    }
    zbar.slice_mut(s![ch.value(), ..]).assign(&zv);
    zbar
}
