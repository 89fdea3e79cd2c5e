//! Fully connected denoiser with SiLU activations and hand-written backprop.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const EMBED_DIM: usize = 32;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of the diffusion step.
pub fn step_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = k as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Weights are stored `in x out` so a batch forward is `x.dot(w) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Activations kept from a forward pass.
pub struct Cache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`. Hidden layers use a scaled normal
    /// init; the output layer starts small.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let scale = if l + 1 == layers { 0.1 } else { 1.0 } / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| scale * rng.sample::<f64, _>(StandardNormal)));
            biases.push(Array1::zeros(fan_out));
        }
        Self { weights, biases }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].nrows()];
        s.extend(self.weights.iter().map(|w| w.ncols()));
        s
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Parameters in layer order, each weight matrix row-major followed by its bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn from_flat(sizes: &[usize], params: &[f64]) -> Option<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut at = 0;
        for l in 0..sizes.len().checked_sub(1)? {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let w = params.get(at..at + i * o)?;
            at += i * o;
            let b = params.get(at..at + o)?;
            at += o;
            weights.push(Array2::from_shape_vec((i, o), w.to_vec()).ok()?);
            biases.push(Array1::from_vec(b.to_vec()));
        }
        (at == params.len() && !weights.is_empty()).then_some(Self { weights, biases })
    }

    /// Visits every parameter together with the matching gradient entry.
    pub fn for_each_param(&mut self, grads: &Grads, mut f: impl FnMut(usize, &mut f64, f64)) {
        let mut idx = 0;
        for l in 0..self.weights.len() {
            for (p, g) in self.weights[l].iter_mut().zip(grads.weights[l].iter()) {
                f(idx, p, *g);
                idx += 1;
            }
            for (p, g) in self.biases[l].iter_mut().zip(grads.biases[l].iter()) {
                f(idx, p, *g);
                idx += 1;
            }
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.weights.len() - 1;
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, Cache) {
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(w);
            z += b;
            inputs.push(h);
            if l < last {
                h = z.mapv(silu);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, Cache { inputs, pre })
    }

    /// Gradients of a scalar loss given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &Cache, d_out: Array2<f64>) -> Grads {
        let n = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        let mut dz = d_out;
        for l in (0..n).rev() {
            gw[l] = cache.inputs[l].t().dot(&dz);
            gb[l] = dz.sum_axis(Axis(0));
            if l > 0 {
                let mut dh = dz.dot(&self.weights[l].t());
                dh.zip_mut_with(&cache.pre[l - 1], |d, &z| *d *= silu_grad(z));
                dz = dh;
            }
        }
        Grads { weights: gw, biases: gb }
    }
}

/// Layout of the denoiser input: `[noisy chunk | observation | step embedding]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub chunk_dim: usize,
    pub obs_dim: usize,
    pub embed_dim: usize,
}

impl DenoiserShape {
    pub fn input_dim(&self) -> usize {
        self.chunk_dim + self.obs_dim + self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub shape: DenoiserShape,
    pub mlp: Mlp,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(shape: DenoiserShape, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![shape.input_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(shape.chunk_dim);
        Self { shape, mlp: Mlp::new(&sizes, rng) }
    }

    /// Stacks one input row per sample.
    pub fn build_input(&self, xk: ArrayView2<f64>, obs: ArrayView2<f64>, ks: &[usize]) -> Array2<f64> {
        let sh = self.shape;
        let b = xk.nrows();
        let mut x = Array2::zeros((b, sh.input_dim()));
        x.slice_mut(s![.., ..sh.chunk_dim]).assign(&xk);
        x.slice_mut(s![.., sh.chunk_dim..sh.chunk_dim + sh.obs_dim]).assign(&obs);
        for (i, &k) in ks.iter().enumerate() {
            let e = step_embedding(k, sh.embed_dim);
            x.slice_mut(s![i, sh.chunk_dim + sh.obs_dim..]).assign(&Array1::from_vec(e));
        }
        x
    }

    /// Predicted noise for a batch.
    pub fn predict(&self, xk: ArrayView2<f64>, obs: ArrayView2<f64>, ks: &[usize]) -> Array2<f64> {
        self.mlp.forward(self.build_input(xk, obs, ks).view())
    }
}
