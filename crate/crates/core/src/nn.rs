//! A small fully-connected network `v_θ(x, t)` with hand-written reverse-mode
//! gradients, Adam/AdamW and an EMA shadow of the parameters.
//!
//! Parameters are one flat vector. Layer `l` stores its weight matrix
//! (`out × in`, row-major) followed by its bias. Time enters as one extra
//! input coordinate after `x`. Hidden layers use the configured activation;
//! the output layer is linear.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::integrators::VectorField;
use crate::rng;

const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (z.exp() - 1.0)
                }
            }
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Data dimension `d`; the network input has `d + 1` coordinates.
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(data_dim: usize, hidden: Vec<usize>, activation: Activation) -> Result<Self> {
        if data_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidParameter("layer widths must be >= 1".into()));
        }
        Ok(Self { data_dim, hidden, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 1
    }

    pub fn output_dim(&self) -> usize {
        self.data_dim
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.input_dim());
        s.extend_from_slice(&self.hidden);
        s.push(self.output_dim());
        s
    }

    pub fn num_params(&self) -> usize {
        self.sizes().windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Uniform fan-in initialization: `±√(6/fan_in)` for ReLU (He) and
    /// `±√(3/fan_in)` for SELU (unit variance); biases start at zero.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        let mut p = Vec::with_capacity(self.num_params());
        for w in self.sizes().windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let gain = match self.activation {
                Activation::Relu => 6.0,
                Activation::Selu => 3.0,
            };
            let bound = (gain / fan_in as f64).sqrt();
            for _ in 0..out * fan_in {
                p.push(bound * (2.0 * rng::uniform(&mut r) - 1.0));
            }
            p.extend(std::iter::repeat_n(0.0, out));
        }
        p
    }

    fn check(&self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())
    }
}

/// Network output at one point.
pub fn forward(spec: &MlpSpec, params: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    spec.check(params)?;
    check_dim(spec.data_dim, x.len())?;
    let mut input = Vec::with_capacity(spec.input_dim());
    input.extend_from_slice(x);
    input.push(t);
    let sizes = spec.sizes();
    let mut a = input;
    let mut off = 0;
    let last = sizes.len() - 2;
    for (l, w) in sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let (wm, rest) = params[off..].split_at(n_in * n_out);
        let b = &rest[..n_out];
        off += n_in * n_out + n_out;
        let mut z: Vec<f64> = (0..n_out).map(|j| b[j] + dot(&wm[j * n_in..(j + 1) * n_in], &a)).collect();
        if l < last {
            z.iter_mut().for_each(|v| *v = spec.activation.apply(*v));
        }
        a = z;
    }
    Ok(a)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A minibatch of inputs `(x_i, t_i)` with regression targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub xs: &'a [f64],
    pub ts: &'a [f64],
    pub targets: &'a [f64],
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

// Samples per parallel task; reductions over chunks run in a fixed order so
// results do not depend on the thread count.
const CHUNK: usize = 16;

/// Mean squared error (over batch and output coordinates) and its exact gradient.
pub fn loss_and_grad(spec: &MlpSpec, params: &[f64], batch: Batch<'_>) -> Result<(f64, Vec<f64>)> {
    spec.check(params)?;
    let d = spec.data_dim;
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    check_dim(n * d, batch.xs.len())?;
    check_dim(n * d, batch.targets.len())?;
    let sizes = spec.sizes();
    let scale = 2.0 / (n * d) as f64;
    let parts: Vec<(f64, Vec<f64>)> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut g = vec![0.0; params.len()];
            let mut sse = 0.0;
            let mut ws = Workspace::new(&sizes);
            for &i in idx {
                sse += backprop_one(
                    spec,
                    &sizes,
                    params,
                    &batch.xs[i * d..(i + 1) * d],
                    batch.ts[i],
                    &batch.targets[i * d..(i + 1) * d],
                    scale,
                    &mut ws,
                    &mut g,
                );
            }
            (sse, g)
        })
        .collect();
    let mut grad = vec![0.0; params.len()];
    let mut sse = 0.0;
    for (s, g) in parts {
        sse += s;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let loss = sse / (n * d) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad))
}

struct Workspace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    fn new(sizes: &[usize]) -> Self {
        let max = *sizes.iter().max().unwrap_or(&1);
        Self {
            pre: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            act: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            delta: vec![0.0; max],
            next: vec![0.0; max],
        }
    }
}

/// Adds `scale · ∂(½Σ(out − target)²)/∂θ` into `g`; returns the squared error sum.
#[allow(clippy::too_many_arguments)]
fn backprop_one(
    spec: &MlpSpec,
    sizes: &[usize],
    params: &[f64],
    x: &[f64],
    t: f64,
    target: &[f64],
    scale: f64,
    ws: &mut Workspace,
    g: &mut [f64],
) -> f64 {
    let layers = sizes.len() - 1;
    ws.act[0][..x.len()].copy_from_slice(x);
    ws.act[0][x.len()] = t;
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for l in 0..layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        offsets.push(off);
        let wm = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let (done, todo) = ws.act.split_at_mut(l + 1);
        let a_in = &done[l];
        for j in 0..n_out {
            let z = b[j] + dot(&wm[j * n_in..(j + 1) * n_in], a_in);
            ws.pre[l + 1][j] = z;
            todo[0][j] = if l + 1 < layers { spec.activation.apply(z) } else { z };
        }
    }
    let out = &ws.act[layers];
    let mut sse = 0.0;
    for j in 0..sizes[layers] {
        let r = out[j] - target[j];
        sse += r * r;
        ws.delta[j] = scale * r;
    }
    for l in (0..layers).rev() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let off = offsets[l];
        let a_in = &ws.act[l];
        {
            let (gw, gb) = g[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for j in 0..n_out {
                let dj = ws.delta[j];
                if dj == 0.0 {
                    continue;
                }
                gb[j] += dj;
                for (gk, ak) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(a_in) {
                    *gk += dj * ak;
                }
            }
        }
        if l == 0 {
            break;
        }
        let wm = &params[off..off + n_in * n_out];
        for k in 0..n_in {
            let mut s = 0.0;
            for j in 0..n_out {
                s += wm[j * n_in + k] * ws.delta[j];
            }
            ws.next[k] = s * spec.activation.derivative(ws.pre[l][k]);
        }
        std::mem::swap(&mut ws.delta, &mut ws.next);
    }
    sse
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled weight decay (AdamW) instead of an L2 term in the gradient.
    pub decoupled: bool,
    pub ema_rate: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decoupled: false, ema_rate: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub shadow: Vec<f64>,
    pub step: u64,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: Vec<f64>, optim: OptimConfig, seed: u64) -> Self {
        let n = params.len();
        Self { shadow: params.clone(), params, m: vec![0.0; n], v: vec![0.0; n], step: 0, optim, seed }
    }

    /// One Adam (or AdamW) step with bias correction.
    pub fn optimizer_step(&mut self, grad: &[f64]) -> Result<()> {
        check_dim(self.params.len(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let o = self.optim;
        self.step += 1;
        let bc1 = 1.0 - o.beta1.powi(self.step as i32);
        let bc2 = 1.0 - o.beta2.powi(self.step as i32);
        for i in 0..self.params.len() {
            let mut g = grad[i];
            if o.weight_decay != 0.0 {
                if o.decoupled {
                    self.params[i] -= o.lr * o.weight_decay * self.params[i];
                } else {
                    g += o.weight_decay * self.params[i];
                }
            }
            self.m[i] = o.beta1 * self.m[i] + (1.0 - o.beta1) * g;
            self.v[i] = o.beta2 * self.v[i] + (1.0 - o.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            self.params[i] -= o.lr * mh / (vh.sqrt() + o.eps);
        }
        Ok(())
    }

    /// `shadow ← rate·shadow + (1 − rate)·params`.
    pub fn ema_update(&mut self) {
        let r = self.optim.ema_rate;
        for (s, p) in self.shadow.iter_mut().zip(&self.params) {
            *s = r * *s + (1.0 - r) * p;
        }
    }
}

/// A network with frozen parameters, usable as a [`VectorField`].
#[derive(Debug, Clone, Copy)]
pub struct MlpField<'a> {
    pub spec: &'a MlpSpec,
    pub params: &'a [f64],
}

impl VectorField for MlpField<'_> {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let v = forward(self.spec, self.params, x, t)?;
        out.copy_from_slice(&v);
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"EXFMCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: MlpSpec,
    pub step: u64,
    pub seed: u64,
    pub num_params: usize,
}

/// Magic, little-endian u64 header length, JSON header, then the parameters
/// as little-endian f64.
pub fn save_checkpoint(path: impl AsRef<Path>, spec: &MlpSpec, params: &[f64], step: u64, seed: u64) -> Result<()> {
    spec.check(params)?;
    let header = CheckpointHeader { spec: spec.clone(), step, seed, num_params: params.len() };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Parse { line: 0, msg: format!("checkpoint: {m}") };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data = &bytes[16 + hlen..];
    if data.len() != 8 * header.num_params || header.num_params != header.spec.num_params() {
        return Err(bad("parameter count does not match header"));
    }
    let params = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, params))
}
