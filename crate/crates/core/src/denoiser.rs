//! The trainable noise-prediction network.
//!
//! A two-hidden-layer MLP `eps_theta(x, t)`:
//!
//! ```text
//! input  = [x ; emb(t)]                  (d + E)
//! h1     = silu(W1 input + b1)           (H)
//! h2     = silu(W2 h1 + b2)              (H)
//! eps    = W3 h2 + b3                    (d)
//! ```
//!
//! `emb(t)` is a fixed sinusoidal embedding. All parameters live in one flat
//! `Vec<f64>` in the order `W1, b1, W2, b2, W3, b3`, matrices row-major.
//! Gradients are computed by replaying a [`Tape`] of recorded forward passes
//! together with the cotangent of the objective at each output.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::diffusion::{mean_from_eps, NoiseSchedule, Policy};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetShape {
    pub dim: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl NetShape {
    pub fn new(dim: usize, hidden: usize, embed: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "network dims must be positive (d={dim}, H={hidden})"
            )));
        }
        if embed % 2 != 0 {
            return Err(Error::Config(format!(
                "timestep embedding width must be even, got {embed}"
            )));
        }
        Ok(Self { dim, hidden, embed })
    }

    pub fn input_width(&self) -> usize {
        self.dim + self.embed
    }

    pub fn num_params(&self) -> usize {
        let (i, h, d) = (self.input_width(), self.hidden, self.dim);
        h * i + h + h * h + h + d * h + d
    }

    /// Offsets of `[W1, b1, W2, b2, W3, b3, end]` in the flat vector.
    fn offsets(&self) -> [usize; 7] {
        let (i, h, d) = (self.input_width(), self.hidden, self.dim);
        let sizes = [h * i, h, h * h, h, d * h, d];
        let mut out = [0; 7];
        for (k, s) in sizes.iter().enumerate() {
            out[k + 1] = out[k] + s;
        }
        out
    }

    /// `(rows, cols)` of the three weight matrices.
    pub fn layer_shapes(&self) -> [(usize, usize); 3] {
        [
            (self.hidden, self.input_width()),
            (self.hidden, self.hidden),
            (self.dim, self.hidden),
        ]
    }
}

/// Views into the flat parameter vector, one per weight or bias.
struct Layers<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    w3: &'a [f64],
    b3: &'a [f64],
}

struct LayersMut<'a> {
    w1: &'a mut [f64],
    b1: &'a mut [f64],
    w2: &'a mut [f64],
    b2: &'a mut [f64],
    w3: &'a mut [f64],
    b3: &'a mut [f64],
}

fn split<'a>(shape: &NetShape, data: &'a [f64]) -> Layers<'a> {
    let o = shape.offsets();
    Layers {
        w1: &data[o[0]..o[1]],
        b1: &data[o[1]..o[2]],
        w2: &data[o[2]..o[3]],
        b2: &data[o[3]..o[4]],
        w3: &data[o[4]..o[5]],
        b3: &data[o[5]..o[6]],
    }
}

fn split_mut<'a>(shape: &NetShape, data: &'a mut [f64]) -> LayersMut<'a> {
    let o = shape.offsets();
    let (w1, rest) = data.split_at_mut(o[1]);
    let (b1, rest) = rest.split_at_mut(o[2] - o[1]);
    let (w2, rest) = rest.split_at_mut(o[3] - o[2]);
    let (b2, rest) = rest.split_at_mut(o[4] - o[3]);
    let (w3, b3) = rest.split_at_mut(o[5] - o[4]);
    LayersMut {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    shape: NetShape,
    data: Vec<f64>,
}

/// Gradient of a scalar objective, laid out exactly like [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    shape: NetShape,
    data: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.num_params()],
        }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

impl DenoiserParams {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.num_params()],
        }
    }

    pub fn from_vec(shape: NetShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters for {:?}, got {}",
                shape.num_params(),
                shape,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite parameter value".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major weight matrix `layer` (0, 1 or 2) and its bias.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let l = split(&self.shape, &self.data);
        match layer {
            0 => (l.w1, l.b1),
            1 => (l.w2, l.b2),
            2 => (l.w3, l.b3),
            _ => panic!("layer index {layer} out of range"),
        }
    }
}

/// Weights `N(0, 1/fan_in)`, biases zero.
pub fn init_params(rng: &mut Stream, shape: NetShape) -> DenoiserParams {
    let mut params = DenoiserParams::zeros(shape);
    let fan_ins = [shape.input_width(), shape.hidden, shape.hidden];
    let l = split_mut(&shape, &mut params.data);
    for (w, fan_in) in [l.w1, l.w2, l.w3].into_iter().zip(fan_ins) {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
        w.iter_mut().for_each(|v| *v = dist.sample(rng));
    }
    params
}

/// Sinusoidal features `[sin(t f_k), cos(t f_k)]`, `f_k = 10000^(-k / (E/2))`.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// `out = W v + b` for a row-major `W` of shape `(b.len(), v.len())`.
fn affine(w: &[f64], b: &[f64], v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| {
            let row = &w[r * cols..(r + 1) * cols];
            bias + row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect()
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    shape: NetShape,
    input: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
}

fn check_input(shape: &NetShape, x: &[f64]) -> Result<()> {
    if x.len() != shape.dim {
        return Err(Error::Shape(format!(
            "network expects {}-dimensional input, got {}",
            shape.dim,
            x.len()
        )));
    }
    Ok(())
}

fn run(params: &DenoiserParams, x: &[f64], t: usize) -> (Vec<f64>, ForwardTrace) {
    let shape = params.shape;
    let l = split(&shape, &params.data);
    let mut input = Vec::with_capacity(shape.input_width());
    input.extend_from_slice(x);
    input.extend(timestep_embedding(t, shape.embed));
    let z1 = affine(l.w1, l.b1, &input);
    let h1: Vec<f64> = z1.iter().map(|&z| silu(z)).collect();
    let z2 = affine(l.w2, l.b2, &h1);
    let h2: Vec<f64> = z2.iter().map(|&z| silu(z)).collect();
    let out = affine(l.w3, l.b3, &h2);
    (
        out,
        ForwardTrace {
            shape,
            input,
            z1,
            h1,
            z2,
            h2,
        },
    )
}

/// Noise prediction `eps_theta(x, t)`.
pub fn forward(params: &DenoiserParams, x: &[f64], t: usize) -> Result<Vec<f64>> {
    check_input(&params.shape, x)?;
    Ok(run(params, x, t).0)
}

pub fn forward_traced(params: &DenoiserParams, x: &[f64], t: usize) -> Result<(Vec<f64>, ForwardTrace)> {
    check_input(&params.shape, x)?;
    Ok(run(params, x, t))
}

/// Accumulates `(d out / d theta)^T cotangent` for one recorded forward pass.
pub fn backward_into(
    params: &DenoiserParams,
    trace: &ForwardTrace,
    cotangent: &[f64],
    grad: &mut ParamGrad,
) -> Result<()> {
    let shape = params.shape;
    if trace.shape != shape || grad.shape != shape {
        return Err(Error::Consistency(format!(
            "params {:?}, trace {:?}, grad {:?}",
            shape, trace.shape, grad.shape
        )));
    }
    if cotangent.len() != shape.dim {
        return Err(Error::Shape(format!(
            "cotangent has {} entries, network output has {}",
            cotangent.len(),
            shape.dim
        )));
    }
    accumulate(params, trace, cotangent, &mut grad.data);
    Ok(())
}

fn accumulate(params: &DenoiserParams, trace: &ForwardTrace, cotangent: &[f64], grad: &mut [f64]) {
    let shape = params.shape;
    let l = split(&shape, &params.data);
    let g = split_mut(&shape, grad);
    let (h, iw) = (shape.hidden, shape.input_width());

    // output layer
    let mut dh2 = vec![0.0; h];
    for (r, &go) in cotangent.iter().enumerate() {
        g.b3[r] += go;
        let row = r * h;
        for c in 0..h {
            g.w3[row + c] += go * trace.h2[c];
            dh2[c] += l.w3[row + c] * go;
        }
    }

    let dz2: Vec<f64> = dh2.iter().zip(&trace.z2).map(|(d, &z)| d * silu_grad(z)).collect();
    let mut dh1 = vec![0.0; h];
    for (r, &gz) in dz2.iter().enumerate() {
        g.b2[r] += gz;
        let row = r * h;
        for c in 0..h {
            g.w2[row + c] += gz * trace.h1[c];
            dh1[c] += l.w2[row + c] * gz;
        }
    }

    for (r, (&d, &z)) in dh1.iter().zip(&trace.z1).enumerate() {
        let gz = d * silu_grad(z);
        g.b1[r] += gz;
        let row = r * iw;
        for c in 0..iw {
            g.w1[row + c] += gz * trace.input[c];
        }
    }
}

/// A recorded scalar objective: forward passes paired with the derivative
/// of the objective with respect to each pass's output.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    entries: Vec<(ForwardTrace, Vec<f64>)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trace: ForwardTrace, cotangent: Vec<f64>) {
        self.entries.push((trace, cotangent));
    }

    /// Tape of the sum of both objectives.
    pub fn append(&mut self, other: Tape) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Exact gradient of the objective recorded in `tape`.
pub fn backward(params: &DenoiserParams, tape: &Tape) -> Result<ParamGrad> {
    let mut grad = ParamGrad::zeros(params.shape);
    for (trace, cot) in &tape.entries {
        backward_into(params, trace, cot, &mut grad)?;
    }
    Ok(grad)
}

impl Policy for DenoiserParams {
    fn dim(&self) -> usize {
        self.shape.dim
    }

    fn params(&self) -> &[f64] {
        &self.data
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn mean(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
        let (eps, _) = run(self, x_t, t);
        mean_from_eps(x_t, &eps, t, schedule)
    }

    fn mean_backward(
        &self,
        x_t: &[f64],
        t: usize,
        schedule: &NoiseSchedule,
        grad: &mut [f64],
        upstream: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let (eps, trace) = run(self, x_t, t);
        let mean = mean_from_eps(x_t, &eps, t, schedule);
        // d mu / d eps = -c_t / sqrt(alpha_t) on the diagonal
        let k = -schedule.eps_coef(t) / schedule.alpha(t).sqrt();
        let cot: Vec<f64> = upstream(&mean).into_iter().map(|g| g * k).collect();
        accumulate(self, &trace, &cot, grad);
        mean
    }
}

/// Reverse-step mean of the denoiser at `(x_t, t)`.
pub fn reverse_mean(
    params: &DenoiserParams,
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_input(&params.shape, x_t)?;
    if !(1..=schedule.steps()).contains(&t) {
        return Err(Error::Domain(format!("step {t} outside 1..={}", schedule.steps())));
    }
    Ok(params.mean(x_t, t, schedule))
}

// Checkpoint layout, all integers and floats little-endian:
//
//   bytes 0..8    magic  b"DDPOCKPT"
//   u32           format version (1)
//   u32           d
//   u32           H
//   u32           E (embedding width)
//   3 x (u32,u32) weight shapes (rows, cols) of W1, W2, W3
//   u64           parameter count
//   f64 * count   parameters in flat order W1 b1 W2 b2 W3 b3, row-major
const MAGIC: &[u8; 8] = b"DDPOCKPT";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &DenoiserParams) -> Vec<u8> {
    let s = params.shape;
    let mut out = Vec::with_capacity(64 + 8 * params.data.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, s.dim as u32, s.hidden as u32, s.embed as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (r, c) in s.layer_shapes() {
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for v in &params.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<DenoiserParams> {
    let bad = |detail: &str| Error::format(origin, detail);
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated checkpoint"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(bad("not a denoiser checkpoint (bad magic)"));
    }
    let mut u32s = [0u32; 10];
    for v in u32s.iter_mut() {
        *v = u32::from_le_bytes(take(4)?.try_into().unwrap());
    }
    if u32s[0] != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {}", u32s[0])));
    }
    let shape = NetShape::new(u32s[1] as usize, u32s[2] as usize, u32s[3] as usize)
        .map_err(|e| bad(&e.to_string()))?;
    for (k, (r, c)) in shape.layer_shapes().into_iter().enumerate() {
        if (u32s[4 + 2 * k] as usize, u32s[5 + 2 * k] as usize) != (r, c) {
            return Err(bad(&format!("layer {k} shape disagrees with header dims")));
        }
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count != shape.num_params() {
        return Err(bad(&format!(
            "parameter count {count} does not match shape ({} expected)",
            shape.num_params()
        )));
    }
    let data = (0..count)
        .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
        .collect::<Result<Vec<_>>>()?;
    if !cur.is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    DenoiserParams::from_vec(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn save_checkpoint(params: &DenoiserParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
