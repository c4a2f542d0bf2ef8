use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{propagate_shapes, ModuleSpec, NetworkArchitectureSpec, Shape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Linear {
        inputs: usize,
        outputs: usize,
        weights: usize,
        bias: Option<usize>,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_len: usize,
        out_len: usize,
        weights: usize,
        bias: usize,
    },
    Relu,
}

impl Op {
    fn fan_in(&self) -> usize {
        match *self {
            Op::Linear { inputs, .. } => inputs,
            Op::Conv { in_channels, kernel, .. } => in_channels * kernel,
            Op::Relu => 0,
        }
    }
}

/// Inputs seen by each module during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
}

impl Tape {
    /// The input of module `i` is `inputs()[i]`.
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// A network with concrete parameters stored in one flat vector.
///
/// Linear weights are `[out][in]` row-major followed by the bias; conv weights
/// are `[out_channel][in_channel][tap]` followed by one bias per output
/// channel. Signals are stored channel-major, which is also the order of the
/// implicit flatten before a linear layer.
#[derive(Debug, Clone)]
pub struct NetworkInstance {
    spec: NetworkArchitectureSpec,
    input_dim: usize,
    output_dim: usize,
    ops: Vec<Op>,
    params: Vec<f64>,
    tape: Option<Tape>,
}

impl PartialEq for NetworkInstance {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.input_dim == other.input_dim && self.params == other.params
    }
}

impl NetworkInstance {
    /// Builds the network with seeded uniform `±1/sqrt(fan_in)` initialisation.
    pub fn new(spec: NetworkArchitectureSpec, input_dim: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec, input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in &net.ops {
            let bound = 1.0 / (op.fan_in() as f64).sqrt();
            let range = match *op {
                Op::Linear { weights, outputs, inputs, bias } => {
                    weights..weights + outputs * inputs + bias.map_or(0, |_| outputs)
                }
                Op::Conv { weights, out_channels, in_channels, kernel, .. } => {
                    weights..weights + out_channels * in_channels * kernel + out_channels
                }
                Op::Relu => continue,
            };
            for p in &mut net.params[range] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Builds the network with every parameter zero.
    pub fn zeros(spec: NetworkArchitectureSpec, input_dim: usize) -> Result<Self> {
        let shapes = propagate_shapes(&spec.modules, input_dim).map_err(|v| Error::Architecture(v.to_string()))?;
        let mut ops = Vec::with_capacity(spec.modules.len());
        let mut offset = 0usize;
        let mut incoming = Shape::Flat(input_dim);
        for (m, &out_shape) in spec.modules.iter().zip(&shapes) {
            let op = match *m {
                ModuleSpec::Linear { in_features, out_features, bias } => {
                    let weights = offset;
                    offset += in_features * out_features;
                    let b = bias.then(|| {
                        let b = offset;
                        offset += out_features;
                        b
                    });
                    Op::Linear { inputs: in_features, outputs: out_features, weights, bias: b }
                }
                ModuleSpec::Conv1d { in_channels, out_channels, kernel_size, stride } => {
                    let in_len = incoming.numel() / in_channels;
                    let Shape::Signal { length: out_len, .. } = out_shape else {
                        unreachable!("conv output is a signal")
                    };
                    let weights = offset;
                    offset += out_channels * in_channels * kernel_size;
                    let bias = offset;
                    offset += out_channels;
                    Op::Conv {
                        in_channels,
                        out_channels,
                        kernel: kernel_size,
                        stride,
                        in_len,
                        out_len,
                        weights,
                        bias,
                    }
                }
                ModuleSpec::Relu => Op::Relu,
            };
            ops.push(op);
            incoming = out_shape;
        }
        Ok(Self {
            output_dim: incoming.numel(),
            spec,
            input_dim,
            ops,
            params: vec![0.0; offset],
            tape: None,
        })
    }

    /// Replaces the parameters; the length must match `param_count`.
    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), actual: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        self.params = params;
        Ok(self)
    }

    pub fn spec(&self) -> &NetworkArchitectureSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Forward pass that records a tape for a later [`backward`](Self::backward).
    pub fn forward(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let (y, tape) = self.forward_tape(x)?;
        self.tape = Some(tape);
        Ok(y)
    }

    /// Gradients of `upstream · output` with respect to parameters and input,
    /// using the tape of the last [`forward`](Self::forward).
    pub fn backward(&self, upstream: &[f64]) -> Result<Gradients> {
        let tape = self.tape.as_ref().ok_or(Error::NoForwardCache)?;
        self.backward_tape(tape, upstream)
    }

    /// Forward pass without recording.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for op in &self.ops {
            cur = self.apply(op, &cur);
        }
        Ok(cur)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut cur = x.to_vec();
        for op in &self.ops {
            let next = self.apply(op, &cur);
            inputs.push(cur);
            cur = next;
        }
        Ok((cur, Tape { inputs }))
    }

    pub fn backward_tape(&self, tape: &Tape, upstream: &[f64]) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_into(tape, upstream, &mut params, true)?;
        Ok(Gradients { params, input: input.unwrap_or_default() })
    }

    /// Accumulates parameter gradients into `grad` (which must have
    /// `param_count` entries). Returns the input gradient when requested.
    pub fn backward_into(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        if upstream.len() != self.output_dim {
            return Err(Error::DimensionMismatch { expected: self.output_dim, actual: upstream.len() });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), actual: grad.len() });
        }
        let mut g = upstream.to_vec();
        for (i, op) in self.ops.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            let need_dx = want_input || i > 0;
            g = self.back(op, x, &g, grad, need_dx);
        }
        Ok(want_input.then_some(g))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, actual: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn apply(&self, op: &Op, x: &[f64]) -> Vec<f64> {
        let p = &self.params;
        match *op {
            Op::Linear { inputs, outputs, weights, bias } => (0..outputs)
                .map(|o| {
                    let row = &p[weights + o * inputs..weights + (o + 1) * inputs];
                    let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                    dot + bias.map_or(0.0, |b| p[b + o])
                })
                .collect(),
            Op::Conv { in_channels, out_channels, kernel, stride, in_len, out_len, weights, bias } => {
                let mut y = vec![0.0; out_channels * out_len];
                for oc in 0..out_channels {
                    for t in 0..out_len {
                        let mut acc = p[bias + oc];
                        for c in 0..in_channels {
                            let w = &p[weights + (oc * in_channels + c) * kernel..][..kernel];
                            let xs = &x[c * in_len + t * stride..][..kernel];
                            acc += w.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        }
                        y[oc * out_len + t] = acc;
                    }
                }
                y
            }
            Op::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    fn back(&self, op: &Op, x: &[f64], g: &[f64], grad: &mut [f64], need_dx: bool) -> Vec<f64> {
        let p = &self.params;
        match *op {
            Op::Linear { inputs, outputs, weights, bias } => {
                for o in 0..outputs {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &mut grad[weights + o * inputs..weights + (o + 1) * inputs];
                    for (gw, xv) in row.iter_mut().zip(x) {
                        *gw += go * xv;
                    }
                    if let Some(b) = bias {
                        grad[b + o] += go;
                    }
                }
                if !need_dx {
                    return Vec::new();
                }
                let mut dx = vec![0.0; inputs];
                for o in 0..outputs {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &p[weights + o * inputs..weights + (o + 1) * inputs];
                    for (d, w) in dx.iter_mut().zip(row) {
                        *d += go * w;
                    }
                }
                dx
            }
            Op::Conv { in_channels, out_channels, kernel, stride, in_len, out_len, weights, bias } => {
                let mut dx = if need_dx { vec![0.0; in_channels * in_len] } else { Vec::new() };
                for oc in 0..out_channels {
                    for t in 0..out_len {
                        let go = g[oc * out_len + t];
                        if go == 0.0 {
                            continue;
                        }
                        grad[bias + oc] += go;
                        for c in 0..in_channels {
                            let w0 = weights + (oc * in_channels + c) * kernel;
                            let x0 = c * in_len + t * stride;
                            for j in 0..kernel {
                                grad[w0 + j] += go * x[x0 + j];
                                if need_dx {
                                    dx[x0 + j] += go * p[w0 + j];
                                }
                            }
                        }
                    }
                }
                dx
            }
            Op::Relu => x.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect(),
        }
    }
}
