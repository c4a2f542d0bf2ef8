//! Running observation standardisation used as a reparametrisation of the
//! first linear layer.
//!
//! The network always acts on raw observations. Writing its first layer as
//! `W = V / s` and `b = c − V·(m / s)` for standardisation statistics `(m, s)`
//! makes `(V, c)` the weights a network on standardised inputs would have.
//! Gradients are mapped into that space, the optimiser step is taken there,
//! and the step is mapped back. A zero step leaves the raw parameters
//! untouched, and updating the statistics does not change the network.

use crate::nn::{ModuleSpec, NetworkArchitectureSpec};

pub const MIN_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Off,
    ScaleOnly,
    Full,
}

#[derive(Debug, Clone)]
pub struct ObsNormalizer {
    mode: Mode,
    inputs: usize,
    outputs: usize,
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    gain: Vec<f64>,
}

impl ObsNormalizer {
    /// Active only when the network starts with a linear layer; centring also
    /// needs that layer to have a bias.
    pub fn for_network(spec: &NetworkArchitectureSpec, input_dim: usize) -> Self {
        let (mode, outputs) = match spec.modules.first() {
            Some(&ModuleSpec::Linear { bias: true, out_features, .. }) => (Mode::Full, out_features),
            Some(&ModuleSpec::Linear { bias: false, out_features, .. }) => (Mode::ScaleOnly, out_features),
            _ => (Mode::Off, 0),
        };
        Self {
            mode,
            inputs: input_dim,
            outputs,
            count: 0.0,
            mean: vec![0.0; input_dim],
            m2: vec![0.0; input_dim],
            gain: vec![1.0; input_dim],
        }
    }

    /// Scales the standardised features in `range` by `gain`.
    pub fn with_gain(mut self, range: std::ops::Range<usize>, gain: f64) -> Self {
        for g in &mut self.gain[range] {
            *g = gain;
        }
        self
    }

    pub fn is_active(&self) -> bool {
        self.mode != Mode::Off
    }

    pub fn update(&mut self, obs: &[f64]) {
        if self.mode == Mode::Off {
            return;
        }
        self.count += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(obs) {
            let d = x - *m;
            *m += d / self.count;
            *s += d * (x - *m);
        }
    }

    /// `(m, s)` for feature `i`: standardised value is `(x − m) / s`.
    pub fn shift_scale(&self, i: usize) -> (f64, f64) {
        if self.count < 2.0 {
            return (0.0, 1.0 / self.gain[i]);
        }
        let std = (self.m2[i] / self.count).sqrt().max(MIN_STD);
        let shift = if self.mode == Mode::Full { self.mean[i] } else { 0.0 };
        (shift, std / self.gain[i])
    }

    /// Standardised copy of `obs` (identity when inactive).
    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        if self.mode == Mode::Off {
            return obs.to_vec();
        }
        obs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let (m, s) = self.shift_scale(i);
                (x - m) / s
            })
            .collect()
    }

    fn split<'a>(&self, v: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        let (w, rest) = v.split_at_mut(self.inputs * self.outputs);
        let b = if self.mode == Mode::Full { &mut rest[..self.outputs] } else { &mut rest[..0] };
        (w, b)
    }

    /// Turns a gradient in raw parameters into one in standardised parameters.
    pub fn grad_to_standardised(&self, grad: &mut [f64]) {
        if self.mode == Mode::Off {
            return;
        }
        let ms: Vec<(f64, f64)> = (0..self.inputs).map(|i| self.shift_scale(i)).collect();
        let (w, b) = self.split(grad);
        for o in 0..self.outputs {
            let gb = b.get(o).copied().unwrap_or(0.0);
            for (gw, &(m, s)) in w[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(&ms) {
                *gw = (*gw - gb * m) / s;
            }
        }
    }

    /// Turns a step in standardised parameters into one in raw parameters.
    pub fn step_to_raw(&self, step: &mut [f64]) {
        if self.mode == Mode::Off {
            return;
        }
        let ms: Vec<(f64, f64)> = (0..self.inputs).map(|i| self.shift_scale(i)).collect();
        let (w, b) = self.split(step);
        for o in 0..self.outputs {
            let mut offset = 0.0;
            for (dw, &(m, s)) in w[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(&ms) {
                *dw /= s;
                offset += *dw * m;
            }
            if let Some(db) = b.get_mut(o) {
                *db -= offset;
            }
        }
    }
}
