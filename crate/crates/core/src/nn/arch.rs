use serde::{Deserialize, Serialize};

use crate::robots::RobotModel;
use crate::{Error, Result, Violation, Visibility};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModuleSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Relu,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}

impl ModuleSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        ModuleSpec::Linear { in_features, out_features, bias: true }
    }

    pub fn conv1d(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize) -> Self {
        ModuleSpec::Conv1d { in_channels, out_channels, kernel_size, stride }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ModuleSpec::Linear { .. } => "linear",
            ModuleSpec::Conv1d { .. } => "conv1d",
            ModuleSpec::Relu => "relu",
        }
    }
}

/// A user-authored network: an ordered list of modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkArchitectureSpec {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub visibility: Visibility,
    pub modules: Vec<ModuleSpec>,
}

impl NetworkArchitectureSpec {
    pub fn new(modules: Vec<ModuleSpec>) -> Self {
        Self {
            id: String::new(),
            name: String::new(),
            visibility: Visibility::Private,
            modules,
        }
    }

    /// The common `[linear(in→hidden), relu, linear(hidden→out)]` network.
    pub fn mlp(input: usize, hidden: usize, output: usize) -> Self {
        Self::new(vec![
            ModuleSpec::linear(input, hidden),
            ModuleSpec::Relu,
            ModuleSpec::linear(hidden, output),
        ])
    }

    /// Accepts either a full document or a bare JSON list of modules.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Doc {
            Full(NetworkArchitectureSpec),
            Bare(Vec<ModuleSpec>),
        }
        match serde_json::from_str::<Doc>(text) {
            Ok(Doc::Full(s)) => Ok(s),
            Ok(Doc::Bare(m)) => Ok(Self::new(m)),
            Err(_) => {
                // re-parse as the full form for a useful error message
                serde_json::from_str::<NetworkArchitectureSpec>(text).map_err(|e| Error::Parse {
                    what: "network architecture".into(),
                    reason: e.to_string(),
                })
            }
        }
    }
}

/// The tensor shape flowing between modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Signal { channels: usize, length: usize },
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Signal { channels, length } => channels * length,
        }
    }

    /// Convolutions see a flat vector as a single-channel signal.
    fn as_signal(&self) -> (usize, usize) {
        match *self {
            Shape::Flat(n) => (1, n),
            Shape::Signal { channels, length } => (channels, length),
        }
    }
}

fn violation(index: usize, field: &str, reason: String) -> Violation {
    Violation {
        path: format!("modules[{index}].{field}"),
        reason,
        module_index: Some(index),
    }
}

/// Propagates shapes from `input_dim`; returns the output shape of every
/// module, or the first mismatch.
pub fn propagate_shapes(modules: &[ModuleSpec], input_dim: usize) -> std::result::Result<Vec<Shape>, Violation> {
    if modules.is_empty() {
        return Err(Violation::new("modules", "architecture needs at least one module"));
    }
    let mut shape = Shape::Flat(input_dim);
    let mut out = Vec::with_capacity(modules.len());
    for (i, m) in modules.iter().enumerate() {
        shape = match *m {
            ModuleSpec::Linear { in_features, out_features, .. } => {
                if out_features == 0 {
                    return Err(violation(i, "out_features", "must be >= 1".into()));
                }
                if in_features != shape.numel() {
                    return Err(violation(
                        i,
                        "in_features",
                        format!("in_features {in_features} does not match incoming size {}", shape.numel()),
                    ));
                }
                Shape::Flat(out_features)
            }
            ModuleSpec::Conv1d { in_channels, out_channels, kernel_size, stride } => {
                if out_channels == 0 {
                    return Err(violation(i, "out_channels", "must be >= 1".into()));
                }
                if kernel_size == 0 {
                    return Err(violation(i, "kernel_size", "must be >= 1".into()));
                }
                if stride == 0 {
                    return Err(violation(i, "stride", "must be >= 1".into()));
                }
                let (channels, length) = shape.as_signal();
                if in_channels != channels {
                    return Err(violation(
                        i,
                        "in_channels",
                        format!("in_channels {in_channels} does not match incoming channels {channels}"),
                    ));
                }
                if kernel_size > length {
                    return Err(violation(
                        i,
                        "kernel_size",
                        format!("kernel_size {kernel_size} exceeds signal length {length}"),
                    ));
                }
                Shape::Signal {
                    channels: out_channels,
                    length: (length - kernel_size) / stride + 1,
                }
            }
            ModuleSpec::Relu => shape,
        };
        out.push(shape);
    }
    Ok(out)
}

/// Checks that the network consumes the robot's observation and produces
/// its action vector. Returns the first violation found (empty when valid).
pub fn validate_architecture(spec: &NetworkArchitectureSpec, robot: &RobotModel) -> Vec<Violation> {
    validate_dims(spec, robot.obs_dim, robot.action_dim)
}

pub fn validate_dims(spec: &NetworkArchitectureSpec, input_dim: usize, output_dim: usize) -> Vec<Violation> {
    match propagate_shapes(&spec.modules, input_dim) {
        Err(v) => vec![v],
        Ok(shapes) => {
            let last = shapes.len() - 1;
            let n = shapes[last].numel();
            if n != output_dim {
                let field = match spec.modules[last] {
                    ModuleSpec::Linear { .. } => "out_features",
                    ModuleSpec::Conv1d { .. } => "out_channels",
                    ModuleSpec::Relu => "type",
                };
                vec![violation(
                    last,
                    field,
                    format!("network output size {n} does not match action size {output_dim}"),
                )]
            } else {
                Vec::new()
            }
        }
    }
}

/// Robot-independent checks: field sanity and every linear→linear link that
/// can be resolved without knowing the input size.
pub fn validate_structure(spec: &NetworkArchitectureSpec) -> Vec<Violation> {
    let modules = &spec.modules;
    if modules.is_empty() {
        return vec![Violation::new("modules", "architecture needs at least one module")];
    }
    let input = match modules[0] {
        ModuleSpec::Linear { in_features, .. } => Some(in_features),
        _ => None,
    };
    match input {
        Some(n) => propagate_shapes(modules, n).err().into_iter().collect(),
        None => {
            // conv-first: only per-field positivity can be checked
            for (i, m) in modules.iter().enumerate() {
                if let ModuleSpec::Conv1d { in_channels, out_channels, kernel_size, stride } = *m {
                    for (field, v) in [
                        ("in_channels", in_channels),
                        ("out_channels", out_channels),
                        ("kernel_size", kernel_size),
                        ("stride", stride),
                    ] {
                        if v == 0 {
                            return vec![violation(i, field, "must be >= 1".into())];
                        }
                    }
                }
            }
            Vec::new()
        }
    }
}
