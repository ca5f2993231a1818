//! Tiny comparable architectures: a depthwise-separable baseline, the same
//! network with DCLS depthwise convolutions, and StarReLU variants.

mod build;
mod checkpoint;
mod fixtures;
mod train;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcls::KernelGeometry;
use crate::tensor::{ConvGeometry, Tape, Tensor, TensorError, Var};

pub use build::{build, Arch, PositionInit, TrainConfig};
pub use checkpoint::{load, read_params, save, sidecar_path, write_params, Sidecar, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fixtures::{cancellation_image, cancellation_model};
pub use train::{predict, top1, EpochStats, Example, StepStats, TrainLog, Trainer};

#[derive(Debug, Error)]
pub enum ZooError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("sidecar json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model layout: {0}")]
    Layout(String),
    #[error("unknown architecture {0:?}")]
    UnknownArch(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = ZooError> = std::result::Result<T, E>;

/// Index into a model's parameter registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One layer; `P` is a parameter reference (registry index in memory,
/// parameter name on disk).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer<P = ParamId> {
    Conv {
        weight: P,
        bias: Option<P>,
        geometry: ConvGeometry,
    },
    Dcls {
        weights: P,
        positions: P,
        sigma: Option<P>,
        bias: Option<P>,
        kernel: KernelGeometry,
        stride: usize,
        padding: usize,
    },
    Relu,
    StarRelu {
        scale: P,
        bias: P,
    },
    GlobalAvgPool,
    Linear {
        weight: P,
        bias: P,
    },
}

impl<P: Clone> Layer<P> {
    fn map_params<Q, E>(&self, mut f: impl FnMut(&P) -> Result<Q, E>) -> Result<Layer<Q>, E> {
        let mut opt = |p: &Option<P>| p.as_ref().map(&mut f).transpose();
        Ok(match self {
            Layer::Conv {
                weight,
                bias,
                geometry,
            } => {
                let bias = opt(bias)?;
                Layer::Conv {
                    weight: f(weight)?,
                    bias,
                    geometry: *geometry,
                }
            }
            Layer::Dcls {
                weights,
                positions,
                sigma,
                bias,
                kernel,
                stride,
                padding,
            } => {
                let sigma = opt(sigma)?;
                let bias = opt(bias)?;
                Layer::Dcls {
                    weights: f(weights)?,
                    positions: f(positions)?,
                    sigma,
                    bias,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                }
            }
            Layer::Relu => Layer::Relu,
            Layer::StarRelu { scale, bias } => Layer::StarRelu {
                scale: f(scale)?,
                bias: f(bias)?,
            },
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Linear { weight, bias } => Layer::Linear {
                weight: f(weight)?,
                bias: f(bias)?,
            },
        })
    }

    fn params(&self) -> Vec<P> {
        let mut out = Vec::new();
        let _ = self.map_params(|p| {
            out.push(p.clone());
            Ok::<_, ()>(())
        });
        out
    }
}

/// Serializable description of the layer stack and the CAM tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub layers: Vec<Layer<String>>,
    /// Index of the layer whose output feeds the CAM methods.
    pub tap: usize,
}

/// Named parameter registry. Every learnable tensor appears exactly once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(ZooError::Layout(format!("duplicate parameter {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// How parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub tap: Var,
    /// One handle per registry entry, registry order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    params: ParamStore,
    layers: Vec<Layer>,
    tap: usize,
    classes: usize,
}

impl Model {
    /// Validates that every layer reference resolves, every parameter is
    /// used exactly once, and that the stack ends in class logits.
    pub fn from_layout(layout: &ModelLayout, params: ParamStore) -> Result<Self> {
        let layers = layout
            .layers
            .iter()
            .map(|l| {
                l.map_params(|name| {
                    params
                        .id(name)
                        .ok_or_else(|| ZooError::Layout(format!("missing parameter {name:?}")))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut uses: HashMap<ParamId, usize> = HashMap::new();
        for l in &layers {
            for p in l.params() {
                *uses.entry(p).or_default() += 1;
            }
        }
        for i in 0..params.len() {
            match uses.get(&ParamId(i)).copied().unwrap_or(0) {
                1 => {}
                n => {
                    return Err(ZooError::Layout(format!(
                        "parameter {:?} referenced {n} times",
                        params.name(ParamId(i))
                    )))
                }
            }
        }
        if layout.tap >= layers.len() {
            return Err(ZooError::Layout(format!("tap {} past {} layers", layout.tap, layers.len())));
        }
        let classes = match layers.last() {
            Some(Layer::Linear { weight, .. }) => params.get(*weight).shape()[0],
            _ => return Err(ZooError::Layout("last layer must be linear".into())),
        };
        Ok(Self {
            params,
            layers,
            tap: layout.tap,
            classes,
        })
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.map_params(|id| Ok::<_, ZooError>(self.params.name(*id).to_string()))
                        .expect("infallible")
                })
                .collect(),
            tap: self.tap,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn tap_index(&self) -> usize {
        self.tap
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records the whole network on `tape`. With `watch_tap`, the tap
    /// output keeps its gradient even when parameters are frozen.
    pub fn forward(&self, tape: &mut Tape<f32>, input: Var, mode: ParamMode, watch_tap: bool) -> Result<ForwardPass> {
        let params: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| match mode {
                ParamMode::Trainable => tape.param(t.clone()),
                ParamMode::Frozen => tape.constant(t.clone()),
            })
            .collect();
        let p = |id: &ParamId| params[id.0];
        let mut x = input;
        let mut tap = None;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    geometry,
                } => {
                    let y = tape.conv2d(x, p(weight), *geometry)?;
                    match bias {
                        Some(b) => tape.channel_bias(y, p(b))?,
                        None => y,
                    }
                }
                Layer::Dcls {
                    weights,
                    positions,
                    sigma,
                    bias,
                    kernel,
                    stride,
                    padding,
                } => {
                    let y = tape.dcls_conv(x, p(weights), p(positions), sigma.as_ref().map(p), *kernel, *stride, *padding)?;
                    match bias {
                        Some(b) => tape.channel_bias(y, p(b))?,
                        None => y,
                    }
                }
                Layer::Relu => tape.relu(x)?,
                Layer::StarRelu { scale, bias } => tape.star_relu(x, p(scale), p(bias))?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Linear { weight, bias } => {
                    let shape = tape.value(x).shape().to_vec();
                    let flat = if shape.len() == 2 {
                        x
                    } else {
                        tape.reshape(x, &[shape[0], shape[1..].iter().product()])?
                    };
                    tape.linear(flat, p(weight), p(bias))?
                }
            };
            if i == self.tap {
                if tape.value(x).shape().len() != 4 {
                    return Err(ZooError::Layout(format!(
                        "tap layer {i} outputs {:?}, expected NCHW",
                        tape.value(x).shape()
                    )));
                }
                if watch_tap {
                    tape.watch(x);
                }
                tap = Some(x);
            }
        }
        Ok(ForwardPass {
            logits: x,
            tap: tap.expect("tap index validated at construction"),
            params,
        })
    }

    /// Projects DCLS positions back onto their support and keeps gaussian
    /// widths above the floor.
    pub fn clamp_dcls(&mut self) {
        for layer in &self.layers {
            if let Layer::Dcls {
                positions,
                sigma,
                kernel,
                ..
            } = layer
            {
                crate::dcls::clamp_positions(self.params.tensors[positions.0].data_mut(), kernel.size);
                if let Some(s) = sigma {
                    crate::dcls::clamp_sigma(&mut self.params.tensors[s.0].data_mut()[0]);
                }
            }
        }
    }

    /// Registry ids of DCLS position tensors (these get the position
    /// learning rate).
    pub fn position_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dcls { positions, .. } => Some(*positions),
                _ => None,
            })
            .collect()
    }
}
