use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, Model, ModelLayout, ParamStore, Result, ZooError};
use crate::dcls::{Interpolation, KernelGeometry, DEFAULT_SIGMA};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "dcls")]
    Dcls,
    #[serde(rename = "starrelu")]
    StarRelu,
    #[serde(rename = "starrelu_dcls")]
    StarReluDcls,
    /// Baseline with a fixed 3×3 dilation-2 depthwise kernel; the reference
    /// a grid-initialized DCLS layer must reproduce.
    #[serde(rename = "dilated")]
    Dilated,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Baseline, Arch::Dcls, Arch::StarRelu, Arch::StarReluDcls, Arch::Dilated];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Baseline => "baseline",
            Arch::Dcls => "dcls",
            Arch::StarRelu => "starrelu",
            Arch::StarReluDcls => "starrelu_dcls",
            Arch::Dilated => "dilated",
        }
    }

    pub fn uses_dcls(self) -> bool {
        matches!(self, Arch::Dcls | Arch::StarReluDcls)
    }

    pub fn uses_star_relu(self) -> bool {
        matches!(self, Arch::StarRelu | Arch::StarReluDcls)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| ZooError::UnknownArch(s.to_string()))
    }
}

/// Where DCLS positions start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionInit {
    /// Uniform over the K×K support.
    #[default]
    Uniform,
    /// The dilation-2 grid of a 3×3 kernel (needs m = 9, K ≥ 5).
    DilationGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Position learning rate = `lr * pos_lr_mult`.
    pub pos_lr_mult: f32,
    pub seed: u64,
    pub kernel_size: usize,
    pub dcls_elements: usize,
    pub interp: Interpolation,
    pub position_init: PositionInit,
    pub classes: usize,
    /// Channels of the first stage; doubles per stage.
    pub width: usize,
    pub expansion: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Baseline,
            epochs: 30,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.0,
            pos_lr_mult: 5.0,
            seed: 0,
            kernel_size: 5,
            dcls_elements: 9,
            interp: Interpolation::Bilinear,
            position_init: PositionInit::Uniform,
            classes: 3,
            width: 16,
            expansion: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ZooError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.pos_lr_mult.is_finite() && self.pos_lr_mult >= 0.0) {
            return fail(format!("position lr multiplier {} must be non-negative", self.pos_lr_mult));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.arch.uses_dcls() {
            let k2 = self.kernel_size * self.kernel_size;
            if self.dcls_elements == 0 || self.dcls_elements > k2 {
                return fail(format!("{} dcls elements do not fit a {}x{} kernel", self.dcls_elements, self.kernel_size, self.kernel_size));
            }
            if self.position_init == PositionInit::DilationGrid && (self.dcls_elements != 9 || self.kernel_size < 5) {
                return fail("dilation-grid init needs 9 elements and K >= 5".into());
            }
        }
        if self.classes < 2 || self.width == 0 || self.expansion == 0 {
            return fail("need at least 2 classes and positive width/expansion".into());
        }
        Ok(())
    }
}

/// Stable per-parameter stream so that identically named parameters get
/// identical values across architectures.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

fn uniform(seed: u64, name: &str, shape: &[usize], bound: f32) -> Result<Tensor<f32>> {
    let mut rng = param_rng(seed, name);
    Ok(Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))?)
}

struct Builder {
    seed: u64,
    store: ParamStore,
    layers: Vec<Layer<String>>,
}

impl Builder {
    fn param(&mut self, name: String, t: Tensor<f32>) -> Result<String> {
        self.store.insert(name.clone(), t)?;
        Ok(name)
    }

    /// `gain` 6 keeps variance through a following ReLU, 3 through a linear
    /// chain.
    fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize, geometry: ConvGeometry, gain: f32) -> Result<()> {
        let fan_in = (cin_per_group * k * k) as f32;
        let w = uniform(self.seed, &format!("{name}.weight"), &[cout, cin_per_group, k, k], (gain / fan_in).sqrt())?;
        let weight = self.param(format!("{name}.weight"), w)?;
        let bias = self.param(format!("{name}.bias"), Tensor::zeros([cout])?)?;
        self.layers.push(Layer::Conv {
            weight,
            bias: Some(bias),
            geometry,
        });
        Ok(())
    }
}

/// Default network for 32×32 inputs: stem conv (stride 2) → three stages
/// of expand/depthwise/project/activation with stride-2 downsampling
/// between them → global average pool → linear head. The tap is the last
/// stage's activation (4×4 for 32×32 inputs).
pub fn build(config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    let mut b = Builder {
        seed: config.seed,
        store: ParamStore::default(),
        layers: Vec::new(),
    };
    let (w, e, k) = (config.width, config.expansion, config.kernel_size);

    b.conv("stem", w, 3, 3, ConvGeometry::new(2, 1, 1), 6.0)?;
    b.layers.push(Layer::Relu);

    let mut tap = 0;
    for stage in 1..=3 {
        let c = w << (stage - 1);
        if stage > 1 {
            b.conv(&format!("down{stage}"), c, c / 2, 3, ConvGeometry::new(2, 1, 1), 3.0)?;
        }
        let ce = c * e;
        let name = format!("stage{stage}");
        b.conv(&format!("{name}.expand"), ce, c, 1, ConvGeometry::default(), 3.0)?;

        let dw = format!("{name}.dw");
        match config.arch {
            Arch::Baseline | Arch::StarRelu => {
                b.conv(&dw, ce, 1, k, ConvGeometry::new(1, k / 2, ce), 3.0)?;
            }
            Arch::Dilated => {
                b.conv(&dw, ce, 1, 3, ConvGeometry::new(1, 2, ce).with_dilation(2), 3.0)?;
            }
            Arch::Dcls | Arch::StarReluDcls => {
                let m = config.dcls_elements;
                // Named like the dense depthwise weight so a 9-element layer
                // draws exactly the values of the dilated 3×3 kernel.
                let wt = uniform(config.seed, &format!("{dw}.weight"), &[ce, m], (3.0 / m as f32).sqrt())?;
                let weights = b.param(format!("{dw}.weight"), wt)?;
                let pos = match config.position_init {
                    PositionInit::Uniform => {
                        let mut rng = param_rng(config.seed, &format!("{dw}.positions"));
                        let hi = (k - 1) as f32;
                        Tensor::from_fn([ce, m, 2], |_| rng.random_range(0.0..=hi))?
                    }
                    PositionInit::DilationGrid => {
                        let off = (k - 5) / 2;
                        Tensor::from_fn([ce, m, 2], |i| {
                            let (j, axis) = ((i / 2) % m, i % 2);
                            let cell = if axis == 0 { j / 3 } else { j % 3 };
                            (off + 2 * cell) as f32
                        })?
                    }
                };
                let positions = b.param(format!("{dw}.positions"), pos)?;
                let sigma = match config.interp {
                    Interpolation::Gaussian => Some(b.param(format!("{dw}.sigma"), Tensor::scalar(DEFAULT_SIGMA))?),
                    Interpolation::Bilinear => None,
                };
                let bias = b.param(format!("{dw}.bias"), Tensor::zeros([ce])?)?;
                b.layers.push(Layer::Dcls {
                    weights,
                    positions,
                    sigma,
                    bias: Some(bias),
                    kernel: KernelGeometry {
                        size: k,
                        interp: config.interp,
                    },
                    stride: 1,
                    padding: k / 2,
                });
            }
        }

        b.conv(&format!("{name}.project"), c, ce, 1, ConvGeometry::default(), 6.0)?;
        if config.arch.uses_star_relu() {
            let scale = b.param(format!("{name}.act.scale"), Tensor::scalar(1.0))?;
            let bias = b.param(format!("{name}.act.bias"), Tensor::scalar(0.0))?;
            b.layers.push(Layer::StarRelu { scale, bias });
        } else {
            b.layers.push(Layer::Relu);
        }
        tap = b.layers.len() - 1;
    }

    let feat = w << 2;
    b.layers.push(Layer::GlobalAvgPool);
    let bound = 1.0 / (feat as f32).sqrt();
    let hw = uniform(config.seed, "head.weight", &[config.classes, feat], bound)?;
    let weight = b.param("head.weight".into(), hw)?;
    let bias = b.param("head.bias".into(), Tensor::zeros([config.classes])?)?;
    b.layers.push(Layer::Linear { weight, bias });

    Model::from_layout(&ModelLayout { layers: b.layers, tap }, b.store)
}
