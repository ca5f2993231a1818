//! Grad-CAM and Threshold-Grad-CAM over a model's tap layer.

mod heatmap;
mod overlay;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};
use crate::zoo::{Model, ParamMode, ZooError};

pub use heatmap::Heatmap;
pub use overlay::{colormap, overlay, COLORMAP};

/// Threshold used by Threshold-Grad-CAM unless overridden.
pub const DEFAULT_THRESHOLD: f32 = 0.3;

#[derive(Debug, Error)]
pub enum CamError {
    #[error(transparent)]
    Model(#[from] ZooError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f32),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
}

pub type Result<T, E = CamError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Method {
    #[default]
    GradCam,
    ThresholdGradCam,
}

impl Method {
    pub const BOTH: [Method; 2] = [Method::GradCam, Method::ThresholdGradCam];

    pub fn tag(self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::ThresholdGradCam => "threshold_gradcam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gradcam" => Ok(Method::GradCam),
            "tgradcam" | "threshold_gradcam" => Ok(Method::ThresholdGradCam),
            other => Err(format!("unknown method {other:?} (expected gradcam or tgradcam)")),
        }
    }
}

/// Scalar that is differentiated with respect to the tap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Target {
    /// Raw class logit.
    #[default]
    Logit,
    /// Softmax probability of the class.
    Probability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamResult {
    pub heatmap: Heatmap,
    /// Set when the map carried no information (all zero or constant).
    pub degenerate: bool,
}

impl CamResult {
    fn degenerate(height: usize, width: usize) -> Self {
        Self {
            heatmap: Heatmap::zeros(height, width),
            degenerate: true,
        }
    }
}

/// Tap activations `A` and gradients `dy/dA` for one image, `[C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TapCapture {
    pub activations: Tensor<f32>,
    pub gradients: Tensor<f32>,
    pub input_height: usize,
    pub input_width: usize,
}

/// Forward pass with frozen parameters, then backward from the target
/// scalar of `class` to the tap.
pub fn capture(model: &Model, image: &Tensor<f32>, class: usize, target: Target) -> Result<TapCapture> {
    if class >= model.classes() {
        return Err(CamError::ClassOutOfRange {
            class,
            classes: model.classes(),
        });
    }
    let s = image.shape();
    let input = match s.len() {
        3 => image.clone().reshape([1, s[0], s[1], s[2]])?,
        4 if s[0] == 1 => image.clone(),
        _ => {
            return Err(CamError::SizeMismatch(format!("expected one [C,H,W] image, got {s:?}")));
        }
    };
    let (input_height, input_width) = (input.shape()[2], input.shape()[3]);
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let fw = model.forward(&mut tape, x, ParamMode::Frozen, true)?;
    let y = match target {
        Target::Logit => tape.pick(fw.logits, class)?,
        Target::Probability => tape.softmax_pick(fw.logits, class)?,
    };
    tape.backward(y)?;
    let acts = tape.value(fw.tap);
    let shape = acts.shape()[1..].to_vec();
    let gradients = match tape.grad(fw.tap) {
        Some(g) => Tensor::new(shape.clone(), g.to_vec())?,
        None => Tensor::zeros(shape.clone())?,
    };
    Ok(TapCapture {
        activations: acts.clone().reshape(shape)?,
        gradients,
        input_height,
        input_width,
    })
}

fn check_pair(acts: &Tensor<f32>, grads: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if acts.shape().len() != 3 || acts.shape() != grads.shape() {
        return Err(CamError::SizeMismatch(format!(
            "activations {:?} vs gradients {:?}, both must be [C,h,w]",
            acts.shape(),
            grads.shape()
        )));
    }
    Ok((acts.shape()[0], acts.shape()[1], acts.shape()[2]))
}

/// Pooled gradients `α_k = (1/Z) Σ_ij dy/dA^k_ij`, one per channel.
pub fn channel_weights(grads: &Tensor<f32>) -> Vec<f64> {
    let c = grads.shape()[0];
    let z = grads.numel() / c;
    grads
        .data()
        .chunks(z)
        .map(|plane| plane.iter().map(|&g| g as f64).sum::<f64>() / z as f64)
        .collect()
}

/// `ReLU(Σ_k α_k A^k)` at feature resolution, before any normalization.
pub fn gradcam_map(acts: &Tensor<f32>, grads: &Tensor<f32>) -> Result<Heatmap> {
    let (_, h, w) = check_pair(acts, grads)?;
    let alpha = channel_weights(grads);
    let mut sum = vec![0.0f64; h * w];
    for (a, plane) in alpha.iter().zip(acts.data().chunks(h * w)) {
        for (s, v) in sum.iter_mut().zip(plane) {
            *s += a * *v as f64;
        }
    }
    Ok(Heatmap::from_f64(h, w, sum.into_iter().map(|v| v.max(0.0))))
}

/// Threshold-Grad-CAM at feature resolution: per-channel ReLU of the
/// weighted maps, sum, divide by the maximum, zero values below `t`.
pub fn threshold_map(acts: &Tensor<f32>, grads: &Tensor<f32>, t: f32) -> Result<CamResult> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CamError::Threshold(t));
    }
    let (_, h, w) = check_pair(acts, grads)?;
    let alpha = channel_weights(grads);
    let mut sum = vec![0.0f64; h * w];
    for (a, plane) in alpha.iter().zip(acts.data().chunks(h * w)) {
        for (s, v) in sum.iter_mut().zip(plane) {
            *s += (a * *v as f64).max(0.0);
        }
    }
    let max = sum.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(CamResult::degenerate(h, w));
    }
    let t = t as f64;
    let values = sum.into_iter().map(|s| {
        let n = s / max;
        if n >= t {
            n
        } else {
            0.0
        }
    });
    Ok(CamResult {
        heatmap: Heatmap::from_f64(h, w, values),
        degenerate: false,
    })
}

/// Grad-CAM from a capture: map, resize to `out_h × out_w`, min-max
/// normalize.
pub fn gradcam_from_capture(cap: &TapCapture, out_h: usize, out_w: usize) -> Result<CamResult> {
    let l = gradcam_map(&cap.activations, &cap.gradients)?;
    if l.values().iter().all(|&v| v == 0.0) {
        return Ok(CamResult::degenerate(out_h, out_w));
    }
    match l.resize(out_h, out_w).min_max_normalized() {
        Some(heatmap) => Ok(CamResult {
            heatmap,
            degenerate: false,
        }),
        None => Ok(CamResult::degenerate(out_h, out_w)),
    }
}

/// Threshold-Grad-CAM from a capture, thresholded at feature resolution
/// and then resized.
pub fn threshold_from_capture(cap: &TapCapture, t: f32, out_h: usize, out_w: usize) -> Result<CamResult> {
    let r = threshold_map(&cap.activations, &cap.gradients, t)?;
    if r.degenerate {
        return Ok(CamResult::degenerate(out_h, out_w));
    }
    Ok(CamResult {
        heatmap: r.heatmap.resize(out_h, out_w),
        degenerate: false,
    })
}

/// Grad-CAM of `class` for one image, at input resolution.
pub fn gradcam(model: &Model, image: &Tensor<f32>, class: usize) -> Result<CamResult> {
    explain(model, image, class, Method::GradCam, DEFAULT_THRESHOLD, Target::Logit)
}

/// Threshold-Grad-CAM of `class` for one image, at input resolution.
pub fn threshold_gradcam(model: &Model, image: &Tensor<f32>, class: usize, t: f32) -> Result<CamResult> {
    explain(model, image, class, Method::ThresholdGradCam, t, Target::Logit)
}

/// Either method; `t` is ignored by plain Grad-CAM.
pub fn explain(model: &Model, image: &Tensor<f32>, class: usize, method: Method, t: f32, target: Target) -> Result<CamResult> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CamError::Threshold(t));
    }
    let cap = capture(model, image, class, target)?;
    let (h, w) = (cap.input_height, cap.input_width);
    match method {
        Method::GradCam => gradcam_from_capture(&cap, h, w),
        Method::ThresholdGradCam => threshold_from_capture(&cap, t, h, w),
    }
}
