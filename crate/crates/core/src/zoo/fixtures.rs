//! Hand-built models with known explanations.

use super::{Layer, Model, ModelLayout, ParamStore};
use crate::datakit::RgbImage;
use crate::tensor::{ConvGeometry, Tensor};

/// A 1×1 convolution producing `A1 = x_red` and `A2 = -2 x_red`, pooled
/// into a head whose class-0 row weights both channels by 1. For class 0
/// every pooled gradient is equal, so `Σ α_k A^k = -x_red / Z`: negative
/// wherever red is positive, and Grad-CAM rectifies it to nothing.
pub fn cancellation_model() -> Model {
    let mut store = ParamStore::default();
    let conv = Tensor::new([2, 3, 1, 1], vec![1.0, 0.0, 0.0, -2.0, 0.0, 0.0]).expect("static shape");
    let head = Tensor::new([2, 2], vec![1.0, 1.0, 1.0, -1.0]).expect("static shape");
    store.insert("cancel.conv.weight", conv).expect("fresh store");
    store.insert("cancel.head.weight", head).expect("fresh store");
    store.insert("cancel.head.bias", Tensor::zeros([2]).expect("static shape")).expect("fresh store");
    let layout = ModelLayout {
        layers: vec![
            Layer::Conv {
                weight: "cancel.conv.weight".into(),
                bias: None,
                geometry: ConvGeometry::default(),
            },
            Layer::GlobalAvgPool,
            Layer::Linear {
                weight: "cancel.head.weight".into(),
                bias: "cancel.head.bias".into(),
            },
        ],
        tap: 0,
    };
    Model::from_layout(&layout, store).expect("consistent fixture")
}

/// Input whose red channel is strictly positive after normalization and
/// varies across pixels.
pub fn cancellation_image(size: usize) -> RgbImage {
    let data = (0..size * size)
        .flat_map(|p| [140 + (p * 97 % 110) as u8, 30, 200])
        .collect();
    RgbImage::new(size, size, data).expect("square image")
}
