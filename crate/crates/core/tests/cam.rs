use dclscam::cam::{
    capture, channel_weights, gradcam, threshold_gradcam, Target, DEFAULT_THRESHOLD,
};
use dclscam::tensor::{ConvGeometry, Tensor};
use dclscam::zoo::{cancellation_image, cancellation_model, Layer, Model, ModelLayout, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct OneConv {
    conv_w: Vec<f64>,
    conv_b: Vec<f64>,
    head_w: Vec<f64>,
    model: Model,
}

/// conv 3→2 (3×3, pad 1) → global average pool → linear 2→2.
fn one_conv(seed: u64) -> OneConv {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let (cw, cb, hw, hb) = (draw(54), draw(2), draw(4), draw(2));
    let mut store = ParamStore::default();
    store.insert("conv.weight", Tensor::new([2, 3, 3, 3], cw.clone()).unwrap()).unwrap();
    store.insert("conv.bias", Tensor::new([2], cb.clone()).unwrap()).unwrap();
    store.insert("head.weight", Tensor::new([2, 2], hw.clone()).unwrap()).unwrap();
    store.insert("head.bias", Tensor::new([2], hb).unwrap()).unwrap();
    let layout = ModelLayout {
        layers: vec![
            Layer::Conv {
                weight: "conv.weight".into(),
                bias: Some("conv.bias".into()),
                geometry: ConvGeometry::new(1, 1, 1),
            },
            Layer::GlobalAvgPool,
            Layer::Linear {
                weight: "head.weight".into(),
                bias: "head.bias".into(),
            },
        ],
        tap: 0,
    };
    let f = |v: Vec<f32>| v.into_iter().map(f64::from).collect();
    OneConv {
        conv_w: f(cw),
        conv_b: f(cb),
        head_w: f(hw),
        model: Model::from_layout(&layout, store).unwrap(),
    }
}

/// Grad-CAM evaluated by hand: feature maps by direct summation,
/// α_k = W[c,k] / Z (the pooled gradient of a GAP + linear head),
/// ReLU of the weighted sum, min-max normalization.
fn hand_gradcam(m: &OneConv, x: &[f64], h: usize, w: usize, class: usize) -> Vec<f64> {
    let z = (h * w) as f64;
    let mut l = vec![0.0; h * w];
    for k in 0..2 {
        let alpha = m.head_w[class * 2 + k] / z;
        for y in 0..h {
            for xx in 0..w {
                let mut a = m.conv_b[k];
                for c in 0..3 {
                    for i in 0..3 {
                        for j in 0..3 {
                            let (sy, sx) = (y as isize + i as isize - 1, xx as isize + j as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                a += m.conv_w[((k * 3 + c) * 3 + i) * 3 + j] * x[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                l[y * w + xx] += alpha * a;
            }
        }
    }
    let l: Vec<f64> = l.into_iter().map(|v| v.max(0.0)).collect();
    let (lo, hi) = l.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    l.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[test]
fn gradcam_matches_hand_evaluation() {
    let mut checked = 0;
    for seed in 0..20 {
        let m = one_conv(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (h, w) = (5, 6);
        let x: Vec<f32> = (0..3 * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let image = Tensor::new([3, h, w], x.clone()).unwrap();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for class in 0..2 {
            let got = gradcam(&m.model, &image, class).unwrap();
            if got.degenerate {
                continue;
            }
            let want = hand_gradcam(&m, &x64, h, w, class);
            for (g, e) in got.heatmap.values().iter().zip(&want) {
                assert!((*g as f64 - e).abs() < 1e-5, "seed {seed} class {class}: {g} vs {e}");
            }
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} non-degenerate cases");
}

#[test]
fn pooled_gradient_of_gap_head_is_constant() {
    let m = one_conv(3);
    let image = Tensor::from_fn([3, 4, 4], |i| (i as f32 * 0.37).sin()).unwrap();
    let cap = capture(&m.model, &image, 1, Target::Logit).unwrap();
    let alpha = channel_weights(&cap.gradients);
    for k in 0..2 {
        let want = (m.head_w[2 + k] as f32 / 16.0) as f64;
        assert!((alpha[k] - want).abs() < 1e-7);
        assert!(cap.gradients.data()[k * 16..(k + 1) * 16].iter().all(|&g| g as f64 == want));
    }
}

#[test]
fn rigged_model_cancels_plain_gradcam_only() {
    let model = cancellation_model();
    let image = cancellation_image(8).to_tensor();
    let plain = gradcam(&model, &image, 0).unwrap();
    assert!(plain.degenerate);
    assert!(plain.heatmap.values().iter().all(|&v| v == 0.0));
    let thr = threshold_gradcam(&model, &image, 0, DEFAULT_THRESHOLD).unwrap();
    assert!(!thr.degenerate);
    assert!(thr.heatmap.values().contains(&1.0));
    assert_eq!(DEFAULT_THRESHOLD, 0.3);
}

#[test]
fn class_out_of_range_is_an_error() {
    let model = cancellation_model();
    let image = cancellation_image(8).to_tensor();
    assert!(gradcam(&model, &image, 2).is_err());
    assert!(threshold_gradcam(&model, &image, 0, -0.1).is_err());
}

#[test]
fn probability_target_changes_gradient_scale_not_sign_pattern() {
    let m = one_conv(5);
    let image = Tensor::from_fn([3, 4, 4], |i| (i as f32 * 0.11).cos()).unwrap();
    let a = capture(&m.model, &image, 0, Target::Logit).unwrap();
    let b = capture(&m.model, &image, 0, Target::Probability).unwrap();
    assert_eq!(a.activations, b.activations);
    assert_ne!(a.gradients, b.gradients);
}
