//! Analytic gradients against central finite differences (eps 1e-3, f64).

use dclscam::dcls::{Interpolation, KernelGeometry};
use dclscam::tensor::gradcheck::check_tape_gradients;
use dclscam::tensor::{ConvGeometry, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 20;
/// Lower bound for random gaussian widths; narrower kernels are covered by
/// `gaussian_kernel_gradient_converges_quadratically`.
const SIGMA_LO: f64 = 0.8;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).unwrap()
}

/// Values bounded away from the ReLU kink at zero.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { mag } else { -mag }
    })
    .unwrap()
}

/// Positions whose fractional parts stay clear of the bilinear kinks at
/// integer coordinates.
fn off_grid_positions(c: usize, m: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn([c, m, 2], |_| {
        rng.random_range(0..k - 1) as f64 + rng.random_range(0.05..0.95)
    })
    .unwrap()
}

/// Scalar reduction `sum(r * y)` with fixed random `r`, so every output
/// element gets an O(1) upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = tape.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let flat = tape.reshape(y, &[1, n])?;
    let w = tape.constant(uniform(&[1, n], -1.0, 1.0, &mut rng));
    let b = tape.constant(Tensor::scalar(0.0));
    let out = tape.linear(flat, w, b)?;
    tape.pick(out, 0)
}

fn assert_ok(name: &str, seed: u64, err: f64) {
    assert!(err < TOL, "{name} seed {seed}: max relative error {err:.3e}");
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = if seed % 2 == 0 { 1 } else { 2 };
        let geom = ConvGeometry::new(1 + (seed as usize % 2), 1, groups).with_dilation(1 + (seed as usize).is_multiple_of(3) as usize);
        let x = uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let k = uniform(&[2, 2 / groups, 3, 3], -1.0, 1.0, &mut rng);
        let rep = check_tape_gradients(&[x, k], EPS, |t, v| {
            let y = t.conv2d(v[0], v[1], geom)?;
            project(t, y, seed)
        })
        .unwrap();
        assert_ok("conv2d", seed, rep.max_rel_err);
    }
}

#[test]
fn relu_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = off_kink(&[1, 2, 3, 3], &mut rng);
        let rep = check_tape_gradients(&[x], EPS, |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, seed)
        })
        .unwrap();
        assert_ok("relu", seed, rep.max_rel_err);
    }
}

#[test]
fn star_relu_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = off_kink(&[1, 2, 3, 3], &mut rng);
        let s = Tensor::scalar(rng.random_range(0.5..1.5));
        let b = Tensor::scalar(rng.random_range(-0.5..0.5));
        let rep = check_tape_gradients(&[x, s, b], EPS, |t, v| {
            let y = t.star_relu(v[0], v[1], v[2])?;
            project(t, y, seed)
        })
        .unwrap();
        assert_ok("star_relu", seed, rep.max_rel_err);
    }
}

#[test]
fn global_avg_pool_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[2, 3, 4, 3], -1.0, 1.0, &mut rng);
        let rep = check_tape_gradients(&[x], EPS, |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, seed)
        })
        .unwrap();
        assert_ok("global_avg_pool", seed, rep.max_rel_err);
    }
}

#[test]
fn linear_and_cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let w = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = uniform(&[3], -0.5, 0.5, &mut rng);
        let label = (seed % 3) as usize;
        let rep = check_tape_gradients(&[x, w, b], EPS, |t, v| {
            let logits = t.linear(v[0], v[1], v[2])?;
            t.softmax_cross_entropy(logits, &[label])
        })
        .unwrap();
        assert_ok("linear+softmax_cross_entropy", seed, rep.max_rel_err);
    }
}

#[test]
fn batched_cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = uniform(&[4, 5], -2.0, 2.0, &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let rep = check_tape_gradients(&[logits], EPS, |t, v| t.softmax_cross_entropy(v[0], &labels)).unwrap();
        assert_ok("softmax_cross_entropy", seed, rep.max_rel_err);
    }
}

#[test]
fn softmax_pick_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = uniform(&[1, 4], -2.0, 2.0, &mut rng);
        let rep = check_tape_gradients(&[logits], EPS, |t, v| t.softmax_pick(v[0], (seed % 4) as usize)).unwrap();
        assert_ok("softmax_pick", seed, rep.max_rel_err);
    }
}

#[test]
fn channel_bias_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let b = uniform(&[3], -1.0, 1.0, &mut rng);
        let rep = check_tape_gradients(&[x, b], EPS, |t, v| {
            let y = t.channel_bias(v[0], v[1])?;
            project(t, y, seed)
        })
        .unwrap();
        assert_ok("channel_bias", seed, rep.max_rel_err);
    }
}

fn dcls_kernel_case(interp: Interpolation) {
    let geom = KernelGeometry { size: 5, interp };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let p = off_grid_positions(2, 4, 5, &mut rng);
        let mut params = vec![w, p];
        if interp == Interpolation::Gaussian {
            params.push(Tensor::scalar(rng.random_range(SIGMA_LO..1.5)));
        }
        let rep = check_tape_gradients(&params, EPS, |t, v| {
            let k = t.dcls_kernel(v[0], v[1], v.get(2).copied(), geom)?;
            project(t, k, seed)
        })
        .unwrap();
        assert_ok("dcls_kernel", seed, rep.max_rel_err);
    }
}

#[test]
fn dcls_kernel_bilinear_gradients() {
    dcls_kernel_case(Interpolation::Bilinear);
}

#[test]
fn dcls_kernel_gaussian_gradients() {
    dcls_kernel_case(Interpolation::Gaussian);
}

fn dcls_conv_case(interp: Interpolation) {
    let geom = KernelGeometry { size: 5, interp };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let x = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let w = uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let p = off_grid_positions(2, 3, 5, &mut rng);
        let mut params = vec![x, w, p];
        if interp == Interpolation::Gaussian {
            params.push(Tensor::scalar(rng.random_range(SIGMA_LO..1.5)));
        }
        let rep = check_tape_gradients(&params, EPS, |t, v| {
            let y = t.dcls_conv(v[0], v[1], v[2], v.get(3).copied(), geom, 1, 2)?;
            project(t, y, seed)
        })
        .unwrap();
        assert_ok("dcls_conv", seed, rep.max_rel_err);
    }
}

#[test]
fn dcls_conv_bilinear_gradients() {
    dcls_conv_case(Interpolation::Bilinear);
}

#[test]
fn dcls_conv_gaussian_gradients() {
    dcls_conv_case(Interpolation::Gaussian);
}

/// Narrow gaussians have large third derivatives; the analytic gradient
/// is confirmed by second-order convergence of the central difference.
#[test]
fn gaussian_kernel_gradient_converges_quadratically() {
    let geom = KernelGeometry { size: 5, interp: Interpolation::Gaussian };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = uniform(&[2, 4], -1.0, 1.0, &mut rng);
    let p = off_grid_positions(2, 4, 5, &mut rng);
    let params = vec![w, p, Tensor::scalar(0.45)];
    let err_at = |eps: f64| {
        check_tape_gradients(&params, eps, |t, v| {
            let k = t.dcls_kernel(v[0], v[1], Some(v[2]), geom)?;
            project(t, k, 0)
        })
        .unwrap()
        .max_rel_err
    };
    let (coarse, fine) = (err_at(1e-3), err_at(1e-4));
    assert!(fine < 1e-4, "{fine}");
    assert!(coarse / fine > 50.0, "coarse {coarse} fine {fine}");
}

/// Draws until every conv pre-activation is at least `margin` from the
/// ReLU kink, so an eps step cannot flip a unit.
fn composed_inputs(seed: u64, margin: f64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let x = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let k = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(xv, kv, ConvGeometry::new(1, 1, 1)).unwrap();
        if tape.value(y).data().iter().all(|v| v.abs() > margin) {
            let w = uniform(&[2, 3], -1.0, 1.0, &mut rng);
            let b = uniform(&[2], -1.0, 1.0, &mut rng);
            return vec![x, k, w, b];
        }
    }
}

#[test]
fn composed_network_gradients() {
    for seed in 0..5 {
        let inputs = composed_inputs(seed, 0.02);
        let [x, k, w, b] = <[Tensor<f64>; 4]>::try_from(inputs).unwrap();
        let rep = check_tape_gradients(&[x, k, w, b], EPS, |t, v| {
            let y = t.conv2d(v[0], v[1], ConvGeometry::new(1, 1, 1))?;
            let y = t.relu(y)?;
            let y = t.global_avg_pool(y)?;
            let logits = t.linear(y, v[2], v[3])?;
            t.softmax_cross_entropy(logits, &[1])
        })
        .unwrap();
        assert_ok("conv+relu+pool", seed, rep.max_rel_err);
    }
}

