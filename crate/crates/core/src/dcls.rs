//! Dilated convolution with learnable spacings.
//!
//! Each channel owns `m` weights with continuous `(row, col)` positions in
//! a `K x K` support. The dense depthwise kernel is materialised by
//! interpolation so that both weights and positions receive gradients.
//!
//! * bilinear: a weight at `(p, q)` splits over the four surrounding cells
//!   with `(1-fr)(1-fc), (1-fr)fc, fr(1-fc), fr*fc`, `fr`/`fc` the
//!   fractional parts. At integer coordinates the derivative uses the
//!   `floor` cell pair.
//! * gaussian: `w * g(i,j) / sum(g)` with
//!   `g(i,j) = exp(-((i-p)^2 + (j-q)^2) / (2 sigma^2))` over the whole grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{ConvGeometry, Element, Op, Result, Tape, Tensor, TensorError, Var};

pub const DEFAULT_SIGMA: f32 = 0.5;
pub const SIGMA_FLOOR: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bilinear,
    Gaussian,
}

impl std::str::FromStr for Interpolation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(format!("unknown interpolation {other:?}")),
        }
    }
}

/// Dense support size and interpolation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelGeometry {
    pub size: usize,
    pub interp: Interpolation,
}

/// Project positions onto `[0, size-1]` componentwise.
pub fn clamp_positions<E: Element>(positions: &mut [E], size: usize) {
    let hi = E::from_acc((size - 1) as f64);
    for p in positions {
        *p = p.max(E::zero()).min(hi);
    }
}

pub fn clamp_sigma<E: Element>(sigma: &mut E) {
    *sigma = sigma.max(E::from_acc(SIGMA_FLOOR as f64));
}

fn invalid(msg: String) -> TensorError {
    TensorError::InvalidArgument { op: "dcls_kernel", msg }
}

fn check_inputs<E: Element>(
    weights: &Tensor<E>,
    positions: &Tensor<E>,
    sigma: Option<&Tensor<E>>,
    geom: KernelGeometry,
) -> Result<(usize, usize, f64)> {
    let ws = weights.shape();
    if ws.len() != 2 || positions.shape() != [ws[0], ws[1], 2] {
        return Err(TensorError::ShapeMismatch {
            op: "dcls_kernel",
            left: ws.to_vec(),
            right: positions.shape().to_vec(),
        });
    }
    let (channels, m) = (ws[0], ws[1]);
    let k = geom.size;
    if k == 0 || m > k * k {
        return Err(invalid(format!("{m} elements do not fit a {k}x{k} support")));
    }
    let hi = (k - 1) as f64;
    if let Some(i) = positions.data().iter().position(|p| !(0.0..=hi).contains(&p.to_acc())) {
        return Err(invalid(format!(
            "position {} at flat index {i} outside [0, {hi}]",
            positions.data()[i]
        )));
    }
    let sigma = match (geom.interp, sigma) {
        (Interpolation::Bilinear, _) => 0.0,
        (Interpolation::Gaussian, None) => return Err(invalid("gaussian mode needs sigma".into())),
        (Interpolation::Gaussian, Some(s)) => {
            let v = s.data()[0].to_acc();
            if s.numel() != 1 || v <= 0.0 {
                return Err(invalid(format!("sigma must be a positive scalar, got {v}")));
            }
            v
        }
    };
    Ok((channels, m, sigma))
}

#[inline]
fn bilinear_cells(p: f64, k: usize) -> (usize, f64) {
    let i = (p.floor() as usize).min(k - 1);
    (i, p - i as f64)
}

fn gaussian_table(p: f64, q: f64, sigma: f64, k: usize) -> (Vec<f64>, f64) {
    let denom = 2.0 * sigma * sigma;
    let g: Vec<f64> = (0..k * k)
        .map(|idx| {
            let (i, j) = ((idx / k) as f64, (idx % k) as f64);
            (-((i - p).powi(2) + (j - q).powi(2)) / denom).exp()
        })
        .collect();
    let total = g.iter().sum();
    (g, total)
}

/// Tape-free construction of the `[C, 1, K, K]` dense kernel.
pub fn build_dense<E: Element>(
    weights: &Tensor<E>,
    positions: &Tensor<E>,
    sigma: Option<&Tensor<E>>,
    geom: KernelGeometry,
) -> Result<Tensor<E>> {
    let (channels, m, sigma) = check_inputs(weights, positions, sigma, geom)?;
    let k = geom.size;
    let mut dense = vec![0.0f64; channels * k * k];
    for c in 0..channels {
        let cell = &mut dense[c * k * k..][..k * k];
        for e in 0..m {
            let w = weights.data()[c * m + e].to_acc();
            let p = positions.data()[(c * m + e) * 2].to_acc();
            let q = positions.data()[(c * m + e) * 2 + 1].to_acc();
            match geom.interp {
                Interpolation::Bilinear => {
                    let (i, fr) = bilinear_cells(p, k);
                    let (j, fc) = bilinear_cells(q, k);
                    for (di, wr) in [(0, 1.0 - fr), (1, fr)] {
                        for (dj, wc) in [(0, 1.0 - fc), (1, fc)] {
                            let (ii, jj) = (i + di, j + dj);
                            if ii < k && jj < k {
                                cell[ii * k + jj] += w * wr * wc;
                            }
                        }
                    }
                }
                Interpolation::Gaussian => {
                    let (g, total) = gaussian_table(p, q, sigma, k);
                    for (dst, gv) in cell.iter_mut().zip(g) {
                        *dst += w * gv / total;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![channels, 1, k, k],
        dense.into_iter().map(E::from_acc).collect(),
    ))
}

impl<E: Element> Tape<E> {
    /// Dense depthwise kernel from `weights [C,m]`, `positions [C,m,2]`
    /// and, in gaussian mode, a scalar `sigma`.
    pub fn dcls_kernel(
        &mut self,
        weights: Var,
        positions: Var,
        sigma: Option<Var>,
        geom: KernelGeometry,
    ) -> Result<Var> {
        let out = build_dense(
            self.value(weights),
            self.value(positions),
            sigma.map(|s| self.value(s)),
            geom,
        )?;
        let sigma = if geom.interp == Interpolation::Gaussian { sigma } else { None };
        self.push(
            out,
            Op::DclsKernel {
                weights,
                positions,
                sigma,
                geom,
            },
        )
    }

    /// Depthwise convolution with a kernel built by [`Tape::dcls_kernel`].
    #[allow(clippy::too_many_arguments)]
    pub fn dcls_conv(
        &mut self,
        input: Var,
        weights: Var,
        positions: Var,
        sigma: Option<Var>,
        geom: KernelGeometry,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let channels = self.value(weights).shape()[0];
        let in_shape = self.value(input).shape();
        if in_shape.len() != 4 || in_shape[1] != channels {
            return Err(TensorError::ShapeMismatch {
                op: "dcls_conv",
                left: in_shape.to_vec(),
                right: self.value(weights).shape().to_vec(),
            });
        }
        let kernel = self.dcls_kernel(weights, positions, sigma, geom)?;
        self.conv2d(input, kernel, ConvGeometry::new(stride, padding, channels))
    }
}

pub(crate) fn kernel_backward<E: Element>(
    tape: &Tape<E>,
    weights: Var,
    positions: Var,
    sigma: Option<Var>,
    geom: KernelGeometry,
    up: &[E],
) -> Vec<(Var, Vec<E>)> {
    let wt = tape.value(weights);
    let pt = tape.value(positions);
    let (channels, m) = (wt.shape()[0], wt.shape()[1]);
    let k = geom.size;
    let sig = sigma.map(|s| tape.value(s).data()[0].to_acc()).unwrap_or(0.0);
    let mut gw = vec![0.0f64; channels * m];
    let mut gp = vec![0.0f64; channels * m * 2];
    let mut gs = 0.0f64;
    for c in 0..channels {
        let u = &up[c * k * k..][..k * k];
        let at = |i: usize, j: usize| if i < k && j < k { u[i * k + j].to_acc() } else { 0.0 };
        for e in 0..m {
            let idx = c * m + e;
            let w = wt.data()[idx].to_acc();
            let p = pt.data()[idx * 2].to_acc();
            let q = pt.data()[idx * 2 + 1].to_acc();
            match geom.interp {
                Interpolation::Bilinear => {
                    let (i, fr) = bilinear_cells(p, k);
                    let (j, fc) = bilinear_cells(q, k);
                    let (u00, u01, u10, u11) = (at(i, j), at(i, j + 1), at(i + 1, j), at(i + 1, j + 1));
                    gw[idx] = u00 * (1.0 - fr) * (1.0 - fc)
                        + u01 * (1.0 - fr) * fc
                        + u10 * fr * (1.0 - fc)
                        + u11 * fr * fc;
                    gp[idx * 2] = w * ((u10 - u00) * (1.0 - fc) + (u11 - u01) * fc);
                    gp[idx * 2 + 1] = w * ((u01 - u00) * (1.0 - fr) + (u11 - u10) * fr);
                }
                Interpolation::Gaussian => {
                    let (g, total) = gaussian_table(p, q, sig, k);
                    let s2 = sig * sig;
                    let (mut a, mut ap, mut aq, mut as_) = (0.0, 0.0, 0.0, 0.0);
                    let (mut tp, mut tq, mut ts) = (0.0, 0.0, 0.0);
                    for (cell, &gv) in g.iter().enumerate() {
                        let (di, dj) = ((cell / k) as f64 - p, (cell % k) as f64 - q);
                        let uv = u[cell].to_acc();
                        let dp = gv * di / s2;
                        let dq = gv * dj / s2;
                        let ds = gv * (di * di + dj * dj) / (s2 * sig);
                        a += uv * gv;
                        ap += uv * dp;
                        aq += uv * dq;
                        as_ += uv * ds;
                        tp += dp;
                        tq += dq;
                        ts += ds;
                    }
                    gw[idx] = a / total;
                    gp[idx * 2] = w / total * (ap - a * tp / total);
                    gp[idx * 2 + 1] = w / total * (aq - a * tq / total);
                    gs += w / total * (as_ - a * ts / total);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(3);
    if tape.wants(weights) {
        out.push((weights, gw.into_iter().map(E::from_acc).collect()));
    }
    if tape.wants(positions) {
        out.push((positions, gp.into_iter().map(E::from_acc).collect()));
    }
    if let Some(s) = sigma {
        if tape.wants(s) {
            out.push((s, vec![E::from_acc(gs)]));
        }
    }
    out
}

/// Owned DCLS parameters for one depthwise layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DclsKernelSpec {
    pub weights: Tensor<f32>,
    pub positions: Tensor<f32>,
    pub sigma: Option<Tensor<f32>>,
    pub geom: KernelGeometry,
}

impl DclsKernelSpec {
    pub fn new(
        weights: Tensor<f32>,
        positions: Tensor<f32>,
        geom: KernelGeometry,
        sigma: Option<f32>,
    ) -> Result<Self> {
        let sigma = match geom.interp {
            Interpolation::Bilinear => None,
            Interpolation::Gaussian => Some(Tensor::scalar(sigma.unwrap_or(DEFAULT_SIGMA))),
        };
        check_inputs(&weights, &positions, sigma.as_ref(), geom)?;
        Ok(Self {
            weights,
            positions,
            sigma,
            geom,
        })
    }

    /// Uniform positions over the support, weights uniform in `±sqrt(6/m)`.
    pub fn random<R: Rng>(channels: usize, m: usize, geom: KernelGeometry, rng: &mut R) -> Result<Self> {
        let bound = (6.0 / m as f32).sqrt();
        let weights = Tensor::from_fn([channels, m], |_| rng.random_range(-bound..bound))?;
        let hi = (geom.size - 1) as f32;
        let positions = Tensor::from_fn([channels, m, 2], |_| rng.random_range(0.0..=hi))?;
        Self::new(weights, positions, geom, None)
    }

    /// Elements placed on the regular grid `{0, d, 2d, ...}^2`, the layout
    /// of a dilated convolution. `weights` is `[C, n*n]` in row-major grid
    /// order.
    pub fn dilation_grid(weights: Tensor<f32>, dilation: usize, geom: KernelGeometry) -> Result<Self> {
        let (channels, m) = (weights.shape()[0], weights.shape()[1]);
        let n = (m as f64).sqrt().round() as usize;
        if n * n != m || (n - 1) * dilation > geom.size - 1 {
            return Err(invalid(format!(
                "{m} elements at dilation {dilation} do not form a grid inside {}",
                geom.size
            )));
        }
        let mut pos = Vec::with_capacity(channels * m * 2);
        for _ in 0..channels {
            for a in 0..n {
                for b in 0..n {
                    pos.push((a * dilation) as f32);
                    pos.push((b * dilation) as f32);
                }
            }
        }
        Self::new(weights, Tensor::new([channels, m, 2], pos)?, geom, None)
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn elements(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn construct_kernel(&self) -> Result<Tensor<f32>> {
        build_dense(&self.weights, &self.positions, self.sigma.as_ref(), self.geom)
    }

    pub fn clamp_positions(&mut self) {
        clamp_positions(self.positions.data_mut(), self.geom.size);
        if let Some(s) = &mut self.sigma {
            clamp_sigma(&mut s.data_mut()[0]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BILINEAR4: KernelGeometry = KernelGeometry {
        size: 4,
        interp: Interpolation::Bilinear,
    };

    fn single(p: f32, q: f32, geom: KernelGeometry, sigma: Option<f32>) -> Tensor<f32> {
        let spec = DclsKernelSpec::new(
            Tensor::new([1, 1], vec![1.0]).unwrap(),
            Tensor::new([1, 1, 2], vec![p, q]).unwrap(),
            geom,
            sigma,
        )
        .unwrap();
        spec.construct_kernel().unwrap()
    }

    #[test]
    fn integer_position_hits_one_cell() {
        let k = single(2.0, 0.0, BILINEAR4, None);
        assert_eq!(k.shape(), &[1, 1, 4, 4]);
        for (i, &v) in k.data().iter().enumerate() {
            assert_eq!(v, if i == 2 * 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn half_position_splits_evenly() {
        let k = single(1.5, 1.5, BILINEAR4, None);
        for (i, &v) in k.data().iter().enumerate() {
            let want = if [5, 6, 9, 10].contains(&i) { 0.25 } else { 0.0 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn upper_boundary_position_is_exact() {
        let k = single(3.0, 3.0, BILINEAR4, None);
        assert_eq!(k.data()[15], 1.0);
        assert_eq!(k.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn narrow_gaussian_concentrates() {
        let geom = KernelGeometry {
            size: 5,
            interp: Interpolation::Gaussian,
        };
        let k = single(2.0, 3.0, geom, Some(0.1));
        assert!(k.data()[2 * 5 + 3] >= 0.99);
        let total: f64 = k.data().iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_out_of_range_and_bad_sigma() {
        let w = Tensor::new([1, 1], vec![1.0]).unwrap();
        let p = Tensor::new([1, 1, 2], vec![-0.3, 1.0]).unwrap();
        assert!(DclsKernelSpec::new(w.clone(), p, BILINEAR4, None).is_err());
        let p = Tensor::new([1, 1, 2], vec![1.0, 1.0]).unwrap();
        let gauss = KernelGeometry {
            size: 4,
            interp: Interpolation::Gaussian,
        };
        assert!(DclsKernelSpec::new(w.clone(), p.clone(), gauss, Some(0.0)).is_err());
        assert!(DclsKernelSpec::new(w.clone(), p.clone(), gauss, Some(-1.0)).is_err());
        let too_many = Tensor::new([1, 17], vec![0.0; 17]).unwrap();
        let p17 = Tensor::new([1, 17, 2], vec![0.0; 34]).unwrap();
        assert!(DclsKernelSpec::new(too_many, p17, BILINEAR4, None).is_err());
    }

    #[test]
    fn clamp_projects_into_support() {
        let mut spec = DclsKernelSpec::new(
            Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(),
            Tensor::new([1, 2, 2], vec![1.0, 2.5, 0.0, 4.0]).unwrap(),
            KernelGeometry {
                size: 5,
                interp: Interpolation::Bilinear,
            },
            None,
        )
        .unwrap();
        spec.positions.data_mut()[0] = -0.3;
        spec.positions.data_mut()[1] = 5.2;
        spec.clamp_positions();
        assert_eq!(spec.positions.data(), &[0.0, 4.0, 0.0, 4.0]);
    }

    #[test]
    fn clamp_raises_sigma_floor() {
        let mut s = -2.0f32;
        clamp_sigma(&mut s);
        assert_eq!(s, SIGMA_FLOOR);
    }

    #[test]
    fn zero_weight_has_zero_position_gradient() {
        let geom = KernelGeometry {
            size: 5,
            interp: Interpolation::Gaussian,
        };
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::new([1, 2], vec![0.0, 1.0]).unwrap());
        let p = tape.param(Tensor::new([1, 2, 2], vec![1.3, 2.2, 3.1, 0.4]).unwrap());
        let s = tape.param(Tensor::scalar(0.7));
        let k = tape.dcls_kernel(w, p, Some(s), geom).unwrap();
        let loss = tape.pick(k, 7).unwrap();
        tape.backward(loss).unwrap();
        let gp = tape.grad(p).unwrap();
        assert_eq!(&gp[..2], &[0.0, 0.0]);
        assert!(gp[2] != 0.0 || gp[3] != 0.0);
    }

    #[test]
    fn random_spec_is_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = DclsKernelSpec::random(8, 9, BILINEAR4, &mut rng).unwrap();
        assert!(spec.positions.data().iter().all(|&p| (0.0..=3.0).contains(&p)));
    }
}
