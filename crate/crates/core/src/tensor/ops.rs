use super::tape::Op;
use super::{Element, Result, Tape, Tensor, TensorError, Var};

fn expect_rank<E: Element>(t: &Tensor<E>, rank: usize, op: &'static str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn expect_scalar<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<E> {
    if t.numel() != 1 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a scalar parameter, got shape {:?}", t.shape()),
        });
    }
    Ok(t.data()[0])
}

/// Log-sum-exp stabilised softmax of one row, in f64.
fn softmax_row<E: Element>(row: &[E]) -> Vec<f64> {
    let max = row.iter().map(|v| v.to_acc()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.to_acc() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<E: Element> Tape<E> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect();
        let out = Tensor::from_parts(xt.shape().to_vec(), data);
        self.push(out, Op::Relu { input: x })
    }

    /// `scale * relu(x)^2 + bias` with scalar learnable `scale` and `bias`.
    pub fn star_relu(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let s = expect_scalar(self.value(scale), "star_relu")?.to_acc();
        let b = expect_scalar(self.value(bias), "star_relu")?.to_acc();
        let xt = self.value(x);
        let data = xt
            .data()
            .iter()
            .map(|&v| {
                let r = v.to_acc().max(0.0);
                E::from_acc(s * r * r + b)
            })
            .collect();
        let out = Tensor::from_parts(xt.shape().to_vec(), data);
        self.push(
            out,
            Op::StarRelu {
                input: x,
                scale,
                bias,
            },
        )
    }

    /// Adds `bias[c]` to every spatial element of channel `c` of an NCHW tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let bt = self.value(bias);
        expect_rank(xt, 4, "channel_bias")?;
        let [n, c, h, w] = [xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]];
        if bt.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                left: xt.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let mut data = xt.data().to_vec();
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let b = bt.data()[ci];
                let start = (ni * c + ci) * plane;
                data[start..start + plane].iter_mut().for_each(|v| *v = *v + b);
            }
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), data);
        self.push(out, Op::ChannelBias { input: x, bias })
    }

    /// NCHW -> NC mean over the `Z = H*W` spatial elements.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        expect_rank(xt, 4, "global_avg_pool")?;
        let [n, c, h, w] = [xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]];
        let z = h * w;
        let data = xt
            .data()
            .chunks_exact(z)
            .map(|plane| E::from_acc(plane.iter().map(|v| v.to_acc()).sum::<f64>() / z as f64))
            .collect();
        let out = Tensor::from_parts(vec![n, c], data);
        self.push(out, Op::GlobalAvgPool { input: x })
    }

    /// `x [N,in] @ weight[out,in]^T + bias[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(weight);
        let bt = self.value(bias);
        expect_rank(xt, 2, "linear")?;
        expect_rank(wt, 2, "linear")?;
        let (n, fin) = (xt.shape()[0], xt.shape()[1]);
        let (fout, win) = (wt.shape()[0], wt.shape()[1]);
        if win != fin || bt.numel() != fout {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: xt.shape().to_vec(),
                right: wt.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * fout);
        for row in xt.data().chunks_exact(fin) {
            for (o, wrow) in wt.data().chunks_exact(fin).enumerate() {
                let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a.to_acc() * b.to_acc()).sum();
                data.push(E::from_acc(dot + bt.data()[o].to_acc()));
            }
        }
        let out = Tensor::from_parts(vec![n, fout], data);
        self.push(out, Op::Linear { input: x, weight, bias })
    }

    /// Mean softmax cross-entropy of `logits [N,C]` against one label per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        expect_rank(lt, 2, "softmax_cross_entropy")?;
        let (n, c) = (lt.shape()[0], lt.shape()[1]);
        if labels.len() != n {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &label) in lt.data().chunks_exact(c).zip(labels) {
            let max = row.iter().map(|v| v.to_acc()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.to_acc() - max).exp()).sum::<f64>().ln();
            loss += lse - row[label].to_acc();
            probs.extend(softmax_row(row));
        }
        let out = Tensor::scalar(E::from_acc(loss / n as f64));
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Scalar view of one flat element.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xt = self.value(x);
        if index >= xt.numel() {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                msg: format!("index {index} out of range for shape {:?}", xt.shape()),
            });
        }
        let out = Tensor::scalar(xt.data()[index]);
        self.push(out, Op::Pick { input: x, index })
    }

    /// Same elements under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { input: x })
    }

    /// Softmax probability of class `index` for single-row logits `[1,C]`.
    pub fn softmax_pick(&mut self, logits: Var, index: usize) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape().len() != 2 || lt.shape()[0] != 1 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_pick",
                msg: format!("expected [1, C] logits, got {:?}", lt.shape()),
            });
        }
        if index >= lt.numel() {
            return Err(TensorError::LabelOutOfRange {
                label: index,
                classes: lt.numel(),
            });
        }
        let probs = softmax_row(lt.data());
        let out = Tensor::scalar(E::from_acc(probs[index]));
        self.push(
            out,
            Op::SoftmaxPick {
                input: logits,
                index,
                probs,
            },
        )
    }
}

pub(super) fn relu_backward<E: Element>(tape: &Tape<E>, x: Var, up: &[E]) -> Vec<(Var, Vec<E>)> {
    let g = tape
        .value(x)
        .data()
        .iter()
        .zip(up)
        .map(|(&v, &u)| if v > E::zero() { u } else { E::zero() })
        .collect();
    vec![(x, g)]
}

pub(super) fn star_relu_backward<E: Element>(
    tape: &Tape<E>,
    x: Var,
    scale: Var,
    bias: Var,
    up: &[E],
) -> Vec<(Var, Vec<E>)> {
    let s = tape.value(scale).data()[0].to_acc();
    let xs = tape.value(x).data();
    let mut out = Vec::with_capacity(3);
    if tape.wants(x) {
        let gx = xs
            .iter()
            .zip(up)
            .map(|(&v, &u)| E::from_acc(u.to_acc() * 2.0 * s * v.to_acc().max(0.0)))
            .collect();
        out.push((x, gx));
    }
    if tape.wants(scale) {
        let gs: f64 = xs
            .iter()
            .zip(up)
            .map(|(&v, &u)| {
                let r = v.to_acc().max(0.0);
                u.to_acc() * r * r
            })
            .sum();
        out.push((scale, vec![E::from_acc(gs)]));
    }
    if tape.wants(bias) {
        let gb: f64 = up.iter().map(|u| u.to_acc()).sum();
        out.push((bias, vec![E::from_acc(gb)]));
    }
    out
}

pub(super) fn channel_bias_backward<E: Element>(
    tape: &Tape<E>,
    x: Var,
    bias: Var,
    up: &[E],
) -> Vec<(Var, Vec<E>)> {
    let shape = tape.value(x).shape();
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let mut out = Vec::with_capacity(2);
    if tape.wants(x) {
        out.push((x, up.to_vec()));
    }
    if tape.wants(bias) {
        let mut acc = vec![0.0f64; c];
        for (i, chunk) in up.chunks_exact(plane).enumerate() {
            acc[i % c] += chunk.iter().map(|v| v.to_acc()).sum::<f64>();
        }
        out.push((bias, acc.into_iter().map(E::from_acc).collect()));
    }
    out
}

pub(super) fn gap_backward<E: Element>(tape: &Tape<E>, x: Var, up: &[E]) -> Vec<(Var, Vec<E>)> {
    let shape = tape.value(x).shape();
    let z = shape[2] * shape[3];
    let inv = 1.0 / z as f64;
    let mut g = Vec::with_capacity(tape.value(x).numel());
    for &u in up {
        let v = E::from_acc(u.to_acc() * inv);
        g.extend(std::iter::repeat_n(v, z));
    }
    vec![(x, g)]
}

pub(super) fn linear_backward<E: Element>(
    tape: &Tape<E>,
    x: Var,
    weight: Var,
    bias: Var,
    up: &[E],
) -> Vec<(Var, Vec<E>)> {
    let xt = tape.value(x);
    let wt = tape.value(weight);
    let (n, fin) = (xt.shape()[0], xt.shape()[1]);
    let fout = wt.shape()[0];
    let mut out = Vec::with_capacity(3);
    if tape.wants(x) {
        let mut gx = vec![0.0f64; n * fin];
        for ni in 0..n {
            for o in 0..fout {
                let u = up[ni * fout + o].to_acc();
                let wrow = &wt.data()[o * fin..(o + 1) * fin];
                gx[ni * fin..(ni + 1) * fin]
                    .iter_mut()
                    .zip(wrow)
                    .for_each(|(g, w)| *g += u * w.to_acc());
            }
        }
        out.push((x, gx.into_iter().map(E::from_acc).collect()));
    }
    if tape.wants(weight) {
        let mut gw = vec![0.0f64; fout * fin];
        for ni in 0..n {
            let row = &xt.data()[ni * fin..(ni + 1) * fin];
            for o in 0..fout {
                let u = up[ni * fout + o].to_acc();
                gw[o * fin..(o + 1) * fin]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(g, v)| *g += u * v.to_acc());
            }
        }
        out.push((weight, gw.into_iter().map(E::from_acc).collect()));
    }
    if tape.wants(bias) {
        let gb = (0..fout)
            .map(|o| E::from_acc((0..n).map(|ni| up[ni * fout + o].to_acc()).sum()))
            .collect();
        out.push((bias, gb));
    }
    out
}

pub(super) fn ce_backward<E: Element>(
    logits: Var,
    labels: &[usize],
    probs: &[f64],
    up: &[E],
) -> Vec<(Var, Vec<E>)> {
    let n = labels.len();
    let c = probs.len() / n;
    let scale = up[0].to_acc() / n as f64;
    let mut g: Vec<E> = probs.iter().map(|&p| E::from_acc(p * scale)).collect();
    for (i, &label) in labels.iter().enumerate() {
        g[i * c + label] = E::from_acc((probs[i * c + label] - 1.0) * scale);
    }
    vec![(logits, g)]
}

pub(super) fn softmax_pick_backward<E: Element>(
    logits: Var,
    index: usize,
    probs: &[f64],
    up: &[E],
) -> Vec<(Var, Vec<E>)> {
    let u = up[0].to_acc();
    let pk = probs[index];
    let g = probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let d = if j == index { pk * (1.0 - pk) } else { -pk * pj };
            E::from_acc(u * d)
        })
        .collect();
    vec![(logits, g)]
}
