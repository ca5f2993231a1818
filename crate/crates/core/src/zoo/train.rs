use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, ParamId, ParamMode, Result, TrainConfig, ZooError};
use crate::exec::Exec;
use crate::tensor::{Tape, Tensor, TensorError};

/// One labelled image, `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_top1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_top1\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.6},{:.4}", e.epoch, e.loss, e.train_top1);
        }
        out
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub correct: usize,
}

fn batch_input(image: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
    let s = image.shape();
    match s.len() {
        4 => Ok(image.clone()),
        3 => image.clone().reshape([1, s[0], s[1], s[2]]),
        _ => Err(TensorError::InvalidArgument {
            op: "predict",
            msg: format!("expected a [C,H,W] image, got {s:?}"),
        }),
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Class scores (logits) for one `[C,H,W]` image.
pub fn predict(model: &Model, image: &Tensor<f32>) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let x = tape.constant(batch_input(image)?);
    let fw = model.forward(&mut tape, x, ParamMode::Frozen, false)?;
    Ok(tape.value(fw.logits).data().to_vec())
}

/// Fraction of examples whose argmax score equals the label.
pub fn top1(model: &Model, data: &[Example], exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(ZooError::EmptyDataset);
    }
    let hits = exec.map(data, |ex| predict(model, &ex.image).map(|s| argmax(&s) == ex.label));
    let mut correct = 0;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

struct ImageGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Vec<f32>>>,
}

fn image_grad(model: &Model, ex: &Example) -> Result<ImageGrad, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(batch_input(&ex.image)?);
    let fw = model.forward(&mut tape, x, ParamMode::Trainable, false).map_err(|e| match e {
        ZooError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "forward",
            msg: other.to_string(),
        },
    })?;
    let correct = argmax(tape.value(fw.logits).data()) == ex.label;
    let loss = tape.softmax_cross_entropy(fw.logits, &[ex.label])?;
    let loss_value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    let grads = fw.params.iter().map(|p| tape.grad(*p).map(<[f32]>::to_vec)).collect();
    Ok(ImageGrad {
        loss: loss_value,
        correct,
        grads,
    })
}

/// Plain (optionally momentum) SGD over per-image tapes. Per-image
/// gradients are reduced in batch order, so results do not depend on the
/// execution strategy.
pub struct Trainer<'a> {
    model: &'a mut Model,
    config: TrainConfig,
    exec: Exec,
    step: usize,
    lr_scale: Vec<f32>,
    velocity: Vec<Vec<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, config: &TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let n = model.params().len();
        let mut lr_scale = vec![1.0; n];
        for ParamId(i) in model.position_params() {
            lr_scale[i] = config.pos_lr_mult;
        }
        let velocity = if config.momentum > 0.0 {
            model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            model,
            config: config.clone(),
            exec,
            step: 0,
            lr_scale,
            velocity,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One SGD update on `batch`; positions are clamped afterwards.
    pub fn step(&mut self, batch: &[&Example]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(ZooError::EmptyDataset);
        }
        let step = self.step;
        let diverged = |reason: String| ZooError::Divergence { step, reason };
        let model: &Model = self.model;
        let results = self.exec.map(batch, |ex| image_grad(model, ex));

        let mut sums: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let (mut loss, mut correct) = (0.0, 0);
        for r in results {
            let g = match r {
                Ok(g) => g,
                Err(e @ TensorError::NonFinite { .. }) => return Err(diverged(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            loss += g.loss;
            correct += g.correct as usize;
            for (acc, grad) in sums.iter_mut().zip(&g.grads) {
                if let Some(grad) = grad {
                    for (a, v) in acc.iter_mut().zip(grad) {
                        *a += *v as f64;
                    }
                }
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }

        let lr = self.config.lr;
        let mu = self.config.momentum;
        let store = self.model.params_mut();
        for (i, acc) in sums.iter().enumerate() {
            let rate = lr * self.lr_scale[i];
            let t = store.get_mut(ParamId(i));
            if mu > 0.0 {
                let vel = &mut self.velocity[i];
                for ((p, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(acc) {
                    *v = mu * *v + (*g / n) as f32;
                    *p -= rate * *v;
                }
            } else {
                for (p, g) in t.data_mut().iter_mut().zip(acc) {
                    *p -= rate * (*g / n) as f32;
                }
            }
            if let Some(bad) = t.data().iter().position(|v| !v.is_finite()) {
                let name = store.name(ParamId(i)).to_string();
                return Err(diverged(format!("parameter {name}[{bad}] became non-finite")));
            }
        }
        self.model.clamp_dcls();
        self.step += 1;
        Ok(StepStats { step, loss, correct })
    }

    /// Runs all configured epochs; the batch order is drawn from the seed.
    pub fn fit(&mut self, data: &[Example]) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(ZooError::EmptyDataset);
        }
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        order_rng.set_stream(0xba7c);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = TrainLog::default();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut order_rng);
            let (mut loss, mut correct) = (0.0, 0);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
                let s = self.step(&batch)?;
                loss += s.loss * batch.len() as f64;
                correct += s.correct;
            }
            log.epochs.push(EpochStats {
                epoch: epoch + 1,
                loss: loss / data.len() as f64,
                train_top1: correct as f64 / data.len() as f64,
            });
        }
        Ok(log)
    }
}
