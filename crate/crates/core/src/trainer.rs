//! Joint optimisation of the enabled experts, schedule, ensemble inference and evaluation.

use std::f64::consts::PI;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::config::TrainConfig;
use crate::dataset::{PreparedData, PreparedSample, Split};
use crate::error::{Error, Result};
use crate::model::{count_flops_params, Batch, IPayModel, Stream};
use crate::report::{EvalReport, GateRecord};
use crate::scalar::Scalar;
use crate::skeleton::augment;
use crate::tensor::Tensor;

/// Sum over streams of the batch-mean cross-entropy.
pub fn joint_loss<T: Scalar>(tape: &mut Tape<'_, T>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    assert!(!logits.is_empty(), "at least one stream");
    let mut total = None;
    for &l in logits {
        let s = tape.shape(l).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!("logits {s:?} for {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(Error::LabelOutOfRange { label, classes: s[1] });
        }
        let ce = tape.cross_entropy(l, labels);
        total = Some(match total {
            Some(t) => tape.add(t, ce),
            None => ce,
        });
    }
    Ok(total.unwrap())
}

/// Argmax of the summed logits; ties go to the lowest class index.
pub fn ensemble_predict<T: Scalar>(streams: &[&[T]]) -> usize {
    let c = streams[0].len();
    let sum: Vec<T> = (0..c).map(|k| streams.iter().fold(T::zero(), |acc, s| acc + s[k])).collect();
    argmax(&sum)
}

pub fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Learning rate at fractional epoch `epoch`: linear warm-up, cosine decay
/// to the floor, then step decay at each passed milestone.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let (peak, floor) = (cfg.peak_lr, cfg.cosine_floor);
    if epoch < cfg.warmup_epochs {
        return peak * epoch / cfg.warmup_epochs;
    }
    if epoch < cfg.cosine_end_epoch {
        let phase = (epoch - cfg.warmup_epochs) / (cfg.cosine_end_epoch - cfg.warmup_epochs);
        return floor + (peak - floor) * 0.5 * (1.0 + (PI * phase).cos());
    }
    let drops = cfg.step_milestones.iter().filter(|&&m| epoch >= m).count();
    floor * cfg.step_gamma.powi(drops as i32)
}

/// SGD with momentum, L2 weight decay and optional global-norm clipping.
pub struct Sgd<T> {
    velocity: Vec<Tensor<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let velocity = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { velocity, momentum: cfg.momentum, weight_decay: cfg.weight_decay, grad_clip: cfg.grad_clip }
    }

    /// Applies one update; parameters without a gradient only decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: Vec<Option<Tensor<T>>>, lr: f64) {
        let scale = if self.grad_clip > 0.0 {
            let sq: f64 = grads.iter().flatten().flat_map(|g| g.data().iter()).map(|v| v.as_f64().powi(2)).sum();
            let norm = sq.sqrt();
            if norm > self.grad_clip { self.grad_clip / norm } else { 1.0 }
        } else {
            1.0
        };
        let (lr, mu, wd, scale) = (T::of(lr), T::of(self.momentum), T::of(self.weight_decay), T::of(scale));
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let p = params.get_mut(id);
            let v = &mut self.velocity[id.0];
            let pd = p.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i] * scale) + wd * pd[i];
                vd[i] = mu * vd[i] + gi;
                pd[i] -= lr * vd[i];
            }
        }
    }
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent seed for `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ b)
}

/// Stacks samples into a batch, augmenting skeletons when `aug` carries `(shift, rotation)` limits.
pub fn make_batch<T: Scalar>(
    samples: &[&PreparedSample<T>],
    with_rgb: bool,
    aug: Option<(f64, f64, u64)>,
    workers: usize,
) -> Result<Batch<T>> {
    let first = samples[0].skeleton.tensor().shape().to_vec();
    if let Some(s) = samples.iter().find(|s| s.skeleton.tensor().shape() != first.as_slice()) {
        return Err(Error::shape(format!("sample {} has skeleton {:?}, batch expects {first:?}", s.id, s.skeleton.tensor().shape())));
    }
    let prep = |(i, s): (usize, &&PreparedSample<T>)| match aug {
        Some((shift, rot, seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0));
            augment(&s.skeleton, shift, rot, &mut rng).into_tensor().into_data()
        }
        None => s.skeleton.tensor().data().to_vec(),
    };
    let parts: Vec<Vec<T>> = if workers > 1 && aug.is_some() {
        samples.par_iter().enumerate().map(prep).collect()
    } else {
        samples.iter().enumerate().map(prep).collect()
    };
    let mut shape = vec![samples.len()];
    shape.extend(&first);
    let skeleton = Tensor::from_vec(shape, parts.concat());
    let rgb = if with_rgb {
        let r0 = samples[0].rgb.as_ref().ok_or_else(|| Error::shape("sample lacks an RGB mosaic"))?;
        let mut shape = vec![samples.len()];
        shape.extend(r0.shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for s in samples {
            let r = s.rgb.as_ref().ok_or_else(|| Error::shape("sample lacks an RGB mosaic"))?;
            data.extend_from_slice(r.data());
        }
        Some(Tensor::from_vec(shape, data))
    } else {
        None
    };
    Ok(Batch { skeleton, rgb, labels: samples.iter().map(|s| s.label).collect() })
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean joint loss over the epoch's batches.
    pub loss: f64,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    /// Ensemble accuracy on the (augmented) training batches, in percent.
    pub train_accuracy: f64,
}

/// Trains `model` on the training split of `data`. `on_epoch` sees every log as it is produced.
pub fn train<T: Scalar>(
    model: &mut IPayModel<T>,
    data: &PreparedData<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &IPayModel<T>),
) -> Result<Vec<EpochLog>> {
    let train: Vec<&PreparedSample<T>> = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Manifest("training split is empty".into()));
    }
    model.rgb_stats = data.stats;
    let seed = model.config.seed;
    let shift = model.config.data.shift_frac;
    let rot = model.config.data.rot_max_deg.to_radians();
    let with_rgb = model.needs_rgb();
    let mut sgd = Sgd::new(&model.params, cfg);
    let steps = train.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, 1)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at(epoch as f64 + step as f64 / steps as f64, cfg);
            let aug_seed = derive_seed(seed, epoch as u64, 2 + step as u64);
            let batch = make_batch(chunk, with_rgb, Some((shift, rot, aug_seed)), cfg.workers)?;
            let grads = {
                let mut tape = Tape::new(&model.params);
                let out = model.forward(&mut tape, &batch)?;
                let logits: Vec<Var> = out.logits.iter().map(|&(_, v)| v).collect();
                let loss = joint_loss(&mut tape, &logits, &batch.labels)?;
                loss_sum += tape.value(loss).data()[0].as_f64();
                correct += predictions(&tape, &logits).iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
                tape.backward(loss).into_param_grads()
            };
            sgd.step(&mut model.params, grads, lr);
        }
        let log = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / steps as f64,
            lr: lr_at(epoch as f64, cfg),
            train_accuracy: 100.0 * correct as f64 / train.len() as f64,
        };
        info!("epoch {:>3}  loss {:.4}  lr {:.5}  train acc {:.1}%", log.epoch, log.loss, log.lr, log.train_accuracy);
        on_epoch(&log, model);
        history.push(log);
    }
    Ok(history)
}

fn predictions<T: Scalar>(tape: &Tape<'_, T>, logits: &[Var]) -> Vec<usize> {
    let vals: Vec<&Tensor<T>> = logits.iter().map(|&v| tape.value(v)).collect();
    let (n, c) = (vals[0].shape()[0], vals[0].shape()[1]);
    (0..n)
        .map(|i| {
            let rows: Vec<&[T]> = vals.iter().map(|t| &t.data()[i * c..(i + 1) * c]).collect();
            ensemble_predict(&rows)
        })
        .collect()
}

/// Per-sample outputs of an evaluation pass.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub ensemble: Vec<usize>,
    /// `(stream, logits row per sample)`.
    pub stream_logits: Vec<(Stream, Vec<Vec<f64>>)>,
    pub gates: Vec<[f64; 2]>,
}

/// Runs the model over `samples` without augmentation.
pub fn predict<T: Scalar>(model: &IPayModel<T>, samples: &[&PreparedSample<T>], batch_size: usize) -> Result<Predictions> {
    let streams = model.streams();
    let mut p = Predictions {
        ids: Vec::new(),
        labels: Vec::new(),
        ensemble: Vec::new(),
        stream_logits: streams.iter().map(|&s| (s, Vec::new())).collect(),
        gates: Vec::new(),
    };
    let fixed = model.fusion.as_ref().and_then(|f| f.fixed_gates());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, model.needs_rgb(), None, 1)?;
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &batch)?;
        let logits: Vec<Var> = out.logits.iter().map(|&(_, v)| v).collect();
        p.ensemble.extend(predictions(&tape, &logits));
        for ((_, rows), &v) in p.stream_logits.iter_mut().zip(&logits) {
            let t = tape.value(v);
            rows.extend(t.data().chunks(t.shape()[1]).map(|r| r.iter().map(|x| x.as_f64()).collect()));
        }
        if let Some(g) = out.fusion.as_ref().and_then(|f| f.gates) {
            p.gates.extend(tape.value(g).data().chunks(2).map(|r| [r[0].as_f64(), r[1].as_f64()]));
        } else if let Some(g) = fixed {
            p.gates.extend(std::iter::repeat_n(g, chunk.len()));
        }
        p.ids.extend(chunk.iter().map(|s| s.id.clone()));
        p.labels.extend(&batch.labels);
    }
    Ok(p)
}

/// Evaluates the model on one split and builds the report.
pub fn evaluate<T: Scalar>(model: &IPayModel<T>, data: &PreparedData<T>, split: Split, batch_size: usize) -> Result<EvalReport> {
    let samples = data.split(split);
    let p = predict(model, &samples, batch_size)?;
    let (flops, params) = count_flops_params(&model.config, &model.base_layout)?;
    let mut report = EvalReport::from_predictions(&data.class_names, &p.labels, &p.ensemble, flops, params);
    for (s, rows) in &p.stream_logits {
        let preds: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
        let correct = preds.iter().zip(&p.labels).filter(|(a, b)| a == b).count();
        let acc = if p.labels.is_empty() { 0.0 } else { 100.0 * correct as f64 / p.labels.len() as f64 };
        report.stream_accuracy.insert(s.to_string(), acc);
    }
    report.gates = p.ids.iter().zip(&p.gates).map(|(id, g)| GateRecord { id: id.clone(), g_s: g[0], g_r: g[1] }).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0.0, &c), 0.0);
        assert!((lr_at(5.0, &c) - 0.06).abs() < 1e-15);
        assert!((lr_at(4.999_999, &c) - 0.06).abs() < 1e-7);
        let mid = (c.warmup_epochs + c.cosine_end_epoch) / 2.0;
        assert!((lr_at(mid, &c) - (c.cosine_floor + 0.5 * (0.06 - c.cosine_floor))).abs() < 1e-15);
        assert!((lr_at(75.0, &c) - c.cosine_floor * 0.01).abs() < 1e-15);
    }

    #[test]
    fn hand_summed_ensemble() {
        let s: [&[f64]; 4] = [&[2.0, 0.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.4, 0.0]];
        assert_eq!(ensemble_predict(&s), 0);
        assert_eq!(ensemble_predict::<f64>(&[&[1.0, 1.0, 0.0]]), 0);
    }
}
