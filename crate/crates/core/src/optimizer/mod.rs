//! Encoder-decoder that fuses baseline maps into a single explanation at
//! input resolution (LR) and at twice that resolution (HR).

mod loss;

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;

pub use loss::{composite_loss_grad, LossTarget, LossTerms, LossWeights};

use crate::attribution::{AttributionMap, PatchPartition};
use crate::classifier::{EarlyStopping, TrainSchedule};
use crate::error::{Error, Result};
use crate::metrics::{FaithfulnessConfig, PerturbationSet};
use crate::model::{Model, ParamSet};
use crate::rng::{self, streams, Rng};
use crate::tensor::checkpoint::TensorArchive;
use crate::tensor::{adam_step, AdamState, Tape, Tensor, Var};

pub const OPTIMIZER_LR_TAG: &str = "explanation_optimizer";
pub const OPTIMIZER_HR_TAG: &str = "explanation_optimizer_hr";

/// Two-level U-Net with a softplus 1×1 head at input resolution and a
/// softplus transposed-convolution head at twice the resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerNet {
    /// Channel order of the stacked input (method tags, Weighted Average last).
    pub channels: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    params: ParamSet,
    trained: bool,
}

/// LR and HR explanations for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationPair {
    pub lr: AttributionMap,
    pub hr: AttributionMap,
}

const HR_KERNEL: usize = 4;

impl OptimizerNet {
    /// `channels` names the K baseline maps followed by the Weighted Average.
    pub fn build(channels: Vec<String>, height: usize, width: usize, base_width: usize, seed: u64) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::invalid("the optimizer needs at least one method map plus the Weighted Average"));
        }
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!("input {height}x{width} must be divisible by 4")));
        }
        if base_width == 0 {
            return Err(Error::invalid("base width must be positive"));
        }
        let c = channels.len();
        let w = base_width;
        let mut rng = rng::stream(seed, streams::INIT);
        let mut p = ParamSet::default();
        let conv = |p: &mut ParamSet, name: &str, out: usize, inp: usize, k: usize, rng: &mut Rng| {
            p.push_he(format!("{name}.w"), &[out, inp, k, k], inp * k * k, rng);
            p.push_zeros(format!("{name}.b"), &[out]);
        };
        conv(&mut p, "enc1a", w, c, 3, &mut rng);
        conv(&mut p, "enc1b", w, w, 3, &mut rng);
        conv(&mut p, "enc2a", 2 * w, w, 3, &mut rng);
        conv(&mut p, "enc2b", 2 * w, 2 * w, 3, &mut rng);
        conv(&mut p, "mid", 4 * w, 2 * w, 3, &mut rng);
        conv(&mut p, "dec2", 2 * w, 6 * w, 3, &mut rng);
        conv(&mut p, "dec1", w, 3 * w, 3, &mut rng);
        conv(&mut p, "lr", 1, w, 1, &mut rng);
        let hr = p.push_he("hr.w", &[w + 1, 1, HR_KERNEL, HR_KERNEL], (w + 1) * 4, &mut rng);
        p.tensors[hr].data_mut().iter_mut().for_each(|v| *v *= 0.25);
        p.push_zeros("hr.b", &[1]);
        Ok(OptimizerNet {
            channels,
            height,
            width,
            base_width,
            params: p,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels.len(), self.height, self.width]
    }

    /// Records the forward pass of an (n, K+1, h, w) batch; returns the
    /// (n, 1, h, w) LR and (n, 1, 2h, 2w) HR outputs.
    pub fn forward_with(&self, tape: &mut Tape, input: Var, v: &[Var]) -> Result<(Var, Var)> {
        let conv = |tape: &mut Tape, x: Var, i: usize, pad: usize| -> Result<Var> {
            let y = tape.conv2d(x, v[2 * i], v[2 * i + 1], pad)?;
            tape.relu(y)
        };
        let e1 = conv(tape, input, 0, 1)?;
        let e1 = conv(tape, e1, 1, 1)?;
        let d = tape.avg_pool(e1, 2)?;
        let e2 = conv(tape, d, 2, 1)?;
        let e2 = conv(tape, e2, 3, 1)?;
        let d = tape.avg_pool(e2, 2)?;
        let m = conv(tape, d, 4, 1)?;
        let u = tape.upsample2x(m)?;
        let u = tape.concat_channels(&[u, e2])?;
        let d2 = conv(tape, u, 5, 1)?;
        let u = tape.upsample2x(d2)?;
        let u = tape.concat_channels(&[u, e1])?;
        let d1 = conv(tape, u, 6, 1)?;
        let lr = tape.conv2d(d1, v[14], v[15], 0)?;
        let lr = tape.softplus(lr)?;
        let h = tape.concat_channels(&[d1, lr])?;
        let hr = tape.transposed_conv2d(h, v[16], v[17], 2, 1)?;
        let hr = tape.softplus(hr)?;
        Ok((lr, hr))
    }

    /// LR and HR maps for a batch of stacked inputs.
    pub fn predict(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape() {
            return Err(Error::shape(
                "optimizer",
                format!("batch {:?} vs input (n, {:?})", s, self.input_shape()),
            ));
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let vars = self.params.bind(&mut tape, false);
        let (lr, hr) = self.forward_with(&mut tape, x, &vars)?;
        Ok((tape.value(lr).clone(), tape.value(hr).clone()))
    }
}

/// Stacks method maps followed by the Weighted Average, each min-max
/// normalized to `[0, 1]` (constant maps become zero).
pub fn stack_inputs(maps: &[&AttributionMap], wet: &AttributionMap) -> Result<Tensor> {
    let shape = wet.scores.shape();
    let mut data = Vec::with_capacity((maps.len() + 1) * wet.scores.len());
    for m in maps.iter().copied().chain(std::iter::once(wet)) {
        if m.scores.shape() != shape {
            return Err(Error::shape("stack_inputs", format!("{:?} vs {:?}", m.scores.shape(), shape)));
        }
        let lo = m.scores.min();
        let range = m.scores.max() - lo;
        if range > 0.0 && range.is_finite() {
            data.extend(m.scores.data().iter().map(|&v| (v - lo) / range));
        } else {
            data.extend(std::iter::repeat_n(0.0, m.scores.len()));
        }
    }
    Tensor::new([maps.len() + 1, shape[0], shape[1]], data)
}

/// Cubic convolution kernel with a = −0.5.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

fn cubic_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let out_len = 2 * len;
    let mut out = vec![0.0; outer * out_len * inner];
    for o in 0..out_len {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let base = src.floor() as i64;
        let taps: Vec<(usize, f64)> = (-1..=2)
            .map(|k| {
                let i = (base + k).clamp(0, len as i64 - 1) as usize;
                (i, cubic(src - (base + k) as f64))
            })
            .collect();
        for a in 0..outer {
            for b in 0..inner {
                let mut acc = 0.0;
                for &(i, w) in &taps {
                    acc += w * x[(a * len + i) * inner + b];
                }
                out[(a * out_len + o) * inner + b] = acc;
            }
        }
    }
    out
}

/// Bicubic 2× upsampling of an (h, w) map with clamped borders; negative
/// overshoot is clipped to zero.
pub fn upsample2x_reference(map: &Tensor) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::shape("upsample2x_reference", format!("expected (h, w), got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let x: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
    let rows = cubic_axis(&x, h, w, 1);
    let both = cubic_axis(&rows, 1, h, 2 * w);
    Tensor::new([2 * h, 2 * w], both.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Everything the optimizer needs about one instance, computed once.
#[derive(Clone, Debug)]
pub struct OptimizerSample {
    /// (K+1, h, w) stacked, normalized maps.
    pub input: Tensor,
    pub wet: Vec<f64>,
    pub wet_up: Vec<f64>,
    /// Perturbation pool with model output drops.
    pub pool: PerturbationSet,
    pub class: usize,
}

impl OptimizerSample {
    #[allow(clippy::too_many_arguments)]
    pub fn prepare(
        model: &dyn Model,
        x: &Tensor,
        class: usize,
        maps: &[&AttributionMap],
        wet: &AttributionMap,
        partition: &PatchPartition,
        faith: &FaithfulnessConfig,
        pool_size: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let input = stack_inputs(maps, wet)?;
        let pool_cfg = FaithfulnessConfig {
            perturbations: pool_size,
            ..faith.clone()
        };
        let pool = PerturbationSet::draw(model, x, class, partition, &pool_cfg, rng)?;
        Ok(OptimizerSample {
            input,
            wet: wet.scores.data().iter().map(|&v| v as f64).collect(),
            wet_up: upsample2x_reference(&wet.scores)?
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect(),
            pool,
            class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerTrainConfig {
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    /// Perturbation subsets drawn from the pool at every step.
    pub subsets_per_step: usize,
    /// Precomputed perturbations per training instance.
    pub pool_size: usize,
    pub base_width: usize,
}

impl Default for OptimizerTrainConfig {
    fn default() -> Self {
        OptimizerTrainConfig {
            schedule: TrainSchedule {
                learning_rate: 5e-3,
                max_epochs: 150,
                plateau_epochs: 150,
                decay_interval: 100,
                decay_factor: 0.1,
                patience: 10,
                patience_start: 90,
                batch_size: 16,
                seed: 0,
            },
            weights: LossWeights::default(),
            subsets_per_step: 16,
            pool_size: 128,
            base_width: 8,
        }
    }
}

/// One epoch of optimizer training.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Validation loss per target class (NaN when a class has no instances).
    pub val_loss_per_class: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizerOutcome {
    pub net: OptimizerNet,
    pub curves: Vec<OptimizerEpoch>,
    pub best_val_loss: f64,
    pub diverged_at: Option<usize>,
}

fn batch_inputs(samples: &[&OptimizerSample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>())
}

/// Mean loss over samples with every pool subset, plus per-sample totals.
pub fn evaluate_loss(
    net: &OptimizerNet,
    samples: &[OptimizerSample],
    partition: &PatchPartition,
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let mut totals = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(crate::model::MAX_BATCH) {
        let refs: Vec<&OptimizerSample> = chunk.iter().collect();
        let (lr, hr) = net.predict(&batch_inputs(&refs)?)?;
        let (lp, hp) = (lr.len() / chunk.len(), hr.len() / chunk.len());
        for (i, s) in chunk.iter().enumerate() {
            let target = LossTarget {
                wet: &s.wet,
                wet_up: &s.wet_up,
                pool: &s.pool,
                partition,
            };
            let l: Vec<f64> = lr.data()[i * lp..(i + 1) * lp].iter().map(|&v| v as f64).collect();
            let h: Vec<f64> = hr.data()[i * hp..(i + 1) * hp].iter().map(|&v| v as f64).collect();
            let all: Vec<usize> = (0..s.pool.subsets.len()).collect();
            totals.push(composite_loss_grad(&l, &h, &target, &all, weights).map_or(f64::INFINITY, |r| r.0.total));
        }
    }
    let mean = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
    Ok((mean, totals))
}

/// Adam on the composite loss; keeps the parameters with the lowest mean
/// validation loss.
pub fn train_optimizer(
    mut net: OptimizerNet,
    train: &[OptimizerSample],
    validation: &[OptimizerSample],
    partition: &PatchPartition,
    num_classes: usize,
    config: &OptimizerTrainConfig,
) -> Result<OptimizerOutcome> {
    let schedule = &config.schedule;
    schedule.validate()?;
    config.weights.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::invalid("optimizer training needs training and validation instances"));
    }
    if config.subsets_per_step < 3 {
        return Err(Error::invalid("at least 3 perturbation subsets per step are required"));
    }
    let mut params = net.params.tensors.clone();
    let mut adam = AdamState::new(&params, schedule.learning_rate);
    let mut stopper = EarlyStopping::new(schedule.patience, schedule.patience_start);
    let mut best = net.clone();
    let mut curves = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rng::stream(schedule.seed, streams::OPTIMIZER);
    let mut diverged_at = None;

    'epochs: for epoch in 0..schedule.max_epochs {
        let lr_now = schedule.learning_rate_at(epoch);
        adam.learning_rate = lr_now;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(schedule.batch_size) {
            let samples: Vec<&OptimizerSample> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_inputs(&samples)?);
            let vars = net.params.bind(&mut tape, true);
            let (lr, hr) = net.forward_with(&mut tape, x, &vars)?;
            let n = samples.len();
            let (lp, hp) = (tape.value(lr).len() / n, tape.value(hr).len() / n);
            let mut seed_lr = Vec::with_capacity(n * lp);
            let mut seed_hr = Vec::with_capacity(n * hp);
            for (i, s) in samples.iter().enumerate() {
                let l: Vec<f64> = tape.value(lr).data()[i * lp..(i + 1) * lp].iter().map(|&v| v as f64).collect();
                let h: Vec<f64> = tape.value(hr).data()[i * hp..(i + 1) * hp].iter().map(|&v| v as f64).collect();
                let k = config.subsets_per_step.min(s.pool.subsets.len());
                let picked = sample(&mut rng, s.pool.subsets.len(), k).into_vec();
                let target = LossTarget {
                    wet: &s.wet,
                    wet_up: &s.wet_up,
                    pool: &s.pool,
                    partition,
                };
                let Ok((terms, gl, gh)) = composite_loss_grad(&l, &h, &target, &picked, &config.weights) else {
                    // A collapsed (all-zero) map has no defined loss.
                    diverged_at = Some(epoch);
                    break 'epochs;
                };
                if !terms.total.is_finite() {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                loss_sum += terms.total;
                seed_lr.extend(gl.iter().map(|g| (g / n as f64) as f32));
                seed_hr.extend(gh.iter().map(|g| (g / n as f64) as f32));
            }
            // Linear surrogate whose gradient is the analytic loss gradient.
            let c_lr = tape.constant(Tensor::new(tape.value(lr).shape().to_vec(), seed_lr)?);
            let c_hr = tape.constant(Tensor::new(tape.value(hr).shape().to_vec(), seed_hr)?);
            let a = tape.mul(lr, c_lr)?;
            let a = tape.sum(a)?;
            let b = tape.mul(hr, c_hr)?;
            let b = tape.sum(b)?;
            let surrogate = tape.add(a, b)?;
            let grads = tape.backward(surrogate)?;
            let g: Vec<Tensor> = vars.iter().zip(&params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
            adam_step(&mut params, &g, &mut adam)?;
            if params.iter().any(|p| !p.all_finite()) {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            net.params.tensors.clone_from(&params);
        }
        let (val_loss, per_sample) = evaluate_loss(&net, validation, partition, &config.weights)?;
        if !val_loss.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
        let mut per_class = vec![(0.0, 0usize); num_classes];
        for (s, l) in validation.iter().zip(&per_sample) {
            if s.class < num_classes {
                per_class[s.class].0 += l;
                per_class[s.class].1 += 1;
            }
        }
        let record = OptimizerEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr: lr_now,
            val_loss_per_class: per_class
                .iter()
                .map(|&(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
                .collect(),
        };
        log::info!(
            "optimizer epoch {epoch}: train {:.4}, val {:.4}",
            record.train_loss,
            record.val_loss
        );
        curves.push(record);
        if stopper.observe(epoch, val_loss) {
            best = net.clone();
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }
    best.trained = true;
    Ok(OptimizerOutcome {
        net: best,
        curves,
        best_val_loss: stopper.best(),
        diverged_at,
    })
}

/// Runs `train_optimizer` for each learning rate and keeps the outcome with
/// the lowest validation loss.
pub fn train_over_learning_rates(
    net: &OptimizerNet,
    train: &[OptimizerSample],
    validation: &[OptimizerSample],
    partition: &PatchPartition,
    num_classes: usize,
    config: &OptimizerTrainConfig,
    learning_rates: &[f64],
) -> Result<(f64, OptimizerOutcome)> {
    let mut best: Option<(f64, OptimizerOutcome)> = None;
    for &lr in learning_rates {
        let mut cfg = config.clone();
        cfg.schedule.learning_rate = lr;
        let outcome = train_optimizer(net.clone(), train, validation, partition, num_classes, &cfg)?;
        log::info!("learning rate {lr:e}: best validation loss {:.5}", outcome.best_val_loss);
        if best.as_ref().is_none_or(|(_, b)| outcome.best_val_loss < b.best_val_loss) {
            best = Some((lr, outcome));
        }
    }
    best.ok_or_else(|| Error::invalid("empty learning-rate grid"))
}

/// Deterministic LR/HR explanation for one instance.
pub fn explain_optimal(net: &OptimizerNet, maps: &[&AttributionMap], wet: &AttributionMap) -> Result<ExplanationPair> {
    if !net.trained {
        log::warn!("explaining with an untrained optimizer network");
    }
    if maps.len() + 1 != net.channels.len() {
        return Err(Error::invalid(format!(
            "optimizer expects {} maps, got {}",
            net.channels.len() - 1,
            maps.len()
        )));
    }
    for (m, name) in maps.iter().zip(&net.channels) {
        if &m.method != name {
            return Err(Error::invalid(format!("channel order mismatch: expected {name}, got {}", m.method)));
        }
    }
    let input = stack_inputs(maps, wet)?;
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let (lr, hr) = net.predict(&input.reshape(shape)?)?;
    let (h, w) = (net.height, net.width);
    Ok(ExplanationPair {
        lr: AttributionMap::publish(OPTIMIZER_LR_TAG, wet.class, lr.reshape([h, w])?)?,
        hr: AttributionMap::publish(OPTIMIZER_HR_TAG, wet.class, hr.reshape([2 * h, 2 * w])?)?,
    })
}

const CHANNEL_PREFIX: &str = "meta.channel.";

impl OptimizerOutcome {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let net = &self.net;
        let mut a = TensorArchive::new();
        let shape = [net.height, net.width, net.base_width, net.trained as usize];
        a.push("meta.optimizer", Tensor::new([4], shape.iter().map(|&v| v as f32).collect())?);
        for (i, c) in net.channels.iter().enumerate() {
            a.push(format!("{CHANNEL_PREFIX}{i:03}.{c}"), Tensor::scalar(i as f32));
        }
        for (name, t) in net.params.names.iter().zip(&net.params.tensors) {
            a.push(format!("param.{name}"), t.clone());
        }
        if let Some(first) = self.curves.first() {
            let cols = 4 + first.val_loss_per_class.len();
            let data: Vec<f32> = self
                .curves
                .iter()
                .flat_map(|r| {
                    [r.epoch as f64, r.train_loss, r.val_loss, r.lr]
                        .into_iter()
                        .chain(r.val_loss_per_class.iter().copied())
                })
                .map(|v| v as f32)
                .collect();
            a.push("meta.curves", Tensor::new([self.curves.len(), cols], data)?);
        }
        a.push(
            "meta.metrics",
            Tensor::new(
                [2],
                vec![self.best_val_loss as f32, self.diverged_at.map_or(-1.0, |e| e as f32)],
            )?,
        );
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let m = a.require("meta.optimizer")?.data().to_vec();
        if m.len() != 4 {
            return Err(Error::format("XFTN", "meta.optimizer must hold 4 values"));
        }
        let mut channels: Vec<(usize, String)> = a
            .entries
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(CHANNEL_PREFIX))
            .filter_map(|rest| {
                let (i, tag) = rest.split_once('.')?;
                Some((i.parse().ok()?, tag.to_string()))
            })
            .collect();
        channels.sort();
        let channels: Vec<String> = channels.into_iter().map(|(_, t)| t).collect();
        let mut net = OptimizerNet::build(channels, m[0] as usize, m[1] as usize, m[2] as usize, 0)
            .map_err(|e| Error::format("XFTN", format!("optimizer metadata: {e}")))?;
        net.trained = m[3] != 0.0;
        for (name, t) in net.params.names.iter().zip(net.params.tensors.iter_mut()) {
            let stored = a.require(&format!("param.{name}"))?;
            if stored.shape() != t.shape() {
                return Err(Error::format("XFTN", format!("parameter {name} has shape {:?}", stored.shape())));
            }
            *t = stored.clone();
        }
        let curves = a
            .get("meta.curves")
            .map(|t| {
                let cols = t.shape()[1];
                t.data()
                    .chunks(cols)
                    .map(|r| OptimizerEpoch {
                        epoch: r[0] as usize,
                        train_loss: r[1] as f64,
                        val_loss: r[2] as f64,
                        lr: r[3] as f64,
                        val_loss_per_class: r[4..].iter().map(|&v| v as f64).collect(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let metrics = a.require("meta.metrics")?.data().to_vec();
        Ok(OptimizerOutcome {
            net,
            curves,
            best_val_loss: metrics[0] as f64,
            diverged_at: (metrics[1] >= 0.0).then_some(metrics[1] as usize),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        OptimizerOutcome::from_archive(&TensorArchive::load(path)?)
    }

    /// Per-class loss curves: epoch, class, val_loss, plus overall train/val loss.
    pub fn write_curves_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "class", "train_loss", "val_loss", "class_val_loss", "lr"])?;
        for r in &self.curves {
            for (c, l) in r.val_loss_per_class.iter().enumerate() {
                w.write_record([
                    r.epoch.to_string(),
                    c.to_string(),
                    r.train_loss.to_string(),
                    r.val_loss.to_string(),
                    l.to_string(),
                    r.lr.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::file(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::map_similarity;
    use crate::model::LinearModel;

    fn channels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("m{i}")).chain(["weighted_average".to_string()]).collect()
    }

    #[test]
    fn output_shapes_and_positivity() {
        let net = OptimizerNet::build(channels(8), 8, 12, 4, 1).unwrap();
        let x = Tensor::from_fn([2, 9, 8, 12], |i| (i as f32 * 0.01).sin().abs());
        let (lr, hr) = net.predict(&x).unwrap();
        assert_eq!(lr.shape(), &[2, 1, 8, 12]);
        assert_eq!(hr.shape(), &[2, 1, 16, 24]);
        assert!(lr.data().iter().chain(hr.data()).all(|&v| v > 0.0));
        assert!(OptimizerNet::build(channels(8), 10, 12, 4, 1).is_err());
    }

    fn map(tag: &str, v: Tensor) -> AttributionMap {
        AttributionMap::publish(tag, 0, v).unwrap()
    }

    #[test]
    fn stacking_normalizes_channels() {
        let a = map("a", Tensor::from_fn([2, 2], |i| i as f32 * 3.0));
        let z = map("z", Tensor::zeros([2, 2]));
        let wet = map("weighted_average", Tensor::full([2, 2], 2.0));
        let s = stack_inputs(&[&a, &z], &wet).unwrap();
        assert_eq!(s.shape(), &[3, 2, 2]);
        assert_eq!(&s.data()[..4], &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(s.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bicubic_reference_contracts() {
        let c = Tensor::full([4, 6], 0.7);
        let up = upsample2x_reference(&c).unwrap();
        assert_eq!(up.shape(), &[8, 12]);
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let smooth = Tensor::from_fn([16, 16], |i| {
            let (y, x) = ((i / 16) as f32, (i % 16) as f32);
            1.0 + (y * 0.3).sin() * (x * 0.2).cos()
        });
        let up = upsample2x_reference(&smooth).unwrap();
        let mut err = 0.0f64;
        for y in 0..16 {
            for x in 0..16 {
                let d: f32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| up.data()[(2 * y + a) * 32 + 2 * x + b])
                    .sum::<f32>()
                    / 4.0;
                err += ((d - smooth.data()[y * 16 + x]) as f64).powi(2);
            }
        }
        let rms = (err / 256.0).sqrt();
        let norm = (smooth.data().iter().map(|&v| (v * v) as f64).sum::<f64>() / 256.0).sqrt();
        assert!(rms < 0.05 * norm, "{rms}");
    }

    fn toy_samples(n: usize, seed: u64) -> (Vec<OptimizerSample>, PatchPartition, LinearModel) {
        let mut rng = rng::stream(seed, 0);
        let part = PatchPartition::new(4, 4, 8, 8).unwrap();
        let w = Tensor::from_fn([2, 64], |i| ((i * 37 % 11) as f32 - 5.0) / 5.0);
        let model = LinearModel::new([1, 8, 8], w, Tensor::zeros([2])).unwrap();
        let samples = (0..n)
            .map(|i| {
                let x = Tensor::from_fn([1, 8, 8], |p| ((p + i * 7) % 13) as f32 / 13.0);
                let a = map("m0", Tensor::from_fn([8, 8], |p| ((p * 3 + i) % 8) as f32));
                let b = map("m1", Tensor::from_fn([8, 8], |p| ((p + 5 * i) % 5) as f32));
                let wet = map("weighted_average", Tensor::from_fn([8, 8], |p| (p / 8 + p % 8) as f32 / 14.0 + 0.1));
                let faith = FaithfulnessConfig::default();
                OptimizerSample::prepare(&model, &x, i % 2, &[&a, &b], &wet, &part, &faith, 32, &mut rng).unwrap()
            })
            .collect();
        (samples, part, model)
    }

    fn quick_config(weights: LossWeights, epochs: usize) -> OptimizerTrainConfig {
        let mut cfg = OptimizerTrainConfig {
            weights,
            ..Default::default()
        };
        cfg.schedule.max_epochs = epochs;
        cfg.schedule.patience = epochs;
        cfg.schedule.patience_start = epochs;
        cfg.schedule.batch_size = 4;
        cfg.schedule.learning_rate = 5e-3;
        cfg.base_width = 4;
        cfg
    }

    #[test]
    fn similarity_only_training_reaches_high_ssim_and_round_trips() {
        let (samples, part, _) = toy_samples(8, 3);
        let net = OptimizerNet::build(channels(2), 8, 8, 4, 2).unwrap();
        let w = LossWeights {
            l1: 0.0,
            l2: 0.0,
            l3: 1.0,
            ..Default::default()
        };
        let out = train_optimizer(net, &samples, &samples, &part, 2, &quick_config(w, 60)).unwrap();
        assert!(out.net.is_trained());
        for s in &samples {
            let mut shape = vec![1];
            shape.extend_from_slice(s.input.shape());
            let (lr, hr) = out.net.predict(&s.input.reshape(shape).unwrap()).unwrap();
            let wet = Tensor::new([8, 8], s.wet.iter().map(|&v| v as f32).collect()).unwrap();
            let up = Tensor::new([16, 16], s.wet_up.iter().map(|&v| v as f32).collect()).unwrap();
            assert!(map_similarity(&lr.reshape([8, 8]).unwrap(), &wet).unwrap() >= 0.95);
            assert!(map_similarity(&hr.reshape([16, 16]).unwrap(), &up).unwrap() >= 0.95);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("opt.xftn");
        out.save(&p).unwrap();
        let back = OptimizerOutcome::load(&p).unwrap();
        assert_eq!(back.net, out.net);
        assert_eq!(back.curves.len(), out.curves.len());
    }

    #[test]
    fn complexity_only_training_lowers_complexity() {
        let (samples, part, _) = toy_samples(6, 5);
        let net = OptimizerNet::build(channels(2), 8, 8, 4, 4).unwrap();
        let w = LossWeights {
            l1: 0.0,
            l2: 1.0,
            l3: 0.0,
            ..Default::default()
        };
        let out = train_optimizer(net, &samples, &samples, &part, 2, &quick_config(w, 15)).unwrap();
        let losses: Vec<f64> = out.curves.iter().map(|c| c.val_loss).collect();
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    }

    #[test]
    fn explain_checks_channel_order_and_is_deterministic() {
        let net = OptimizerNet::build(channels(2), 8, 8, 4, 9).unwrap();
        let a = map("m0", Tensor::from_fn([8, 8], |p| p as f32));
        let b = map("m1", Tensor::from_fn([8, 8], |p| (64 - p) as f32));
        let wet = map("weighted_average", Tensor::full([8, 8], 1.0));
        let p1 = explain_optimal(&net, &[&a, &b], &wet).unwrap();
        let p2 = explain_optimal(&net, &[&a, &b], &wet).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.hr.scores.shape(), &[16, 16]);
        assert!(explain_optimal(&net, &[&b, &a], &wet).is_err());
    }
}
