//! Compact residual CNN whose predictions every explanation targets.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{augment, batch_pixels, AugmentConfig, DatasetSplit, ImageRecord};
use crate::error::{Error, Result};
use crate::model::{predict_classes, predict_logits, Model, ParamSet, Trace};
use crate::rng::{self, streams};
use crate::tensor::checkpoint::TensorArchive;
use crate::tensor::{adam_step, AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    /// Residual blocks; every block after the first halves the resolution.
    pub blocks: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_shape: [3, 32, 32],
            blocks: 2,
            width: 8,
            classes: 3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("class count {} < 2", self.classes)));
        }
        if self.width < 4 {
            return Err(Error::invalid(format!("width {} < 4", self.width)));
        }
        if self.blocks == 0 {
            return Err(Error::invalid("at least one residual block is required"));
        }
        let [c, h, w] = self.input_shape;
        let factor = 1usize << (self.blocks - 1);
        if c == 0 || h < 2 * factor || w < 2 * factor || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} too small for {} downsampling stages",
                self.blocks - 1
            )));
        }
        Ok(())
    }

    fn stage_width(&self, stage: usize) -> usize {
        self.width << stage.min(3)
    }
}

/// Learning-rate schedule and early stopping for classifier training.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs at the initial rate before the first decay.
    pub plateau_epochs: usize,
    /// Epochs between successive decays after the plateau.
    pub decay_interval: usize,
    /// Multiplicative factor applied at every decay.
    pub decay_factor: f64,
    /// Consecutive non-improving validation epochs tolerated.
    pub patience: usize,
    /// Epochs before early stopping may trigger.
    pub patience_start: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            learning_rate: 1e-2,
            max_epochs: 30,
            plateau_epochs: 18,
            decay_interval: 6,
            decay_factor: 0.1,
            patience: 5,
            patience_start: 0,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!("decay factor {} outside (0, 1]", self.decay_factor)));
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.decay_interval == 0 {
            return Err(Error::invalid("learning rate, batch size and decay interval must be positive"));
        }
        Ok(())
    }

    /// Rate for zero-based `epoch`: constant through the plateau, then
    /// multiplied by `decay_factor` every `decay_interval` epochs.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.plateau_epochs {
            self.learning_rate
        } else {
            let decays = (epoch - self.plateau_epochs) / self.decay_interval + 1;
            self.learning_rate * self.decay_factor.powi(decays as i32)
        }
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    start: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, start: usize) -> Self {
        EarlyStopping {
            patience,
            start,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records `loss` for `epoch`; returns true when it improved on the best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.start && self.stale > self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    params: ParamSet,
}

// Parameter layout per stage: [proj.w, proj.b]? conv1.w, conv1.b, conv2.w, conv2.b
#[derive(Clone, Debug)]
struct Layout {
    stem: (usize, usize),
    stages: Vec<Stage>,
    head: (usize, usize),
}

#[derive(Clone, Debug)]
struct Stage {
    proj: Option<(usize, usize)>,
    conv1: (usize, usize),
    conv2: (usize, usize),
}

impl Classifier {
    /// Residual CNN: stem conv, `blocks` residual blocks (average-pool
    /// downsampling and a projection conv between stages), global average
    /// pool, dense logits.
    pub fn build(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, streams::INIT);
        let mut p = ParamSet::default();
        let c = config.input_shape[0];
        let w0 = config.stage_width(0);
        p.push_he("stem.w", &[w0, c, 3, 3], c * 9, &mut rng);
        p.push_zeros("stem.b", &[w0]);
        let mut prev = w0;
        for s in 0..config.blocks {
            let ch = config.stage_width(s);
            if s > 0 {
                p.push_he(format!("stage{s}.proj.w"), &[ch, prev, 3, 3], prev * 9, &mut rng);
                p.push_zeros(format!("stage{s}.proj.b"), &[ch]);
            }
            p.push_he(format!("stage{s}.conv1.w"), &[ch, ch, 3, 3], ch * 9, &mut rng);
            p.push_zeros(format!("stage{s}.conv1.b"), &[ch]);
            let i = p.push_he(format!("stage{s}.conv2.w"), &[ch, ch, 3, 3], ch * 9, &mut rng);
            // Start residual branches near identity.
            p.tensors[i].data_mut().iter_mut().for_each(|v| *v *= 0.5);
            p.push_zeros(format!("stage{s}.conv2.b"), &[ch]);
            prev = ch;
        }
        let i = p.push_he("head.w", &[config.classes, prev], prev, &mut rng);
        p.tensors[i].data_mut().iter_mut().for_each(|v| *v *= 0.5);
        p.push_zeros("head.b", &[config.classes]);
        Ok(Classifier {
            config: config.clone(),
            params: p,
        })
    }

    pub fn from_params(config: &ClassifierConfig, params: ParamSet) -> Result<Self> {
        let reference = Classifier::build(config, 0)?;
        if reference.params.names != params.names
            || reference
                .params
                .tensors
                .iter()
                .zip(&params.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("parameter names or shapes do not match the config"));
        }
        Ok(Classifier {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn layout(&self) -> Layout {
        let mut i = 0;
        let mut next = || {
            i += 2;
            (i - 2, i - 1)
        };
        let stem = next();
        let stages = (0..self.config.blocks)
            .map(|s| Stage {
                proj: (s > 0).then(&mut next),
                conv1: next(),
                conv2: next(),
            })
            .collect();
        let head = next();
        Layout { stem, stages, head }
    }

    /// Forward pass with parameters already bound to `vars`.
    pub fn forward_with(&self, tape: &mut Tape, input: Var, vars: &[Var]) -> Result<Trace> {
        let layout = self.layout();
        let conv = |tape: &mut Tape, x: Var, (w, b): (usize, usize)| tape.conv2d(x, vars[w], vars[b], 1);
        let mut x = conv(tape, input, layout.stem)?;
        x = tape.relu(x)?;
        let mut stages = Vec::with_capacity(layout.stages.len());
        for stage in &layout.stages {
            if let Some(proj) = stage.proj {
                x = tape.avg_pool(x, 2)?;
                x = conv(tape, x, proj)?;
                x = tape.relu(x)?;
            }
            let h = conv(tape, x, stage.conv1)?;
            let h = tape.relu(h)?;
            let h = conv(tape, h, stage.conv2)?;
            let sum = tape.add(x, h)?;
            x = tape.relu(sum)?;
            stages.push(x);
        }
        let pooled = tape.global_avg_pool(x)?;
        let shape = tape.value(pooled).shape().to_vec();
        let flat = tape.reshape(pooled, [shape[0], shape[1]])?;
        let logits = tape.dense(flat, vars[layout.head.0], vars[layout.head.1])?;
        Ok(Trace { logits, stages })
    }
}

impl Model for Classifier {
    fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn forward(&self, tape: &mut Tape, input: Var) -> Result<Trace> {
        let vars = self.params.bind(tape, false);
        self.forward_with(tape, input, &vars)
    }
}

/// Trained classifier with its training history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Classifier,
    pub curves: Vec<EpochRecord>,
    pub test_accuracy: Option<f64>,
    /// Epoch at which a non-finite loss aborted training.
    pub diverged_at: Option<usize>,
}

/// Mean cross-entropy and accuracy over `records`.
pub fn evaluate(model: &Classifier, records: &[ImageRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in records.chunks(crate::model::MAX_BATCH) {
        let refs: Vec<&ImageRecord> = chunk.iter().collect();
        let batch = batch_pixels(&refs)?;
        let logits = predict_logits(model, &batch)?;
        let k = model.num_classes();
        for (row, r) in logits.data().chunks(k).zip(chunk) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            loss += lse - row[r.label] as f64;
            if crate::model::argmax(row) == r.label {
                correct += 1;
            }
        }
    }
    Ok((loss / records.len() as f64, correct as f64 / records.len() as f64))
}

pub fn accuracy(model: &Classifier, records: &[ImageRecord]) -> Result<f64> {
    let refs: Vec<&ImageRecord> = records.iter().collect();
    let batch = batch_pixels(&refs)?;
    let pred = predict_classes(model, &batch)?;
    Ok(pred.iter().zip(records).filter(|(p, r)| **p == r.label).count() as f64 / records.len() as f64)
}

/// Adam on softmax cross-entropy with the schedule's learning-rate decay and
/// early stopping on validation loss; the best-validation parameters are kept.
pub fn train_classifier(
    model: Classifier,
    split: &DatasetSplit,
    schedule: &TrainSchedule,
    augmentation: &AugmentConfig,
) -> Result<Checkpoint> {
    schedule.validate()?;
    augmentation.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    if split.num_classes() != model.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model expects {}",
            split.num_classes(),
            model.num_classes()
        )));
    }
    let mut params = model.params.tensors.clone();
    let mut current = model.clone();
    let mut best = model;
    let mut adam = AdamState::new(&params, schedule.learning_rate);
    let mut stopper = EarlyStopping::new(schedule.patience, schedule.patience_start);
    let mut curves = Vec::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut aug_rng = rng::stream(schedule.seed, streams::AUGMENT);
    let mut diverged_at = None;

    'epochs: for epoch in 0..schedule.max_epochs {
        let lr = schedule.learning_rate_at(epoch);
        adam.learning_rate = lr;
        order.shuffle(&mut rng::stream(schedule.seed, streams::BATCHES + ((epoch as u64) << 8)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(schedule.batch_size) {
            let recs: Vec<ImageRecord> = idx
                .iter()
                .map(|&i| augment(&split.train[i], augmentation, &mut aug_rng))
                .collect();
            let refs: Vec<&ImageRecord> = recs.iter().collect();
            let labels: Vec<usize> = recs.iter().map(|r| r.label).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_pixels(&refs)?);
            let vars = current.params.bind(&mut tape, true);
            let trace = current.forward_with(&mut tape, x, &vars)?;
            let loss = tape.softmax_cross_entropy(trace.logits, labels.clone())?;
            let lv = tape.value(loss).item()? as f64;
            if !lv.is_finite() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            let k = current.num_classes();
            correct += tape
                .value(trace.logits)
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| crate::model::argmax(row) == l)
                .count();
            loss_sum += lv * idx.len() as f64;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars
                .iter()
                .zip(&params)
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            adam_step(&mut params, &g, &mut adam)?;
            if params.iter().any(|p| !p.all_finite()) {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            current.params.tensors.clone_from(&params);
        }
        let (val_loss, val_acc) = evaluate(&current, &split.validation)?;
        if !val_loss.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
        let n = split.train.len() as f64;
        curves.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            train_acc: correct as f64 / n,
            val_acc,
            lr,
        });
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {val_loss:.4} acc {val_acc:.3}",
            loss_sum / n,
            correct as f64 / n
        );
        if stopper.observe(epoch, val_loss) {
            best = current.clone();
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }
    let test_accuracy = if split.test.is_empty() {
        None
    } else {
        Some(accuracy(&best, &split.test)?)
    };
    Ok(Checkpoint {
        model: best,
        curves,
        test_accuracy,
        diverged_at,
    })
}

const CURVE_COLUMNS: usize = 6;

impl Checkpoint {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let c = &self.model.config;
        let mut a = TensorArchive::new();
        let cfg = [c.input_shape[0], c.input_shape[1], c.input_shape[2], c.blocks, c.width, c.classes];
        a.push("meta.config", Tensor::new([6], cfg.iter().map(|&v| v as f32).collect())?);
        for (name, t) in self.model.params.names.iter().zip(&self.model.params.tensors) {
            a.push(format!("param.{name}"), t.clone());
        }
        if !self.curves.is_empty() {
            let rows: Vec<f32> = self
                .curves
                .iter()
                .flat_map(|r| [r.epoch as f64, r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.lr])
                .map(|v| v as f32)
                .collect();
            a.push("meta.curves", Tensor::new([self.curves.len(), CURVE_COLUMNS], rows)?);
        }
        let metrics = [
            self.test_accuracy.unwrap_or(f64::NAN) as f32,
            self.diverged_at.map_or(-1.0, |e| e as f32),
        ];
        a.push("meta.metrics", Tensor::new([2], metrics.to_vec())?);
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let cfg = a.require("meta.config")?;
        if cfg.len() != 6 {
            return Err(Error::format("XFTN", "meta.config must hold 6 values"));
        }
        let v: Vec<usize> = cfg.data().iter().map(|&x| x as usize).collect();
        let config = ClassifierConfig {
            input_shape: [v[0], v[1], v[2]],
            blocks: v[3],
            width: v[4],
            classes: v[5],
        };
        let mut params = ParamSet::default();
        for (name, t) in &a.entries {
            if let Some(n) = name.strip_prefix("param.") {
                params.push(n, t.clone());
            }
        }
        let model = Classifier::from_params(&config, params)
            .map_err(|e| Error::format("XFTN", format!("checkpoint parameters: {e}")))?;
        let curves = a
            .get("meta.curves")
            .map(|t| {
                t.data()
                    .chunks(CURVE_COLUMNS)
                    .map(|r| EpochRecord {
                        epoch: r[0] as usize,
                        train_loss: r[1] as f64,
                        val_loss: r[2] as f64,
                        train_acc: r[3] as f64,
                        val_acc: r[4] as f64,
                        lr: r[5] as f64,
                    })
                    .collect()
            })
            .unwrap_or_default();
        let m = a.require("meta.metrics")?.data().to_vec();
        Ok(Checkpoint {
            model,
            curves,
            test_accuracy: m.first().filter(|v| v.is_finite()).map(|&v| v as f64),
            diverged_at: m.get(1).filter(|v| **v >= 0.0).map(|&v| v as usize),
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    checkpoint.to_archive()?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_archive(&TensorArchive::load(path)?)
}

/// Training curve CSV: epoch, train_loss, val_loss, train_acc, val_acc, lr.
pub fn write_curves_csv(curves: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e))?;
    for r in curves {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesConfig};
    use crate::model::{predict_class_score, single};

    fn tiny() -> ClassifierConfig {
        ClassifierConfig {
            input_shape: [3, 16, 16],
            blocks: 2,
            width: 4,
            classes: 3,
        }
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let m = Classifier::build(&tiny(), 1).unwrap();
        let batch = Tensor::from_fn([5, 3, 16, 16], |i| ((i * 13) % 7) as f32 / 7.0);
        assert_eq!(predict_logits(&m, &batch).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a = Classifier::build(&tiny(), 1).unwrap();
        let b = Classifier::build(&tiny(), 99).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        // stem 4·3·9+4, stage0 2·(4·4·9+4), stage1 proj 8·4·9+8 and 2·(8·8·9+8), head 3·8+3
        assert_eq!(a.parameter_count(), 112 + 296 + 296 + 1168 + 27);
    }

    #[test]
    fn too_small_input_rejected() {
        let mut c = tiny();
        c.input_shape = [3, 4, 4];
        c.blocks = 4;
        assert!(Classifier::build(&c, 0).is_err());
    }

    #[test]
    fn class_score_matches_logits_and_batch_rows_are_independent() {
        let m = Classifier::build(&tiny(), 2).unwrap();
        let x = Tensor::from_fn([3, 16, 16], |i| (i as f32 * 0.01).sin().abs());
        let y = x.map(|v| 1.0 - v);
        let batch = Tensor::stack(&[x.clone(), y.clone(), x.clone()]).unwrap();
        let logits = predict_logits(&m, &batch).unwrap();
        let d = logits.data();
        assert_eq!(&d[0..3], &d[6..9]);
        for c in 0..3 {
            assert_eq!(predict_class_score(&m, &x, c).unwrap(), d[c]);
        }
        let alone = predict_logits(&m, &single(&y).unwrap()).unwrap();
        assert_eq!(alone.data(), &d[3..6]);
        assert!(predict_class_score(&m, &x, 3).is_err());
        for row in d.chunks(3) {
            let mx = row.iter().copied().fold(f32::MIN, f32::max);
            let s: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
            let p: f64 = row.iter().map(|&v| ((v - mx) as f64).exp() / s).sum();
            assert!((p - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_trace_is_exact() {
        let s = TrainSchedule {
            learning_rate: 1e-2,
            max_epochs: 500,
            plateau_epochs: 300,
            decay_interval: 100,
            decay_factor: 0.1,
            ..Default::default()
        };
        assert_eq!(s.learning_rate_at(0), 1e-2);
        assert_eq!(s.learning_rate_at(299), 1e-2);
        assert_eq!(s.learning_rate_at(300), 1e-2 * 0.1);
        assert_eq!(s.learning_rate_at(399), 1e-2 * 0.1);
        assert_eq!(s.learning_rate_at(400), 1e-2 * 0.1f64.powi(2));
    }

    #[test]
    fn zero_patience_stops_after_first_non_improving_epoch() {
        let mut e = EarlyStopping::new(0, 0);
        assert!(e.observe(0, 1.0));
        assert!(!e.should_stop(0));
        assert!(!e.observe(1, 1.5));
        assert!(e.should_stop(1));
    }

    #[test]
    fn short_training_run_and_checkpoint_round_trip() {
        let split = generate_shapes(&ShapesConfig {
            image_size: 16,
            classes: 3,
            per_class: 20,
            noise: 0.05,
            seed: 5,
        })
        .unwrap();
        let m = Classifier::build(&tiny(), 3).unwrap();
        let schedule = TrainSchedule {
            max_epochs: 3,
            patience: 0,
            batch_size: 8,
            ..Default::default()
        };
        let ck = train_classifier(m, &split, &schedule, &AugmentConfig::identity()).unwrap();
        assert!(!ck.curves.is_empty() && ck.curves.len() <= 3);
        let mut best = f64::INFINITY;
        for r in &ck.curves {
            best = best.min(r.val_loss);
        }
        assert!(ck.diverged_at.is_none());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.xftn");
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.model, ck.model);
        let batch = batch_pixels(&split.test.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(
            predict_logits(&back.model, &batch).unwrap(),
            predict_logits(&ck.model, &batch).unwrap()
        );

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("more bytes"));
    }
}
