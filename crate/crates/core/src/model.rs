//! The differentiable-model interface that attribution methods and metrics target.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BackwardMode, Tape, Tensor, Var};

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// (batch, classes) pre-softmax scores.
    pub logits: Var,
    /// Convolutional stage activations, shallowest first.
    pub stages: Vec<Var>,
}

/// A classifier over (channels, height, width) images.
pub trait Model: Send + Sync {
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    /// Records a forward pass of an (n, c, h, w) batch with frozen parameters.
    fn forward(&self, tape: &mut Tape, input: Var) -> Result<Trace>;
}

/// Largest batch pushed through a single tape.
pub const MAX_BATCH: usize = 64;

fn check_batch(model: &dyn Model, batch: &Tensor) -> Result<usize> {
    let [c, h, w] = model.input_shape();
    let s = batch.shape();
    if s.len() != 4 || s[1..] != [c, h, w] {
        return Err(Error::shape(
            "predict",
            format!("batch {:?} does not match model input (n, {c}, {h}, {w})", s),
        ));
    }
    Ok(s[0])
}

fn chunks(batch: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
    let n = batch.shape()[0];
    let per: usize = batch.shape()[1..].iter().product();
    (0..n).step_by(MAX_BATCH).map(move |start| {
        let end = (start + MAX_BATCH).min(n);
        let mut shape = batch.shape().to_vec();
        shape[0] = end - start;
        Tensor::from_parts(shape, batch.data()[start * per..end * per].to_vec())
    })
}

/// (n, classes) logits for an (n, c, h, w) batch.
pub fn predict_logits(model: &dyn Model, batch: &Tensor) -> Result<Tensor> {
    let n = check_batch(model, batch)?;
    let k = model.num_classes();
    let mut out = Vec::with_capacity(n * k);
    for chunk in chunks(batch) {
        let mut tape = Tape::new();
        let x = tape.constant(chunk);
        let trace = model.forward(&mut tape, x)?;
        out.extend_from_slice(tape.value(trace.logits).data());
    }
    Tensor::new([n, k], out)
}

/// Logit of `class` for a single (c, h, w) input.
pub fn predict_class_score(model: &dyn Model, x: &Tensor, class: usize) -> Result<f32> {
    Ok(class_scores(model, &single(x)?, class)?[0])
}

/// Logit of `class` for each row of a batch.
pub fn class_scores(model: &dyn Model, batch: &Tensor, class: usize) -> Result<Vec<f32>> {
    check_class(model, class)?;
    let logits = predict_logits(model, batch)?;
    let k = model.num_classes();
    Ok(logits.data().chunks(k).map(|row| row[class]).collect())
}

/// Index of the largest logit per row.
pub fn predict_classes(model: &dyn Model, batch: &Tensor) -> Result<Vec<usize>> {
    let logits = predict_logits(model, batch)?;
    Ok(logits.data().chunks(model.num_classes()).map(argmax).collect())
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub(crate) fn check_class(model: &dyn Model, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::invalid(format!(
            "class index {class} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

/// Adds a leading batch axis to a (c, h, w) image.
pub fn single(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.reshape(shape)
}

/// Gradient of `Σ_n logit[n, class]` with respect to each input row, plus the logits.
pub fn input_gradients(
    model: &dyn Model,
    batch: &Tensor,
    class: usize,
    mode: BackwardMode<'_>,
) -> Result<(Tensor, Vec<f32>)> {
    check_class(model, class)?;
    let n = check_batch(model, batch)?;
    let mut grads = Vec::with_capacity(batch.len());
    let mut scores = Vec::with_capacity(n);
    for chunk in chunks(batch) {
        let rows = chunk.shape()[0];
        let mut tape = Tape::new();
        let x = tape.leaf(chunk);
        let trace = model.forward(&mut tape, x)?;
        let picked = tape.select_columns(trace.logits, vec![class; rows])?;
        scores.extend_from_slice(tape.value(picked).data());
        if matches!(mode, BackwardMode::Guided) && !tape.contains_tracked(crate::tensor::OpKind::Relu) {
            return Err(Error::Unsupported {
                method: "guided_backprop",
                reason: "model has no relu on the input-to-output path".into(),
            });
        }
        let g = tape.backward_from(picked, Tensor::full([rows], 1.0), mode)?;
        let gx = g.get_or_zeros(x, tape.value(x));
        if !gx.all_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        grads.extend_from_slice(gx.data());
    }
    Ok((Tensor::new(batch.shape().to_vec(), grads)?, scores))
}

/// Named parameter tensors of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// He-normal weight with the given fan-in.
    pub fn push_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng) as f32);
        self.push(name, t)
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape.to_vec()))
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// `logits = W · flatten(x) + b`; used as an analytic reference in tests and demos.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub shape: [usize; 3],
    /// (classes, c·h·w)
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LinearModel {
    pub fn new(shape: [usize; 3], weights: Tensor, bias: Tensor) -> Result<Self> {
        let d: usize = shape.iter().product();
        if weights.rank() != 2 || weights.shape()[1] != d || bias.shape() != [weights.shape()[0]] {
            return Err(Error::shape(
                "linear_model",
                format!("weights {:?}, bias {:?} for input {shape:?}", weights.shape(), bias.shape()),
            ));
        }
        Ok(LinearModel { shape, weights, bias })
    }
}

impl Model for LinearModel {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }
    fn forward(&self, tape: &mut Tape, input: Var) -> Result<Trace> {
        let n = tape.value(input).shape()[0];
        let d: usize = self.shape.iter().product();
        let flat = tape.reshape(input, [n, d])?;
        let w = tape.constant(self.weights.clone());
        let b = tape.constant(self.bias.clone());
        let logits = tape.dense(flat, w, b)?;
        Ok(Trace { logits, stages: Vec::new() })
    }
}
