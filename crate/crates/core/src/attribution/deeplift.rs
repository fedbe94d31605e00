use crate::error::{Error, Result};
use crate::model::{check_class, Model, MAX_BATCH};
use crate::tensor::{BackwardMode, Tape, Tensor};

/// DeepLift contributions with the rescale rule against one reference input,
/// shape (c, h, w). Contributions sum to `f(x) − f(baseline)`.
pub fn deeplift_rescale(model: &dyn Model, x: &Tensor, class: usize, baseline: &Tensor) -> Result<Tensor> {
    deeplift_shap(model, x, class, std::slice::from_ref(baseline))
}

/// Mean of rescale contributions over several references, shape (c, h, w).
pub fn deeplift_shap(model: &dyn Model, x: &Tensor, class: usize, baselines: &[Tensor]) -> Result<Tensor> {
    check_class(model, class)?;
    if x.shape() != model.input_shape() {
        return Err(Error::shape(
            "deeplift",
            format!("input {:?} vs model input {:?}", x.shape(), model.input_shape()),
        ));
    }
    if baselines.is_empty() {
        return Err(Error::invalid("deeplift needs at least one baseline"));
    }
    let per = x.len();
    let mut acc = vec![0.0f64; per];
    for chunk in baselines.chunks(MAX_BATCH) {
        for b in chunk {
            if b.shape() != x.shape() {
                return Err(Error::shape("deeplift", format!("baseline {:?} vs input {:?}", b.shape(), x.shape())));
            }
        }
        let n = chunk.len();
        let inputs = Tensor::stack(&vec![x.clone(); n])?;
        let refs = Tensor::stack(chunk)?;
        let multipliers = rescale_multipliers(model, inputs, refs, class)?;
        for (m, b) in multipliers.data().chunks(per).zip(chunk) {
            for (((a, &mv), &xv), &bv) in acc.iter_mut().zip(m).zip(x.data()).zip(b.data()) {
                *a += mv as f64 * (xv as f64 - bv as f64);
            }
        }
    }
    let n = baselines.len() as f64;
    Ok(Tensor::from_parts(x.shape().to_vec(), acc.iter().map(|a| (a / n) as f32).collect()))
}

fn rescale_multipliers(model: &dyn Model, inputs: Tensor, refs: Tensor, class: usize) -> Result<Tensor> {
    let n = inputs.shape()[0];
    let record = |batch: Tensor| -> Result<_> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let trace = model.forward(&mut tape, x)?;
        let out = tape.select_columns(trace.logits, vec![class; n])?;
        Ok((tape, x, out))
    };
    let (tape, x, out) = record(inputs)?;
    let (reference, _, _) = record(refs)?;
    let grads = tape.backward_from(out, Tensor::full([n], 1.0), BackwardMode::Rescale(&reference))?;
    let m = grads.get_or_zeros(x, tape.value(x));
    if !m.all_finite() {
        return Err(Error::NonFinite("deeplift multipliers".into()));
    }
    Ok(m)
}
