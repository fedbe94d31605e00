use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{check_class, input_gradients, single, Model};
use crate::rng::Rng;
use crate::tensor::{kernels, BackwardMode, Tape, Tensor};

use super::{add_noise, channel_sum};

fn check_input(model: &dyn Model, x: &Tensor) -> Result<()> {
    if x.shape() != model.input_shape() {
        return Err(Error::shape(
            "attribution",
            format!("input {:?} vs model input {:?}", x.shape(), model.input_shape()),
        ));
    }
    Ok(())
}

/// Signed gradient of the class logit with respect to `x`, shape (c, h, w).
/// Published saliency is the channel sum of its magnitude.
pub fn saliency(model: &dyn Model, x: &Tensor, class: usize) -> Result<Tensor> {
    check_input(model, x)?;
    let (g, _) = input_gradients(model, &single(x)?, class, BackwardMode::Standard)?;
    g.reshape(x.shape().to_vec())
}

/// `(x − x₀) ⊙ mean_k ∇f(x₀ + (k/steps)(x − x₀))` for `k = 0..steps`
/// (left Riemann sum), shape (c, h, w).
pub fn integrated_gradients(model: &dyn Model, x: &Tensor, class: usize, steps: usize, baseline: &Tensor) -> Result<Tensor> {
    check_input(model, x)?;
    if steps < 8 {
        return Err(Error::invalid(format!("integrated gradients needs >= 8 steps, got {steps}")));
    }
    if baseline.shape() != x.shape() {
        return Err(Error::shape("integrated_gradients", format!("baseline {:?} vs input {:?}", baseline.shape(), x.shape())));
    }
    let delta = x.zip_map(baseline, |a, b| a - b)?;
    let path: Vec<Tensor> = (0..steps)
        .map(|k| {
            let alpha = k as f32 / steps as f32;
            baseline.zip_map(&delta, |b, d| b + alpha * d)
        })
        .collect::<Result<_>>()?;
    let (g, _) = input_gradients(model, &Tensor::stack(&path)?, class, BackwardMode::Standard)?;
    let mean = mean_rows(&g, steps);
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        mean.iter().zip(delta.data()).map(|(m, &d)| (m * d as f64) as f32).collect(),
    ))
}

fn mean_rows(batch: &Tensor, rows: usize) -> Vec<f64> {
    let per = batch.len() / rows;
    let mut acc = vec![0.0f64; per];
    for row in batch.data().chunks(per) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
    }
    acc.iter_mut().for_each(|a| *a /= rows as f64);
    acc
}

/// Expected gradients over noisy inputs: for each baseline `b`, the input is
/// perturbed with `N(0, sigma²)` noise, `steps` points are drawn uniformly on
/// the segment from `b` to the noisy input, and their gradients times
/// `(noisy − b)` are averaged. Shape (c, h, w).
pub fn gradient_shap(
    model: &dyn Model,
    x: &Tensor,
    class: usize,
    baselines: &[Tensor],
    sigma: f64,
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    check_input(model, x)?;
    if baselines.is_empty() || steps == 0 {
        return Err(Error::invalid("gradient shap needs at least one baseline and one step"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma {sigma} must be >= 0")));
    }
    let mut points = Vec::with_capacity(baselines.len() * steps);
    let mut deltas = Vec::with_capacity(baselines.len() * steps);
    for b in baselines {
        if b.shape() != x.shape() {
            return Err(Error::shape("gradient_shap", format!("baseline {:?} vs input {:?}", b.shape(), x.shape())));
        }
        let noisy = add_noise(x, sigma, rng);
        let delta = noisy.zip_map(b, |a, c| a - c)?;
        for _ in 0..steps {
            let alpha: f32 = rng.random();
            points.push(b.zip_map(&delta, |c, d| c + alpha * d)?);
            deltas.push(delta.clone());
        }
    }
    let (g, _) = input_gradients(model, &Tensor::stack(&points)?, class, BackwardMode::Standard)?;
    let per = x.len();
    let mut acc = vec![0.0f64; per];
    for (grow, d) in g.data().chunks(per).zip(&deltas) {
        for ((a, &gv), &dv) in acc.iter_mut().zip(grow).zip(d.data()) {
            *a += gv as f64 * dv as f64;
        }
    }
    let n = points.len() as f64;
    Ok(Tensor::from_parts(x.shape().to_vec(), acc.iter().map(|a| (a / n) as f32).collect()))
}

/// Input gradient with relu gates that also block negative upstream
/// gradient, shape (c, h, w).
pub fn guided_backprop(model: &dyn Model, x: &Tensor, class: usize) -> Result<Tensor> {
    check_input(model, x)?;
    let (g, _) = input_gradients(model, &single(x)?, class, BackwardMode::Guided)?;
    g.reshape(x.shape().to_vec())
}

/// `relu(Σ_c α_c A_c)` at stage `layer` (default: last), with `α_c` the
/// spatial mean gradient, bilinearly resized to the input resolution.
pub fn grad_cam(model: &dyn Model, x: &Tensor, class: usize, layer: Option<usize>) -> Result<Tensor> {
    check_input(model, x)?;
    check_class(model, class)?;
    let mut tape = Tape::new();
    let input = tape.leaf(single(x)?);
    let trace = model.forward(&mut tape, input)?;
    if trace.stages.is_empty() {
        return Err(Error::Unsupported {
            method: "grad_cam",
            reason: "model exposes no convolutional stages".into(),
        });
    }
    let layer = layer.unwrap_or(trace.stages.len() - 1);
    let stage = *trace.stages.get(layer).ok_or_else(|| {
        Error::invalid(format!("grad-cam layer {layer} out of range for {} stages", trace.stages.len()))
    })?;
    let picked = tape.select_columns(trace.logits, vec![class])?;
    let grads = tape.backward_from(picked, Tensor::full([1], 1.0), BackwardMode::Standard)?;
    let a = tape.value(stage);
    let g = grads.get_or_zeros(stage, a);
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::shape("grad_cam", format!("stage activation must be (1, c, h, w), got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    for ch in 0..c {
        let gs = &g.data()[ch * plane..(ch + 1) * plane];
        let alpha = gs.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for (o, &av) in cam.iter_mut().zip(&a.data()[ch * plane..(ch + 1) * plane]) {
            *o += alpha * av as f64;
        }
    }
    let cam: Vec<f32> = cam.iter().map(|&v| v.max(0.0) as f32).collect();
    let [_, ih, iw] = model.input_shape();
    let up = if (h, w) == (ih, iw) {
        cam
    } else {
        kernels::resample_forward(&cam, &[h, w], &[ih, iw])
    };
    if up.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grad-cam map".into()));
    }
    Tensor::new([ih, iw], up.into_iter().map(|v| v.max(0.0)).collect())
}

/// Positive part of the channel-summed guided gradient times the Grad-CAM map.
pub fn guided_grad_cam(model: &dyn Model, x: &Tensor, class: usize, layer: Option<usize>) -> Result<Tensor> {
    let guided = channel_sum(&guided_backprop(model, x, class)?)?;
    let cam = grad_cam(model, x, class, layer)?;
    guided.zip_map(&cam, |g, c| g.max(0.0) * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_class_score, LinearModel};
    use crate::model::{ParamSet, Trace};
    use crate::tensor::Var;

    fn linear(c: usize, h: usize, w: usize, seed: u64) -> LinearModel {
        let d = c * h * w;
        let mut rng = crate::rng::stream(seed, 0);
        let weights = Tensor::from_fn([2, d], |_| rng.random_range(-1.0..1.0));
        LinearModel::new([c, h, w], weights, Tensor::new([2], vec![0.3, -0.2]).unwrap()).unwrap()
    }

    /// relu(conv(x)) → gap → dense, with a recorded stage.
    struct TinyCnn {
        params: ParamSet,
    }

    impl TinyCnn {
        fn new(seed: u64) -> Self {
            let mut rng = crate::rng::stream(seed, 0);
            let mut params = ParamSet::default();
            params.push_he("w", &[2, 1, 3, 3], 9, &mut rng);
            params.push("b", Tensor::new([2], vec![0.05, -0.05]).unwrap());
            params.push_he("hw", &[2, 2], 2, &mut rng);
            params.push_zeros("hb", &[2]);
            TinyCnn { params }
        }
    }

    impl Model for TinyCnn {
        fn input_shape(&self) -> [usize; 3] {
            [1, 4, 4]
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn forward(&self, tape: &mut Tape, input: Var) -> Result<Trace> {
            let v = self.params.bind(tape, false);
            let h = tape.conv2d(input, v[0], v[1], 1)?;
            let a = tape.relu(h)?;
            let p = tape.global_avg_pool(a)?;
            let n = tape.value(p).shape()[0];
            let f = tape.reshape(p, [n, 2])?;
            let logits = tape.dense(f, v[2], v[3])?;
            Ok(Trace { logits, stages: vec![a] })
        }
    }

    #[test]
    fn saliency_of_linear_model_is_weight_magnitude() {
        let m = linear(2, 3, 3, 1);
        let x = Tensor::from_fn([2, 3, 3], |i| i as f32 * 0.1);
        let g = saliency(&m, &x, 1).unwrap();
        assert_eq!(g.data(), &m.weights.data()[18..36]);
        let map = super::super::channel_abs_sum(&g).unwrap();
        let w = m.weights.data();
        assert!((map[0] - (w[18].abs() + w[27].abs())).abs() < 1e-6);
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let m = TinyCnn::new(3);
        let x = Tensor::from_fn([1, 4, 4], |i| ((i * 7) % 5) as f32 * 0.2 - 0.3);
        let g = saliency(&m, &x, 0).unwrap();
        let h = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (predict_class_score(&m, &xp, 0).unwrap() - predict_class_score(&m, &xm, 0).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-3, "pixel {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn integrated_gradients_on_linear_model_is_exact() {
        let m = linear(1, 4, 4, 2);
        let x = Tensor::from_fn([1, 4, 4], |i| 1.0 - i as f32 * 0.05);
        let ig = integrated_gradients(&m, &x, 0, 16, &Tensor::zeros([1, 4, 4])).unwrap();
        for i in 0..16 {
            assert!((ig[i] - m.weights[i] * x[i]).abs() < 1e-6);
        }
        let same = integrated_gradients(&m, &x, 0, 16, &x).unwrap();
        assert!(same.data().iter().all(|&v| v == 0.0));
        assert!(integrated_gradients(&m, &x, 0, 4, &x).is_err());
    }

    #[test]
    fn gradient_shap_degenerate_and_deterministic() {
        let m = TinyCnn::new(5);
        let x = Tensor::from_fn([1, 4, 4], |i| i as f32 / 16.0);
        let mut rng = crate::rng::stream(9, 0);
        let z = gradient_shap(&m, &x, 1, &[x.clone()], 0.0, 1, &mut rng).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let base = vec![Tensor::zeros([1, 4, 4]); 4];
        let a = gradient_shap(&m, &x, 1, &base, 0.1, 2, &mut crate::rng::stream(4, 0)).unwrap();
        let b = gradient_shap(&m, &x, 1, &base, 0.1, 2, &mut crate::rng::stream(4, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guided_backprop_rejects_relu_free_models() {
        let m = linear(1, 2, 2, 1);
        let x = Tensor::full([1, 2, 2], 0.5);
        let e = guided_backprop(&m, &x, 0).unwrap_err();
        assert!(matches!(e, Error::Unsupported { .. }));
    }

    #[test]
    fn guided_backprop_is_bounded_by_plain_gradient() {
        let m = TinyCnn::new(11);
        for s in 0..10u64 {
            let mut rng = crate::rng::stream(s, 1);
            let x = Tensor::from_fn([1, 4, 4], |_| rng.random_range(-1.0..1.0));
            let plain = saliency(&m, &x, 0).unwrap();
            let guided = guided_backprop(&m, &x, 0).unwrap();
            for (g, p) in guided.data().iter().zip(plain.data()) {
                assert!(g.max(0.0) <= p.abs() + 1e-6 || g.signum() != p.signum());
            }
        }
        let neg = Tensor::full([1, 4, 4], -50.0);
        let mut m = TinyCnn::new(2);
        m.params.tensors[0] = Tensor::full([2, 1, 3, 3], 1.0);
        let g = guided_backprop(&m, &neg, 0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_cam_matches_hand_computation() {
        let m = TinyCnn::new(7);
        let x = Tensor::from_fn([1, 4, 4], |i| (i as f32 * 0.37).sin());
        let cam = grad_cam(&m, &x, 1, None).unwrap();
        assert_eq!(cam.shape(), &[4, 4]);
        // gap then dense: ∂f/∂A_c = hw[1, c] / 16 everywhere, so α_c = hw[1, c] / 16.
        let mut tape = Tape::new();
        let input = tape.constant(single(&x).unwrap());
        let stage = m.forward(&mut tape, input).unwrap().stages[0];
        let a = tape.value(stage).clone();
        let hw = &m.params.tensors[2];
        for p in 0..16 {
            let v: f32 = (0..2).map(|c| hw[2 + c] / 16.0 * a[c * 16 + p]).sum();
            assert!((cam[p] - v.max(0.0)).abs() < 1e-6);
        }
        assert!(grad_cam(&m, &x, 1, Some(1)).is_err());
    }

    #[test]
    fn guided_grad_cam_vanishes_where_cam_does() {
        let m = TinyCnn::new(8);
        let x = Tensor::from_fn([1, 4, 4], |i| (i as f32 * 0.91).cos());
        let cam = grad_cam(&m, &x, 0, None).unwrap();
        let ggc = guided_grad_cam(&m, &x, 0, None).unwrap();
        for (c, g) in cam.data().iter().zip(ggc.data()) {
            if *c == 0.0 {
                assert_eq!(*g, 0.0);
            }
            assert!(*g >= 0.0);
        }
    }
}
