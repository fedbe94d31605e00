use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Moment estimates and hyperparameters for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero-moment state shaped like `params` with the usual defaults.
    pub fn new(params: &[Tensor<T>], learning_rate: f64) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "param {i}: {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    state.first_moment[i].shape()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (tb1, tb2) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (lr, eps) = (T::of(state.learning_rate), T::of(state.epsilon));
    let (ic1, ic2) = (T::of(1.0 / c1), T::of(1.0 / c2));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = tb1 * *mv + ob1 * gv;
            *vv = tb2 * *vv + ob2 * gv * gv;
            let mhat = *mv * ic1;
            let vhat = *vv * ic2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f32>::from_fn([3], |i| i as f32)];
        let before = p.clone();
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut p, &[Tensor::zeros([3])], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn unit_gradient_moves_by_learning_rate() {
        // First bias-corrected step: m̂ = g, v̂ = g², update = lr·g/(|g| + ε).
        let mut p = vec![Tensor::<f64>::full([2], 1.0)];
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut p, &[Tensor::full([2], 1.0)], &mut s).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        for &v in p[0].data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::<f32>::zeros([2])];
        let mut s = AdamState::new(&p, 0.1);
        assert!(adam_step(&mut p, &[Tensor::zeros([3])], &mut s).is_err());
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_fn([4], |i| (i as f32).sin())];
            let g = [Tensor::<f32>::from_fn([4], |i| (i as f32 * 1.3).cos())];
            let mut s = AdamState::new(&p, 0.01);
            adam_step(&mut p, &g, &mut s).unwrap();
            adam_step(&mut p, &g, &mut s).unwrap();
            p
        };
        assert_eq!(run(), run());
    }
}
