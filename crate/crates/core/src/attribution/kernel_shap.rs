use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{class_scores, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::PatchPartition;

/// Largest feature count for which every coalition may be enumerated.
const MAX_ENUMERATED_FEATURES: usize = 20;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of one coalition of size `s` among `d` features.
fn kernel_weight(d: usize, s: usize) -> f64 {
    (d - 1) as f64 / (binomial(d, s) * s as f64 * (d - s) as f64)
}

fn enumerable(d: usize, n: usize) -> bool {
    d <= MAX_ENUMERATED_FEATURES && (1usize << d) - 2 <= n
}

/// Weighted coalitions excluding the empty and the full set; `true` keeps a feature.
fn coalitions(d: usize, n: usize, rng: &mut Rng) -> Vec<(Vec<bool>, f64)> {
    if enumerable(d, n) {
        return (1..(1usize << d) - 1)
            .map(|mask| {
                let z: Vec<bool> = (0..d).map(|j| mask >> j & 1 == 1).collect();
                let s = mask.count_ones() as usize;
                (z, kernel_weight(d, s))
            })
            .collect();
    }
    // Sizes are drawn in proportion to their total kernel mass, members
    // uniformly, and every draw is paired with its complement.
    let mass: Vec<f64> = (1..d).map(|s| 1.0 / (s * (d - s)) as f64).collect();
    let total: f64 = mass.iter().sum();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut u = rng.random::<f64>() * total;
        let mut s = d - 1;
        for (i, m) in mass.iter().enumerate() {
            if u < *m {
                s = i + 1;
                break;
            }
            u -= m;
        }
        let mut z = vec![false; d];
        for j in sample(rng, d, s) {
            z[j] = true;
        }
        let complement: Vec<bool> = z.iter().map(|b| !b).collect();
        out.push((z, 1.0));
        if out.len() < n {
            out.push((complement, 1.0));
        }
    }
    out
}

/// Kernel SHAP regression for an arbitrary cooperative game over `d` players.
///
/// `game` maps coalitions (`true` = player present) to payoffs. The empty and
/// full coalitions are always evaluated, and the estimate satisfies
/// `Σ φ = v(full) − v(empty)` exactly. When `2^d − 2 ≤ n_coalitions` every
/// coalition is used, the ridge is skipped and the result is the exact
/// Shapley value.
pub fn shapley_regression(
    d: usize,
    game: &mut dyn FnMut(&[Vec<bool>]) -> Result<Vec<f64>>,
    n_coalitions: usize,
    ridge: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::invalid(format!("kernel shap needs at least 2 features, got {d}")));
    }
    if n_coalitions < d + 2 {
        return Err(Error::invalid(format!(
            "kernel shap needs at least d + 2 = {} coalitions, got {n_coalitions}",
            d + 2
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!("ridge {ridge} must be >= 0")));
    }
    let sampled = coalitions(d, n_coalitions, rng);
    let mut all: Vec<Vec<bool>> = vec![vec![false; d], vec![true; d]];
    all.extend(sampled.iter().map(|(z, _)| z.clone()));
    let values = game(&all)?;
    if values.len() != all.len() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel shap payoffs".into()));
    }
    let (v0, v1) = (values[0], values[1]);
    let delta = v1 - v0;

    // Eliminate the last player through the efficiency constraint.
    let m = d - 1;
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    let mut row = vec![0.0; m];
    for ((z, w), v) in sampled.iter().zip(&values[2..]) {
        let last = z[m] as u8 as f64;
        for j in 0..m {
            row[j] = z[j] as u8 as f64 - last;
        }
        let y = v - v0 - last * delta;
        for i in 0..m {
            if row[i] == 0.0 {
                continue;
            }
            let wi = w * row[i];
            rhs[i] += wi * y;
            for j in 0..m {
                a[(i, j)] += wi * row[j];
            }
        }
    }
    if !enumerable(d, n_coalitions) {
        for i in 0..m {
            a[(i, i)] += ridge;
        }
    }
    let chol = a.cholesky().ok_or_else(|| {
        Error::Singular("kernel shap regression; increase the coalition count or the ridge".into())
    })?;
    let phi = chol.solve(&rhs);
    let mut out: Vec<f64> = phi.iter().copied().collect();
    out.push(delta - out.iter().sum::<f64>());
    Ok(out)
}

/// Per-feature Shapley estimates for the class logit, with absent features
/// set to zero.
pub fn kernel_shap_values(
    model: &dyn Model,
    x: &Tensor,
    class: usize,
    partition: &PatchPartition,
    n_coalitions: usize,
    ridge: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut game = |zs: &[Vec<bool>]| -> Result<Vec<f64>> {
        let images = zs
            .iter()
            .map(|z| {
                let off: Vec<bool> = z.iter().map(|b| !b).collect();
                partition.mask_image(x, &off, 0.0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(class_scores(model, &Tensor::stack(&images)?, class)?
            .into_iter()
            .map(f64::from)
            .collect())
    };
    shapley_regression(partition.len(), &mut game, n_coalitions, ridge, rng)
}

/// Kernel SHAP map: every feature's estimate spread evenly over its pixels.
pub fn kernel_shap(
    model: &dyn Model,
    x: &Tensor,
    class: usize,
    partition: &PatchPartition,
    n_coalitions: usize,
    ridge: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let phi = kernel_shap_values(model, x, class, partition, n_coalitions, ridge, rng)?;
    partition.distribute(&phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_class_score, LinearModel};

    fn additive(weights: &[f64]) -> impl FnMut(&[Vec<bool>]) -> Result<Vec<f64>> + '_ {
        move |zs| {
            Ok(zs
                .iter()
                .map(|z| 0.5 + z.iter().zip(weights).filter(|(on, _)| **on).map(|(_, w)| w).sum::<f64>())
                .collect())
        }
    }

    #[test]
    fn additive_game_recovers_weights_exactly() {
        let w = [0.3, -1.2, 2.0, 0.0, 0.7];
        let phi = shapley_regression(5, &mut additive(&w), 30, 0.0, &mut crate::rng::stream(0, 0)).unwrap();
        for (a, b) in phi.iter().zip(w) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sampled_estimate_keeps_efficiency() {
        let w: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin()).collect();
        let phi = shapley_regression(30, &mut additive(&w), 200, 1e-6, &mut crate::rng::stream(1, 0)).unwrap();
        assert!((phi.iter().sum::<f64>() - w.iter().sum::<f64>()).abs() < 1e-9);
        // Additive games are recovered by any design that spans the space.
        for (a, b) in phi.iter().zip(&w) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn full_enumeration_ignores_the_ridge() {
        let w = [0.3, -1.2, 2.0, 0.7];
        let phi = shapley_regression(4, &mut additive(&w), 14, 10.0, &mut crate::rng::stream(0, 0)).unwrap();
        for (a, b) in phi.iter().zip(w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_coalitions_or_features_rejected() {
        let mut rng = crate::rng::stream(0, 0);
        assert!(shapley_regression(1, &mut additive(&[1.0]), 10, 0.0, &mut rng).is_err());
        assert!(shapley_regression(4, &mut additive(&[1.0; 4]), 5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn linear_model_patch_values_are_patch_sums() {
        let shape = [1, 4, 4];
        let w = Tensor::from_fn([1, 16], |i| (i as f32 * 0.3).cos());
        let m = LinearModel::new(shape, w.clone(), Tensor::zeros([1])).unwrap();
        let x = Tensor::from_fn(shape, |i| i as f32 / 16.0);
        let part = PatchPartition::new(2, 2, 4, 4).unwrap();
        let phi = kernel_shap_values(&m, &x, 0, &part, 14, 0.0, &mut crate::rng::stream(0, 0)).unwrap();
        let mut expected = [0.0f64; 4];
        for p in 0..16 {
            expected[part.assignment()[p]] += (w[p] * x[p]) as f64;
        }
        for (a, b) in phi.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        let map = kernel_shap(&m, &x, 0, &part, 14, 0.0, &mut crate::rng::stream(0, 0)).unwrap();
        let total: f64 = map.data().iter().map(|&v| v as f64).sum();
        let f = predict_class_score(&m, &x, 0).unwrap() as f64;
        assert!((total - f).abs() < 1e-5);
    }
}
