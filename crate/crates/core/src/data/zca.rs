use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-phase whitening `W (x − μ)` with `W = E diag(1/√(λ+ε)) Eᵀ`.
#[derive(Clone, Debug)]
pub struct ZcaTransform {
    mean: DVector<f64>,
    matrix: DMatrix<f64>,
    shape: Vec<usize>,
}

impl ZcaTransform {
    /// Fits on training pixels only.
    pub fn fit(train: &[ImageRecord], epsilon: f64) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::invalid("ZCA needs at least two training records"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("ZCA epsilon must be positive"));
        }
        let shape = train[0].pixels.shape().to_vec();
        let dim = train[0].pixels.len();
        let n = train.len();
        let mut x = DMatrix::<f64>::zeros(n, dim);
        for (i, r) in train.iter().enumerate() {
            if r.pixels.shape() != shape.as_slice() {
                return Err(Error::shape("zca_fit", format!("{:?} vs {:?}", r.pixels.shape(), shape)));
            }
            for (j, &v) in r.pixels.data().iter().enumerate() {
                x[(i, j)] = v as f64;
            }
        }
        let mean = x.row_mean().transpose();
        for mut row in x.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = (x.transpose() * &x) / n as f64;
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ZCA covariance".into()));
        }
        let eig = SymmetricEigen::new(cov);
        let scale = DVector::from_iterator(
            dim,
            eig.eigenvalues.iter().map(|&l| 1.0 / (l.max(0.0) + epsilon).sqrt()),
        );
        let matrix = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();
        Ok(ZcaTransform { mean, matrix, shape })
    }

    pub fn apply(&self, record: &ImageRecord) -> Result<ImageRecord> {
        if record.pixels.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "zca_apply",
                format!("{:?} vs fitted {:?}", record.pixels.shape(), self.shape),
            ));
        }
        let v = DVector::from_iterator(self.mean.len(), record.pixels.data().iter().map(|&p| p as f64));
        let out = &self.matrix * (v - &self.mean);
        Ok(ImageRecord {
            pixels: Tensor::from_parts(self.shape.clone(), out.iter().map(|&p| p as f32).collect()),
            label: record.label,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn correlated(n: usize, seed: u64) -> Vec<ImageRecord> {
        let mut g = rng::stream(seed, 0);
        (0..n)
            .map(|_| {
                let base: f32 = g.random();
                let pixels = Tensor::from_fn([1, 3, 3], |i| 0.5 * base + 0.5 * g.random::<f32>() * (i as f32 + 1.0) / 9.0);
                ImageRecord { pixels, label: 0 }
            })
            .collect()
    }

    fn covariance(records: &[ImageRecord]) -> DMatrix<f64> {
        let d = records[0].pixels.len();
        let n = records.len() as f64;
        let mut mean = vec![0.0; d];
        for r in records {
            for (m, &v) in mean.iter_mut().zip(r.pixels.data()) {
                *m += v as f64 / n;
            }
        }
        let mut c = DMatrix::zeros(d, d);
        for r in records {
            let v: Vec<f64> = r.pixels.data().iter().zip(&mean).map(|(&a, m)| a as f64 - m).collect();
            for i in 0..d {
                for j in 0..d {
                    c[(i, j)] += v[i] * v[j] / n;
                }
            }
        }
        c
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let train = correlated(2000, 1);
        let zca = ZcaTransform::fit(&train, 1e-9).unwrap();
        let white: Vec<_> = train.iter().map(|r| zca.apply(r).unwrap()).collect();
        let c = covariance(&white);
        for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((c[(i, j)] - target).abs() <= 0.05, "({i},{j}) = {}", c[(i, j)]);
            }
        }
    }

    #[test]
    fn whitening_is_idempotent() {
        let train = correlated(2000, 2);
        let zca = ZcaTransform::fit(&train, 1e-9).unwrap();
        let white: Vec<_> = train.iter().map(|r| zca.apply(r).unwrap()).collect();
        let again = ZcaTransform::fit(&white, 1e-9).unwrap();
        for r in white.iter().take(50) {
            let twice = again.apply(r).unwrap();
            for (a, b) in twice.pixels.data().iter().zip(r.pixels.data()) {
                assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_dataset_bounded_by_inverse_root_epsilon() {
        let recs: Vec<_> = (0..5)
            .map(|_| ImageRecord { pixels: Tensor::full([1, 2, 2], 0.3f32), label: 0 })
            .collect();
        let eps = 1e-4;
        let zca = ZcaTransform::fit(&recs, eps).unwrap();
        let bound = 1.0 / eps.sqrt() + 1e-9;
        assert!(zca.matrix().iter().all(|v| v.abs() <= bound));
    }
}
