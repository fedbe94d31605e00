use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Division of an image into `rows × cols` rectangular features.
///
/// Pixel `(y, x)` of an `h × w` image belongs to feature
/// `(y·rows/h)·cols + x·cols/w`, so the partition is total and disjoint even
/// when the grid does not divide the image evenly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPartition {
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
    feature_of: Vec<usize>,
}

impl PatchPartition {
    pub fn new(rows: usize, cols: usize, height: usize, width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > height || cols > width {
            return Err(Error::invalid(format!(
                "{rows}x{cols} grid cannot partition a {height}x{width} image"
            )));
        }
        let feature_of = (0..height * width)
            .map(|p| (p / width * rows / height) * cols + (p % width) * cols / width)
            .collect();
        Ok(PatchPartition {
            rows,
            cols,
            height,
            width,
            feature_of,
        })
    }

    /// 8×8 grid, or one feature per pixel for images smaller than that.
    pub fn default_for(height: usize, width: usize) -> Result<Self> {
        PatchPartition::new(height.min(8), width.min(8), height, width)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of features d.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Feature index of each pixel in row-major order.
    pub fn assignment(&self) -> &[usize] {
        &self.feature_of
    }

    pub fn feature_of(&self, y: usize, x: usize) -> usize {
        self.feature_of[y * self.width + x]
    }

    pub fn feature_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.len()];
        for &f in &self.feature_of {
            n[f] += 1;
        }
        n
    }

    fn check_map(&self, map: &Tensor) -> Result<()> {
        if map.shape() != [self.height, self.width] {
            return Err(Error::shape(
                "partition",
                format!("map {:?} vs partition {}x{}", map.shape(), self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Per-feature sums of an (h, w) map.
    pub fn aggregate(&self, map: &Tensor) -> Result<Vec<f64>> {
        self.check_map(map)?;
        let mut sums = vec![0.0; self.len()];
        for (&f, &v) in self.feature_of.iter().zip(map.data()) {
            sums[f] += v as f64;
        }
        Ok(sums)
    }

    /// Spreads each feature value evenly over its pixels, so that
    /// `aggregate(distribute(v)) == v` up to rounding.
    pub fn distribute(&self, values: &[f64]) -> Result<Tensor> {
        if values.len() != self.len() {
            return Err(Error::shape(
                "partition",
                format!("{} values for {} features", values.len(), self.len()),
            ));
        }
        let sizes = self.feature_sizes();
        let data = self
            .feature_of
            .iter()
            .map(|&f| (values[f] / sizes[f] as f64) as f32)
            .collect();
        Tensor::new([self.height, self.width], data)
    }

    /// Copy of a (c, h, w) image with every pixel of the features where
    /// `off[f]` is true replaced by `baseline`.
    pub fn mask_image(&self, image: &Tensor, off: &[bool], baseline: f32) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[1..] != [self.height, self.width] || off.len() != self.len() {
            return Err(Error::shape(
                "partition",
                format!("image {:?} with {} flags for {}x{} partition", s, off.len(), self.height, self.width),
            ));
        }
        let plane = self.height * self.width;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if off[self.feature_of[i % plane]] {
                *v = baseline;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_on_32px_has_64_features_of_16_pixels() {
        let p = PatchPartition::default_for(32, 32).unwrap();
        assert_eq!(p.len(), 64);
        assert!(p.feature_sizes().iter().all(|&n| n == 16));
        assert_eq!(p.feature_of(0, 0), 0);
        assert_eq!(p.feature_of(3, 4), 1);
        assert_eq!(p.feature_of(31, 31), 63);
    }

    #[test]
    fn uneven_grid_is_total() {
        let p = PatchPartition::new(3, 5, 10, 11).unwrap();
        let sizes = p.feature_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 110);
        assert!(sizes.iter().all(|&n| n > 0));
    }

    #[test]
    fn distribute_inverts_aggregate() {
        let p = PatchPartition::new(2, 2, 4, 6).unwrap();
        let v = [1.0, -2.0, 0.5, 3.0];
        let back = p.aggregate(&p.distribute(&v).unwrap()).unwrap();
        for (a, b) in back.iter().zip(v) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_touches_all_channels_of_selected_features() {
        let p = PatchPartition::new(2, 2, 2, 2).unwrap();
        let img = Tensor::full([2, 2, 2], 1.0);
        let m = p.mask_image(&img, &[false, true, false, false], 0.0).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
