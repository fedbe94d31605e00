use rand::Rng as _;

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Nearest,
    Bilinear,
}

/// Random rotation/shift augmentation and optional ZCA whitening.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation angle is drawn uniformly from ±`rotation_deg`.
    pub rotation_deg: f64,
    /// Shifts are drawn uniformly within ±`shift_fraction` of each axis.
    pub shift_fraction: f64,
    pub zca: bool,
    pub zca_epsilon: f64,
    pub resample: Resample,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            shift_fraction: 0.2,
            zca: false,
            zca_epsilon: 1e-2,
            resample: Resample::Bilinear,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            shift_fraction: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=45.0).contains(&self.rotation_deg) {
            return Err(Error::invalid(format!(
                "rotation range {}° outside [0°, 45°]",
                self.rotation_deg
            )));
        }
        if !(0.0..1.0).contains(&self.shift_fraction) {
            return Err(Error::invalid(format!(
                "shift fraction {} outside [0, 1)",
                self.shift_fraction
            )));
        }
        if self.zca && !(self.zca_epsilon > 0.0) {
            return Err(Error::invalid("ZCA epsilon must be positive"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.shift_fraction == 0.0
    }
}

/// Inverse-maps every output pixel through rotation `angle_deg` about the
/// image centre followed by an integer translation; out-of-frame samples are 0.
fn warp(pixels: &Tensor, angle_deg: f64, dx: i64, dy: i64, resample: Resample) -> Tensor {
    let s = pixels.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = pixels.data();
    let sample = |ch: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize] as f64
        }
    };
    let mut out = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let ty = y as f64 - dy as f64 - cy;
            let tx = x as f64 - dx as f64 - cx;
            // Inverse rotation.
            let sx = cos * tx + sin * ty + cx;
            let sy = -sin * tx + cos * ty + cy;
            for ch in 0..c {
                let v = match resample {
                    Resample::Nearest => sample(ch, sy.round() as i64, sx.round() as i64),
                    Resample::Bilinear => {
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = (sy - y0, sx - x0);
                        let (y0, x0) = (y0 as i64, x0 as i64);
                        let top = sample(ch, y0, x0) * (1.0 - fx) + sample(ch, y0, x0 + 1) * fx;
                        let bot = sample(ch, y0 + 1, x0) * (1.0 - fx) + sample(ch, y0 + 1, x0 + 1) * fx;
                        top * (1.0 - fy) + bot * fy
                    }
                };
                out[(ch * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

pub fn rotate(record: &ImageRecord, angle_deg: f64, resample: Resample) -> ImageRecord {
    ImageRecord {
        pixels: warp(&record.pixels, angle_deg, 0, 0, resample),
        label: record.label,
    }
}

/// Integer translation by (`dx`, `dy`) pixels with zero fill.
pub fn shift(record: &ImageRecord, dx: i64, dy: i64) -> ImageRecord {
    ImageRecord {
        pixels: warp(&record.pixels, 0.0, dx, dy, Resample::Nearest),
        label: record.label,
    }
}

/// Random rotation and shift. A zero-range config returns the input unchanged.
pub fn augment(record: &ImageRecord, config: &AugmentConfig, rng: &mut Rng) -> ImageRecord {
    if config.is_identity() {
        return record.clone();
    }
    let angle = if config.rotation_deg > 0.0 {
        rng.random_range(-config.rotation_deg..=config.rotation_deg)
    } else {
        0.0
    };
    let (h, w) = (record.height() as f64, record.width() as f64);
    let mut offset = |len: f64| -> i64 {
        if config.shift_fraction > 0.0 {
            let m = config.shift_fraction * len;
            rng.random_range(-m..=m).round() as i64
        } else {
            0
        }
    };
    let dx = offset(w);
    let dy = offset(h);
    ImageRecord {
        pixels: warp(&record.pixels, angle, dx, dy, config.resample),
        label: record.label,
    }
}
