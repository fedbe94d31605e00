use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{split_records, DatasetSplit, ImageRecord};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::checkpoint::TensorArchive;
use crate::tensor::Tensor;

pub const SHAPE_KINDS: [&str; 5] = ["square", "disc", "triangle", "cross", "ring"];

/// Parameters of the procedural shapes dataset.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub image_size: usize,
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            image_size: 32,
            classes: 3,
            per_class: 300,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("class count {} < 2", self.classes)));
        }
        if self.classes > SHAPE_KINDS.len() {
            return Err(Error::invalid(format!(
                "class count {} exceeds the {} available shape kinds",
                self.classes,
                SHAPE_KINDS.len()
            )));
        }
        if self.image_size < 16 {
            return Err(Error::invalid(format!("image size {} < 16", self.image_size)));
        }
        if self.per_class == 0 {
            return Err(Error::invalid("instances per class must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::invalid(format!("noise level {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

fn inside(kind: usize, u: f64, v: f64, r: f64) -> bool {
    match kind {
        0 => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
        1 => u * u + v * v <= r * r,
        2 => {
            // Equilateral triangle with circumradius r, apex up in the local frame.
            let h = 0.5 * r;
            v >= -h && v <= r && u.abs() <= (r - v) / 3f64.sqrt()
        }
        3 => {
            let arm = 0.3 * r;
            (u.abs() <= r && v.abs() <= arm) || (v.abs() <= r && u.abs() <= arm)
        }
        _ => {
            let d2 = u * u + v * v;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

fn render(kind: usize, size: usize, rng: &mut rng::Rng, noise: &Normal<f64>) -> Tensor {
    let s = size as f64;
    let r = rng.random_range(0.22..0.36) * s;
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let theta: f64 = rng.random_range(-0.5..0.5);
    // Dark background, brighter foreground; hue and contrast vary per image.
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
    let fg: [f64; 3] = std::array::from_fn(|c| bg[c] + rng.random_range(0.35..0.7));
    let (sin, cos) = theta.sin_cos();
    let mut px = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampling for anti-aliased edges.
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = x as f64 + ox - cx;
                let dy = y as f64 + oy - cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if inside(kind, u, -v, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let val = bg[c] + cover * (fg[c] - bg[c]) + noise.sample(rng);
                px[(c * size + y) * size + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], px)
}

/// Deterministic-by-seed shapes dataset split 60/20/20.
pub fn generate_shapes(config: &ShapesConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, streams::SHAPES);
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut records = Vec::with_capacity(config.classes * config.per_class);
    for _ in 0..config.per_class {
        for class in 0..config.classes {
            records.push(ImageRecord {
                pixels: render(class, config.image_size, &mut rng, &noise),
                label: class,
            });
        }
    }
    let names = SHAPE_KINDS[..config.classes].iter().map(|s| s.to_string()).collect();
    Ok(split_records(records, names, config.seed))
}

const DATASET_MAGIC: &[u8; 4] = b"XDS1";

fn split_tensors(archive: &mut TensorArchive, prefix: &str, records: &[ImageRecord]) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let items: Vec<Tensor> = records.iter().map(|r| r.pixels.clone()).collect();
    archive.push(format!("{prefix}.pixels"), Tensor::stack(&items)?);
    archive.push(
        format!("{prefix}.labels"),
        Tensor::new([records.len()], records.iter().map(|r| r.label as f32).collect())?,
    );
    Ok(())
}

fn split_records_from(archive: &TensorArchive, prefix: &str) -> Result<Vec<ImageRecord>> {
    let (Some(px), Some(labels)) = (
        archive.get(&format!("{prefix}.pixels")),
        archive.get(&format!("{prefix}.labels")),
    ) else {
        return Ok(Vec::new());
    };
    if px.shape().first() != labels.shape().first() {
        return Err(Error::format("dataset", format!("{prefix}: pixel/label count mismatch")));
    }
    (0..labels.len())
        .map(|i| {
            Ok(ImageRecord {
                pixels: px.index_axis0(i)?,
                label: labels.data()[i] as usize,
            })
        })
        .collect()
}

/// Header (`XDS1`, class names, seed) followed by an `XFTN` archive.
pub fn save_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u16(split.class_names.len() as u16);
    for name in &split.class_names {
        w.string_u16(name)?;
    }
    w.u64(split.seed);
    let mut archive = TensorArchive::new();
    split_tensors(&mut archive, "train", &split.train)?;
    split_tensors(&mut archive, "validation", &split.validation)?;
    split_tensors(&mut archive, "test", &split.test)?;
    w.bytes(&archive.encode()?);
    let path = path.as_ref();
    std::fs::write(path, w.buf).map_err(|e| Error::file(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let mut r = Reader::new(&bytes, "dataset");
    r.expect_magic(DATASET_MAGIC)?;
    let n = r.u16()? as usize;
    let class_names = (0..n).map(|_| r.string_u16()).collect::<Result<Vec<_>>>()?;
    let seed = r.u64()?;
    let archive = TensorArchive::read_from(&mut r)?;
    r.finish()?;
    Ok(DatasetSplit {
        train: split_records_from(&archive, "train")?,
        validation: split_records_from(&archive, "validation")?,
        test: split_records_from(&archive, "test")?,
        class_names,
        seed,
    })
}
