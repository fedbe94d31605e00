//! Metric-weighted fusion of baseline attribution maps.

use std::path::Path;

use crate::attribution::{AttributionMap, Explainer, Method, PatchPartition};
use crate::error::{Error, Result};
use crate::metrics::{complexity, FaithfulnessConfig, PerturbationSet};
use crate::model::{predict_classes, single};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Guard for the reciprocal complexity term.
pub const COMPLEXITY_EPSILON: f64 = 1e-8;

pub const WEIGHTED_AVERAGE_TAG: &str = "weighted_average";

/// Per-method fusion weights and the metric averages they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub methods: Vec<String>,
    pub avg_faithfulness: Vec<f64>,
    pub avg_complexity: Vec<f64>,
    /// Sum-normalized weights used for averaging.
    pub weights: Vec<f64>,
    pub l1: f64,
    pub l2: f64,
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Combines per-method metric averages into convex weights.
///
/// Faithfulness is min-max normalized across methods, the reciprocal
/// complexity `1 / max(c, ε)` likewise, and `w = l1·faith + l2·inv_compx` is
/// min-max normalized and then divided by its sum. When every method ties the
/// weights are uniform.
pub fn weights_from_metrics(
    methods: Vec<String>,
    avg_faithfulness: Vec<f64>,
    avg_complexity: Vec<f64>,
    l1: f64,
    l2: f64,
) -> Result<WeightVector> {
    let k = methods.len();
    if k == 0 || avg_faithfulness.len() != k || avg_complexity.len() != k {
        return Err(Error::invalid("one faithfulness and one complexity average per method are required"));
    }
    if !(0.0..=1.0).contains(&l1) || !(0.0..=1.0).contains(&l2) {
        return Err(Error::invalid(format!("l1 = {l1} and l2 = {l2} must lie in [0, 1]")));
    }
    if avg_faithfulness.iter().chain(&avg_complexity).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric averages".into()));
    }
    let faith = min_max(&avg_faithfulness);
    let inv: Vec<f64> = avg_complexity.iter().map(|c| 1.0 / c.max(COMPLEXITY_EPSILON)).collect();
    let inv = min_max(&inv);
    let raw: Vec<f64> = faith.iter().zip(&inv).map(|(f, c)| l1 * f + l2 * c).collect();
    let norm = min_max(&raw);
    let total: f64 = norm.iter().sum();
    let weights = if total > 0.0 {
        norm.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    Ok(WeightVector {
        methods,
        avg_faithfulness,
        avg_complexity,
        weights,
        l1,
        l2,
    })
}

impl WeightVector {
    pub fn weight_of(&self, method: &str) -> Option<f64> {
        self.methods.iter().position(|m| m == method).map(|i| self.weights[i])
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "avg_faith", "avg_compx", "weight"])?;
        for i in 0..self.methods.len() {
            w.write_record([
                self.methods[i].clone(),
                format!("{:.17e}", self.avg_faithfulness[i]),
                format!("{:.17e}", self.avg_complexity[i]),
                format!("{:.17e}", self.weights[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::file(path, e))
    }

    /// Reads a weights CSV; `l1` and `l2` are not stored and come back as NaN.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let mut out = WeightVector {
            methods: vec![],
            avg_faithfulness: vec![],
            avg_complexity: vec![],
            weights: vec![],
            l1: f64::NAN,
            l2: f64::NAN,
        };
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::format("weights CSV", format!("{}: bad number '{s}'", path.display())))
        };
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::format("weights CSV", format!("{}: expected 4 columns", path.display())));
            }
            out.methods.push(rec[0].to_string());
            out.avg_faithfulness.push(num(&rec[1])?);
            out.avg_complexity.push(num(&rec[2])?);
            out.weights.push(num(&rec[3])?);
        }
        Ok(out)
    }
}

/// Pixelwise convex combination of equally shaped maps.
pub fn weighted_average(maps: &[&AttributionMap], weights: &[f64]) -> Result<AttributionMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("no maps to average"))?;
    if maps.len() != weights.len() {
        return Err(Error::invalid(format!("{} maps but {} weights", maps.len(), weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid(format!("weights must be nonnegative and sum to 1, got sum {total}")));
    }
    let mut acc = vec![0.0f64; first.scores.len()];
    for (m, &w) in maps.iter().zip(weights) {
        if m.scores.shape() != first.scores.shape() {
            return Err(Error::shape(
                "weighted_average",
                format!("{:?} vs {:?}", m.scores.shape(), first.scores.shape()),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(m.scores.data()) {
            *a += w * v as f64;
        }
    }
    let scores = Tensor::new(first.scores.shape().to_vec(), acc.iter().map(|&v| v as f32).collect())?;
    AttributionMap::publish(WEIGHTED_AVERAGE_TAG, first.class, scores)
}

/// Averages faithfulness (undefined scores excluded, 0 if none are defined)
/// and complexity of every method over calibration images explained for
/// their predicted class, then derives the weights.
pub fn calibrate_weights(
    explainer: &Explainer<'_>,
    methods: &[Method],
    calibration: &[Tensor],
    partition: &PatchPartition,
    faith: &FaithfulnessConfig,
    l1: f64,
    l2: f64,
    seed: u64,
) -> Result<WeightVector> {
    if calibration.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    let k = methods.len();
    let mut faith_sum = vec![0.0; k];
    let mut faith_n = vec![0usize; k];
    let mut compx_sum = vec![0.0; k];
    let mut compx_n = vec![0usize; k];
    for (i, x) in calibration.iter().enumerate() {
        let class = predict_classes(explainer.model, &single(x)?)?[0];
        let mut prng = rng::stream(seed, streams::CALIBRATION + ((i as u64) << 8));
        let set = PerturbationSet::draw(explainer.model, x, class, partition, faith, &mut prng)?;
        for (j, &m) in methods.iter().enumerate() {
            let mut mrng = rng::stream(seed, streams::INSTANCE_BASE + ((i as u64) << 4) + m.index() as u64);
            let map = explainer.explain(m, x, class, &mut mrng)?;
            if let Some(f) = set.score(&map.scores, partition)? {
                faith_sum[j] += f;
                faith_n[j] += 1;
            }
            if let Ok(c) = complexity(&map.scores, partition) {
                compx_sum[j] += c;
                compx_n[j] += 1;
            }
        }
    }
    let avg = |s: &[f64], n: &[usize], empty: f64| -> Vec<f64> {
        s.iter().zip(n).map(|(s, &n)| if n == 0 { empty } else { s / n as f64 }).collect()
    };
    let max_entropy = (partition.len() as f64).ln();
    weights_from_metrics(
        methods.iter().map(|m| m.tag().to_string()).collect(),
        avg(&faith_sum, &faith_n, 0.0),
        avg(&compx_sum, &compx_n, max_entropy),
        l1,
        l2,
    )
}
