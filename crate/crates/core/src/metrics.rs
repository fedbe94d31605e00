//! Explanation quality metrics and the rank test used to compare methods.

use rand::seq::index::sample;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::attribution::{AttributionMap, PatchPartition};
use crate::error::{Error, Result};
use crate::model::{class_scores, Model};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaithfulnessConfig {
    pub perturbations: usize,
    /// Features removed per draw; `None` means a quarter of the partition.
    pub subset_size: Option<usize>,
    /// Value written into removed features.
    pub baseline: f32,
    pub seed: u64,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        FaithfulnessConfig {
            perturbations: 70,
            subset_size: None,
            baseline: 0.0,
            seed: 0,
        }
    }
}

impl FaithfulnessConfig {
    pub fn subset_size_for(&self, d: usize) -> usize {
        self.subset_size
            .unwrap_or_else(|| ((0.25 * d as f64).round() as usize).max(1))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let s = self.subset_size_for(d);
        if s == 0 || s >= d {
            return Err(Error::invalid(format!("subset size {s} must lie in [1, {d})")));
        }
        if self.perturbations < 3 {
            return Err(Error::invalid(format!(
                "at least 3 perturbations are needed, got {}",
                self.perturbations
            )));
        }
        Ok(())
    }
}

/// Random feature subsets with the model output drop each one causes.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSet {
    pub subsets: Vec<Vec<usize>>,
    /// `f(x) − f(x with the subset set to the baseline)`.
    pub deltas: Vec<f64>,
}

impl PerturbationSet {
    pub fn draw(
        model: &dyn Model,
        x: &Tensor,
        class: usize,
        partition: &PatchPartition,
        config: &FaithfulnessConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = partition.len();
        config.validate(d)?;
        let k = config.subset_size_for(d);
        let subsets: Vec<Vec<usize>> = (0..config.perturbations)
            .map(|_| {
                let mut s = sample(rng, d, k).into_vec();
                s.sort_unstable();
                s
            })
            .collect();
        let mut images = vec![x.clone()];
        for s in &subsets {
            let mut off = vec![false; d];
            s.iter().for_each(|&i| off[i] = true);
            images.push(partition.mask_image(x, &off, config.baseline)?);
        }
        let scores = class_scores(model, &Tensor::stack(&images)?, class)?;
        let full = scores[0] as f64;
        Ok(PerturbationSet {
            subsets,
            deltas: scores[1..].iter().map(|&v| full - v as f64).collect(),
        })
    }

    /// Attribution mass inside each subset.
    pub fn subset_sums(&self, features: &[f64]) -> Vec<f64> {
        self.subsets
            .iter()
            .map(|s| s.iter().map(|&i| features[i]).sum())
            .collect()
    }

    /// Pearson correlation between subset attribution sums and output drops;
    /// `None` when either sequence has zero variance.
    pub fn score(&self, map: &Tensor, partition: &PatchPartition) -> Result<Option<f64>> {
        let features = partition.aggregate(map)?;
        pearson(&self.subset_sums(&features), &self.deltas)
    }
}

/// Faithfulness of `map` for the prediction `(x, class)`.
pub fn faithfulness(
    model: &dyn Model,
    map: &AttributionMap,
    x: &Tensor,
    class: usize,
    partition: &PatchPartition,
    config: &FaithfulnessConfig,
) -> Result<Option<f64>> {
    let mut rng = rng::stream(config.seed, rng::streams::INSTANCE_BASE);
    PerturbationSet::draw(model, x, class, partition, config, &mut rng)?.score(&map.scores, partition)
}

/// Sample Pearson correlation; `None` when either input is constant.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<Option<f64>> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("pearson inputs differ in length: {} vs {}", u.len(), v.len())));
    }
    if u.len() < 3 {
        return Err(Error::invalid(format!("pearson needs at least 3 pairs, got {}", u.len())));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    let scale_u = u.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let scale_v = v.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    // Treat variance at the rounding level of the inputs as zero.
    if suu <= (1e-12 * scale_u).powi(2) * n || svv <= (1e-12 * scale_v).powi(2) * n || suu == 0.0 || svv == 0.0 {
        return Ok(None);
    }
    Ok(Some((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0)))
}

/// Fraction of absolute attribution held by each feature.
pub fn attribution_distribution(map: &Tensor, partition: &PatchPartition) -> Result<Vec<f64>> {
    let g: Vec<f64> = partition.aggregate(map)?.into_iter().map(f64::abs).collect();
    let total: f64 = g.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid("attribution distribution of an all-zero map is undefined"));
    }
    Ok(g.into_iter().map(|v| v / total).collect())
}

/// Shannon entropy (natural log) of a distribution, with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Entropy of the attribution distribution; lies in `[0, ln d]`.
pub fn complexity(map: &Tensor, partition: &PatchPartition) -> Result<f64> {
    Ok(entropy(&attribution_distribution(map, partition)?))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    Global,
    /// Mean over all square windows of this side, stride 1.
    Sliding(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub window: SsimWindow,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            window: SsimWindow::Global,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    fn validate(&self) -> Result<()> {
        if !(self.c1() > 0.0 && self.c2() > 0.0) {
            return Err(Error::invalid("ssim stabilizers must be positive"));
        }
        Ok(())
    }
}

/// First and second moments of a pair of equally long samples.
#[derive(Clone, Copy, Debug)]
pub struct SsimMoments {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov: f64,
}

impl SsimMoments {
    pub fn of(x: &[f64], y: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean_x = x.iter().sum::<f64>() / n;
        let mean_y = y.iter().sum::<f64>() / n;
        let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
        for (&a, &b) in x.iter().zip(y) {
            var_x += (a - mean_x) * (a - mean_x);
            var_y += (b - mean_y) * (b - mean_y);
            cov += (a - mean_x) * (b - mean_y);
        }
        SsimMoments {
            mean_x,
            mean_y,
            var_x: var_x / n,
            var_y: var_y / n,
            cov: cov / n,
        }
    }

    pub fn ssim(&self, c1: f64, c2: f64) -> f64 {
        let m = self;
        ((2.0 * m.mean_x * m.mean_y + c1) * (2.0 * m.cov + c2))
            / ((m.mean_x * m.mean_x + m.mean_y * m.mean_y + c1) * (m.var_x + m.var_y + c2))
    }
}

/// Structural similarity of two equally shaped maps.
pub fn ssim(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    params.validate()?;
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    let (c1, c2) = (params.c1(), params.c2());
    let s = x.shape();
    match params.window {
        SsimWindow::Sliding(k) if s.len() == 2 && k > 0 && s[0] >= k && s[1] >= k => {
            let (h, w) = (s[0], s[1]);
            let mut total = 0.0;
            let mut count = 0usize;
            let mut wx = Vec::with_capacity(k * k);
            let mut wy = Vec::with_capacity(k * k);
            for r in 0..=h - k {
                for c in 0..=w - k {
                    wx.clear();
                    wy.clear();
                    for i in r..r + k {
                        wx.extend_from_slice(&xs[i * w + c..i * w + c + k]);
                        wy.extend_from_slice(&ys[i * w + c..i * w + c + k]);
                    }
                    total += SsimMoments::of(&wx, &wy).ssim(c1, c2);
                    count += 1;
                }
            }
            Ok(total / count as f64)
        }
        _ => Ok(SsimMoments::of(&xs, &ys).ssim(c1, c2)),
    }
}

/// Min-max normalizes a map to `[0, 1]`; constant maps become all zero.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// SSIM between attribution maps after min-max normalizing both, with the
/// dynamic range set to the larger normalized maximum.
pub fn map_similarity(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let nx = min_max_normalize(&x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let ny = min_max_normalize(&y.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let l = nx.iter().chain(&ny).copied().fold(0.0f64, f64::max);
    let params = SsimParams {
        dynamic_range: if l > 0.0 { l } else { 1.0 },
        ..SsimParams::default()
    };
    Ok(SsimMoments::of(&nx, &ny).ssim(params.c1(), params.c2()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatTestResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub labels: Vec<String>,
}

/// Average ranks (1-based) with ties sharing their mean rank, plus the tie
/// correction term `Σ (t³ − t)`.
fn rank(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Kruskal-Wallis H test with tie correction and a chi-square p-value.
pub fn kruskal_wallis(groups: &[(String, Vec<f64>)]) -> Result<StatTestResult> {
    if groups.len() < 2 {
        return Err(Error::invalid("kruskal-wallis needs at least two groups"));
    }
    if let Some((name, _)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::invalid(format!("group '{name}' has fewer than 2 observations")));
    }
    if groups.iter().flat_map(|(_, g)| g).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kruskal-wallis observations".into()));
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    let n = pooled.len() as f64;
    let (ranks, ties) = rank(&pooled);
    let labels = groups.iter().map(|(l, _)| l.clone()).collect();
    let df = groups.len() - 1;
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(StatTestResult {
            statistic: 0.0,
            degrees_of_freedom: df,
            p_value: 1.0,
            labels,
        });
    }
    let mut offset = 0;
    let mut sum = 0.0;
    for (_, g) in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let h = ((12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction).max(0.0);
    let p = if h == 0.0 {
        1.0
    } else {
        let chi = ChiSquared::new(df as f64).map_err(|e| Error::invalid(e.to_string()))?;
        chi.sf(h).clamp(0.0, 1.0)
    };
    Ok(StatTestResult {
        statistic: h,
        degrees_of_freedom: df,
        p_value: p,
        labels,
    })
}

/// Five-number summary plus mean over the defined scores.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Summary {
    pub count: usize,
    pub undefined: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(scores: &[Option<f64>]) -> Summary {
    let mut v: Vec<f64> = scores.iter().flatten().copied().filter(|x| x.is_finite()).collect();
    let undefined = scores.len() - v.len();
    if v.is_empty() {
        return Summary {
            count: 0,
            undefined,
            mean: f64::NAN,
            min: f64::NAN,
            q1: f64::NAN,
            median: f64::NAN,
            q3: f64::NAN,
            max: f64::NAN,
        };
    }
    v.sort_by(f64::total_cmp);
    Summary {
        count: v.len(),
        undefined,
        mean: v.iter().sum::<f64>() / v.len() as f64,
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    }
}
