use crate::attribution::PatchPartition;
use crate::error::{Error, Result};
use crate::metrics::{entropy, min_max_normalize, PerturbationSet, SsimMoments, SsimParams};

/// Weights of the composite explanation loss.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Faithfulness.
    pub l1: f64,
    /// Complexity.
    pub l2: f64,
    /// Similarity.
    pub l3: f64,
    /// Low-resolution share of the similarity term.
    pub lambda1: f64,
    /// High-resolution share of the similarity term.
    pub lambda2: f64,
    /// Divide the complexity term by `ln d` so it lies in `[0, 1]`.
    pub normalize_complexity: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 0.5,
            l2: 0.3,
            l3: 0.2,
            lambda1: 0.5,
            lambda2: 0.5,
            normalize_complexity: true,
        }
    }
}

impl LossWeights {
    /// Factor applied to the entropy in the loss.
    pub fn complexity_scale(&self, features: usize) -> f64 {
        if self.normalize_complexity && features > 1 {
            1.0 / (features as f64).ln()
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("loss weight {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Individual loss terms; `total` is their weighted combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// `None` when the subset sums or deltas have zero variance.
    pub faithfulness: Option<f64>,
    pub complexity: f64,
    pub ssim_lr: f64,
    pub ssim_hr: f64,
    pub total: f64,
}

impl LossTerms {
    /// `features` is the partition size `d`.
    pub fn combine(
        weights: &LossWeights,
        features: usize,
        faithfulness: Option<f64>,
        complexity: f64,
        ssim_lr: f64,
        ssim_hr: f64,
    ) -> Self {
        let sim = weights.lambda1 * (1.0 - ssim_lr) + weights.lambda2 * (1.0 - ssim_hr);
        LossTerms {
            faithfulness,
            complexity,
            ssim_lr,
            ssim_hr,
            total: -weights.l1 * faithfulness.unwrap_or(0.0)
                + weights.l2 * weights.complexity_scale(features) * complexity
                + weights.l3 * sim,
        }
    }
}

/// Fixed targets of the loss for one instance.
pub struct LossTarget<'a> {
    /// Weighted Average map, (h, w).
    pub wet: &'a [f64],
    /// Upsampled Weighted Average, (2h, 2w).
    pub wet_up: &'a [f64],
    pub pool: &'a PerturbationSet,
    pub partition: &'a PatchPartition,
}

/// Pearson correlation of `u` with `v` and its gradient with respect to `u`.
fn pearson_grad(u: &[f64], v: &[f64]) -> Option<(f64, Vec<f64>)> {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let du: Vec<f64> = u.iter().map(|a| a - mu).collect();
    let dv: Vec<f64> = v.iter().map(|b| b - mv).collect();
    let su = du.iter().map(|a| a * a).sum::<f64>().sqrt();
    let sv = dv.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = u.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1e-300);
    if su <= 1e-12 * scale * n.sqrt() || sv == 0.0 {
        return None;
    }
    let r = du.iter().zip(&dv).map(|(a, b)| a * b).sum::<f64>() / (su * sv);
    // Centering terms cancel because both deviation vectors sum to zero.
    let g = du.iter().zip(&dv).map(|(a, b)| b / (su * sv) - r * a / (su * su)).collect();
    Some((r, g))
}

/// Entropy of the feature distribution of `map` and its gradient.
fn entropy_grad(map: &[f64], partition: &PatchPartition) -> Result<(f64, Vec<f64>)> {
    let assign = partition.assignment();
    let mut f = vec![0.0; partition.len()];
    for (&k, &v) in assign.iter().zip(map) {
        f[k] += v;
    }
    let total: f64 = f.iter().map(|v| v.abs()).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("complexity of an all-zero map is undefined"));
    }
    let p: Vec<f64> = f.iter().map(|v| v.abs() / total).collect();
    let h = entropy(&p);
    let gf: Vec<f64> = p
        .iter()
        .zip(&f)
        .map(|(&pi, &fi)| {
            let ln = pi.max(1e-12).ln();
            (-ln - h) / total * fi.signum()
        })
        .collect();
    Ok((h, assign.iter().map(|&k| gf[k]).collect()))
}

/// SSIM of min-max normalized `x` against fixed normalized `y`, with the
/// gradient with respect to the raw `x`.
fn ssim_grad(x: &[f64], y_norm: &[f64]) -> (f64, Vec<f64>) {
    let lo_i = (0..x.len()).min_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap_or(0);
    let hi_i = (0..x.len()).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap_or(0);
    let range = x[hi_i] - x[lo_i];
    let xn = min_max_normalize(x);
    let l = xn.iter().chain(y_norm).copied().fold(0.0f64, f64::max);
    let params = SsimParams {
        dynamic_range: if l > 0.0 { l } else { 1.0 },
        ..SsimParams::default()
    };
    let (c1, c2) = (params.c1(), params.c2());
    let m = SsimMoments::of(&xn, y_norm);
    let s = m.ssim(c1, c2);
    if !(range > 0.0) {
        return (s, vec![0.0; x.len()]);
    }
    let n = x.len() as f64;
    let a = 2.0 * m.mean_x * m.mean_y + c1;
    let b = 2.0 * m.cov + c2;
    let c = m.mean_x * m.mean_x + m.mean_y * m.mean_y + c1;
    let d = m.var_x + m.var_y + c2;
    let gn: Vec<f64> = xn
        .iter()
        .zip(y_norm)
        .map(|(&xp, &yp)| {
            s * (2.0 * m.mean_y / (n * a) + 2.0 * (yp - m.mean_y) / (n * b)
                - 2.0 * m.mean_x / (n * c)
                - 2.0 * (xp - m.mean_x) / (n * d))
        })
        .collect();
    // Chain through the normalization (x − lo) / (hi − lo).
    let mut g: Vec<f64> = gn.iter().map(|v| v / range).collect();
    let to_lo: f64 = gn.iter().zip(&xn).map(|(g, n)| g * (n - 1.0)).sum::<f64>() / range;
    let to_hi: f64 = gn.iter().zip(&xn).map(|(g, n)| -g * n).sum::<f64>() / range;
    g[lo_i] += to_lo;
    g[hi_i] += to_hi;
    (s, g)
}

/// Loss terms for one instance and the gradient of the total with respect
/// to the LR and HR maps. `subsets` indexes the perturbation pool entries
/// used for the faithfulness estimate.
pub fn composite_loss_grad(
    lr: &[f64],
    hr: &[f64],
    target: &LossTarget<'_>,
    subsets: &[usize],
    weights: &LossWeights,
) -> Result<(LossTerms, Vec<f64>, Vec<f64>)> {
    if lr.len() != target.wet.len() || hr.len() != target.wet_up.len() {
        return Err(Error::shape(
            "composite_loss",
            format!(
                "maps of {} and {} values vs targets of {} and {}",
                lr.len(),
                hr.len(),
                target.wet.len(),
                target.wet_up.len()
            ),
        ));
    }
    let part = target.partition;
    let mut g_lr = vec![0.0; lr.len()];

    let mut features = vec![0.0; part.len()];
    for (&k, &v) in part.assignment().iter().zip(lr) {
        features[k] += v;
    }
    let sums: Vec<f64> = subsets
        .iter()
        .map(|&s| target.pool.subsets[s].iter().map(|&i| features[i]).sum())
        .collect();
    let deltas: Vec<f64> = subsets.iter().map(|&s| target.pool.deltas[s]).collect();
    let faith = pearson_grad(&sums, &deltas);
    if let Some((_, gs)) = &faith {
        let mut gf = vec![0.0; part.len()];
        for (&s, &g) in subsets.iter().zip(gs) {
            for &i in &target.pool.subsets[s] {
                gf[i] += g;
            }
        }
        for (o, &k) in g_lr.iter_mut().zip(part.assignment()) {
            *o -= weights.l1 * gf[k];
        }
    } else {
        log::warn!("faithfulness term undefined for this step; contributing zero");
    }

    let (compx, gc) = entropy_grad(lr, part)?;
    let cs = weights.l2 * weights.complexity_scale(part.len());
    g_lr.iter_mut().zip(&gc).for_each(|(o, g)| *o += cs * g);

    let wet_n = min_max_normalize(target.wet);
    let (s_lr, gs_lr) = ssim_grad(lr, &wet_n);
    g_lr.iter_mut().zip(&gs_lr).for_each(|(o, g)| *o -= weights.l3 * weights.lambda1 * g);

    let up_n = min_max_normalize(target.wet_up);
    let (s_hr, gs_hr) = ssim_grad(hr, &up_n);
    let g_hr = gs_hr.iter().map(|g| -weights.l3 * weights.lambda2 * g).collect();

    let terms = LossTerms::combine(weights, part.len(), faith.map(|(r, _)| r), compx, s_lr, s_hr);
    Ok((terms, g_lr, g_hr))
}
