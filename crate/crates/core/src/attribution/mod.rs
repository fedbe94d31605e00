//! Baseline attribution methods over any [`Model`](crate::model::Model).
//!
//! The method functions return signed, pre-clamp values so that completeness
//! style axioms can be checked; [`Explainer`] applies channel aggregation and
//! the positive clamp and is what the pipeline publishes.

mod deeplift;
mod gradient;
mod kernel_shap;
mod partition;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub use deeplift::{deeplift_rescale, deeplift_shap};
pub use gradient::{grad_cam, gradient_shap, guided_backprop, guided_grad_cam, integrated_gradients, saliency};
pub use kernel_shap::{kernel_shap, kernel_shap_values, shapley_regression};
pub use partition::PatchPartition;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A published explanation: nonnegative (h, w) scores for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub scores: Tensor,
    /// Producing method, e.g. `integrated_gradients` or `weighted_average`.
    pub method: String,
    pub class: usize,
}

impl AttributionMap {
    /// Clamps negative scores to zero.
    pub fn publish(method: impl Into<String>, class: usize, scores: Tensor) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(Error::shape("attribution", format!("map must be (h, w), got {:?}", scores.shape())));
        }
        if !scores.all_finite() {
            return Err(Error::NonFinite("attribution map".into()));
        }
        Ok(AttributionMap {
            scores: scores.map(|v| v.max(0.0)),
            method: method.into(),
            class,
        })
    }

    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// The eight baseline methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Saliency,
    IntegratedGradients,
    GradientShap,
    GuidedBackprop,
    GuidedGradCam,
    DeepLift,
    DeepLiftShap,
    KernelShap,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Saliency,
        Method::IntegratedGradients,
        Method::GradientShap,
        Method::GuidedBackprop,
        Method::GuidedGradCam,
        Method::DeepLift,
        Method::DeepLiftShap,
        Method::KernelShap,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::IntegratedGradients => "integrated_gradients",
            Method::GradientShap => "gradient_shap",
            Method::GuidedBackprop => "guided_backprop",
            Method::GuidedGradCam => "guided_grad_cam",
            Method::DeepLift => "deeplift",
            Method::DeepLiftShap => "deeplift_shap",
            Method::KernelShap => "kernel_shap",
        }
    }

    pub fn index(self) -> usize {
        Method::ALL.iter().position(|&m| m == self).unwrap_or(0)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::GradientShap | Method::DeepLiftShap | Method::KernelShap)
    }

    /// Parses a comma separated list; `all` selects every method.
    pub fn parse_list(list: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if name == "all" {
                out.extend(Method::ALL);
            } else {
                out.push(name.parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("empty method list"));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.tag() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.tag()).collect();
            Error::invalid(format!("unknown method '{s}'; valid names: all, {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// All-black reference.
    #[default]
    Zero,
    /// Input plus isotropic Gaussian noise.
    GaussianNoise,
    /// Images drawn from a reference set (usually the training split).
    Dataset,
}

/// How reference inputs for path and difference methods are produced.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub sigma: f64,
    pub samples: usize,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            kind: BaselineKind::Zero,
            sigma: 0.0,
            samples: 1,
        }
    }
}

impl BaselineSpec {
    pub fn zero() -> Self {
        BaselineSpec::default()
    }

    pub fn dataset(samples: usize) -> Self {
        BaselineSpec {
            kind: BaselineKind::Dataset,
            sigma: 0.0,
            samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("baseline sigma {} must be >= 0", self.sigma)));
        }
        if self.samples == 0 {
            return Err(Error::invalid("baseline sample count must be >= 1"));
        }
        Ok(())
    }

    /// Draws `samples` baselines for input `x`.
    pub fn draw(&self, x: &Tensor, references: &[Tensor], rng: &mut Rng) -> Result<Vec<Tensor>> {
        self.validate()?;
        match self.kind {
            BaselineKind::Zero => Ok(vec![Tensor::zeros(x.shape().to_vec()); self.samples]),
            BaselineKind::GaussianNoise => Ok((0..self.samples).map(|_| add_noise(x, self.sigma, rng)).collect()),
            BaselineKind::Dataset => {
                if references.is_empty() {
                    return Err(Error::invalid("dataset baselines need a non-empty reference set"));
                }
                (0..self.samples)
                    .map(|_| {
                        let r = &references[rng.random_range(0..references.len())];
                        if r.shape() != x.shape() {
                            return Err(Error::shape(
                                "baseline",
                                format!("reference {:?} vs input {:?}", r.shape(), x.shape()),
                            ));
                        }
                        Ok(r.clone())
                    })
                    .collect()
            }
        }
    }
}

pub(crate) fn add_noise(x: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = x.data().iter().map(|&v| v + normal.sample(rng) as f32).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Sums a (c, h, w) tensor over channels.
pub fn channel_sum(raw: &Tensor) -> Result<Tensor> {
    channel_reduce(raw, |v| v)
}

/// Sums absolute values of a (c, h, w) tensor over channels.
pub fn channel_abs_sum(raw: &Tensor) -> Result<Tensor> {
    channel_reduce(raw, f32::abs)
}

fn channel_reduce(raw: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 3 {
        return Err(Error::shape("channel_sum", format!("expected (c, h, w), got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut out = vec![0.0f32; plane];
    for ch in raw.data().chunks(plane) {
        out.iter_mut().zip(ch).for_each(|(o, &v)| *o += f(v));
    }
    Tensor::new([s[1], s[2]], out)
}

/// Per-method settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodParams {
    pub ig_steps: usize,
    pub ig_baseline: BaselineSpec,
    pub gradient_shap_samples: usize,
    pub gradient_shap_sigma: f64,
    /// Interpolation points per noisy sample.
    pub gradient_shap_steps: usize,
    pub gradient_shap_baseline: BaselineSpec,
    /// Stage index for Grad-CAM; `None` selects the last stage.
    pub grad_cam_layer: Option<usize>,
    pub deeplift_baseline: BaselineSpec,
    pub deeplift_shap_samples: usize,
    pub kernel_shap_coalitions: usize,
    pub kernel_shap_ridge: f64,
    /// Feature grid (rows, cols) for Kernel SHAP and the metrics.
    pub grid: [usize; 2],
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            ig_steps: 64,
            ig_baseline: BaselineSpec::zero(),
            gradient_shap_samples: 16,
            gradient_shap_sigma: 0.1,
            gradient_shap_steps: 1,
            gradient_shap_baseline: BaselineSpec::zero(),
            grad_cam_layer: None,
            deeplift_baseline: BaselineSpec::zero(),
            deeplift_shap_samples: 16,
            kernel_shap_coalitions: 256,
            kernel_shap_ridge: 1e-6,
            grid: [8, 8],
        }
    }
}

impl MethodParams {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps < 8 {
            return Err(Error::invalid(format!("integrated gradients needs >= 8 steps, got {}", self.ig_steps)));
        }
        if self.gradient_shap_samples == 0 || self.gradient_shap_steps == 0 || self.deeplift_shap_samples == 0 {
            return Err(Error::invalid("sample counts must be >= 1"));
        }
        if !(self.gradient_shap_sigma >= 0.0) || !(self.kernel_shap_ridge >= 0.0) {
            return Err(Error::invalid("sigma and ridge must be >= 0"));
        }
        self.ig_baseline.validate()?;
        self.gradient_shap_baseline.validate()?;
        self.deeplift_baseline.validate()
    }

    pub fn partition(&self, height: usize, width: usize) -> Result<PatchPartition> {
        PatchPartition::new(self.grid[0], self.grid[1], height, width)
    }
}

/// Produces published maps for a fixed model and parameter set.
pub struct Explainer<'a> {
    pub model: &'a dyn Model,
    pub params: &'a MethodParams,
    /// Reference images for dataset baselines.
    pub references: &'a [Tensor],
}

impl<'a> Explainer<'a> {
    pub fn new(model: &'a dyn Model, params: &'a MethodParams, references: &'a [Tensor]) -> Self {
        Explainer {
            model,
            params,
            references,
        }
    }

    /// Signed channel-aggregated (h, w) values before the clamp.
    pub fn raw(&self, method: Method, x: &Tensor, class: usize, rng: &mut Rng) -> Result<Tensor> {
        let p = self.params;
        let model = self.model;
        match method {
            Method::Saliency => channel_abs_sum(&saliency(model, x, class)?),
            Method::IntegratedGradients => {
                let base = p.ig_baseline.draw(x, self.references, rng)?;
                let mut acc: Option<Tensor> = None;
                for b in &base {
                    let a = integrated_gradients(model, x, class, p.ig_steps, b)?;
                    acc = Some(match acc {
                        None => a,
                        Some(s) => s.zip_map(&a, |u, v| u + v)?,
                    });
                }
                let n = base.len() as f32;
                channel_sum(&acc.expect("at least one baseline").map(|v| v / n))
            }
            Method::GradientShap => {
                let mut spec = p.gradient_shap_baseline.clone();
                spec.samples = p.gradient_shap_samples;
                let base = spec.draw(x, self.references, rng)?;
                channel_sum(&gradient_shap(
                    model,
                    x,
                    class,
                    &base,
                    p.gradient_shap_sigma,
                    p.gradient_shap_steps,
                    rng,
                )?)
            }
            Method::GuidedBackprop => channel_sum(&guided_backprop(model, x, class)?),
            Method::GuidedGradCam => guided_grad_cam(model, x, class, p.grad_cam_layer),
            Method::DeepLift => {
                let base = p.deeplift_baseline.draw(x, self.references, rng)?;
                channel_sum(&deeplift_shap(model, x, class, &base)?)
            }
            Method::DeepLiftShap => {
                let base = BaselineSpec::dataset(p.deeplift_shap_samples).draw(x, self.references, rng)?;
                channel_sum(&deeplift_shap(model, x, class, &base)?)
            }
            Method::KernelShap => {
                let s = x.shape();
                let part = p.partition(s[1], s[2])?;
                kernel_shap(model, x, class, &part, p.kernel_shap_coalitions, p.kernel_shap_ridge, rng)
            }
        }
    }

    pub fn explain(&self, method: Method, x: &Tensor, class: usize, rng: &mut Rng) -> Result<AttributionMap> {
        AttributionMap::publish(method.tag(), class, self.raw(method, x, class, rng)?)
    }
}
