//! Run configuration and the end-to-end commands: train the classifier,
//! explain test instances, fuse, train the optimizer, evaluate and report.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml               effective configuration (written by train-classifier)
//! classifier.xftn           classifier checkpoint
//! classifier_curves.csv
//! instances.csv             instance_id, test_index, label, predicted_class
//! maps/<instance_id>/<method>.xmap (+ .png and _top.png heatmaps)
//! weights.csv               fusion weights
//! optimizer.xftn, optimizer_curves.csv
//! metrics.csv, summary.csv  per-(instance, method) scores and their summaries
//! report.csv, report.md, boxplot.csv
//! ```

use std::path::{Path, PathBuf};

use crate::attribution::{AttributionMap, Explainer, Method, MethodParams, PatchPartition};
use crate::classifier::{
    load_checkpoint, save_checkpoint, train_classifier, write_curves_csv, Checkpoint, Classifier, ClassifierConfig,
    TrainSchedule,
};
use crate::data::{generate_shapes, load_cifar10, split_records, AugmentConfig, DatasetSplit, ShapesConfig, ZcaTransform};
use crate::error::{Error, Result};
use crate::fusion::{calibrate_weights, weighted_average, WeightVector, WEIGHTED_AVERAGE_TAG};
use crate::metrics::{complexity, FaithfulnessConfig, PerturbationSet};
use crate::model::{predict_classes, single};
use crate::optimizer::{
    explain_optimal, train_over_learning_rates, OptimizerNet, OptimizerOutcome, OptimizerSample, OptimizerTrainConfig,
    OPTIMIZER_HR_TAG, OPTIMIZER_LR_TAG,
};
use crate::report::{
    format_headline, headline, load_map, read_metric_csv, render_heatmap, save_map, summarize_rows, write_boxplot_csv,
    write_headline_csv, write_metric_csv, write_summary_csv, HeatmapRender, HeadlineRow, MetricRow,
};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Shapes,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory with the CIFAR-10 binary batches.
    pub path: Option<PathBuf>,
    /// Keep at most this many records (split 60/20/20 as usual).
    pub limit: Option<usize>,
    pub shapes: ShapesConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Shapes,
            path: None,
            limit: None,
            shapes: ShapesConfig::default(),
        }
    }
}

/// Classifier architecture; input shape and class count come from the data.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub blocks: usize,
    pub width: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        ArchitectureConfig {
            blocks: c.blocks,
            width: c.width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Comma-separated method tags or `all`.
    pub methods: String,
    /// Test-split selector: `N` (first N), `a..b`, or `i,j,k`.
    pub instances: String,
    /// Training images used as dataset baselines.
    pub references: usize,
    pub render: HeatmapRender,
    /// Fraction kept in the additional masked heatmap; 1 disables it.
    pub mask_fraction: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            methods: "all".into(),
            instances: "50".into(),
            references: 64,
            render: HeatmapRender::default(),
            mask_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub l1: f64,
    pub l2: f64,
    /// Validation images used to average the metrics.
    pub calibration_instances: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            l1: 0.6,
            l2: 0.4,
            calibration_instances: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr_grid: Vec<f64>,
    pub train_instances: usize,
    pub validation_instances: usize,
    pub training: OptimizerTrainConfig,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr_grid: vec![5e-2, 5e-3, 5e-4, 5e-5],
            train_instances: 150,
            validation_instances: 50,
            training: OptimizerTrainConfig::default(),
        }
    }
}

/// Every setting of a run. The top-level `seed` is propagated into the
/// component seeds (training, metrics, optimizer) by [`RunConfig::resolved`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub classifier: ArchitectureConfig,
    pub training: TrainSchedule,
    pub augmentation: AugmentConfig,
    pub attribution: MethodParams,
    pub explain: ExplainConfig,
    pub metrics: FaithfulnessConfig,
    pub fusion: FusionConfig,
    pub optimizer: OptimizerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            classifier: ArchitectureConfig::default(),
            training: TrainSchedule::default(),
            augmentation: AugmentConfig::default(),
            attribution: MethodParams::default(),
            explain: ExplainConfig::default(),
            metrics: FaithfulnessConfig::default(),
            fusion: FusionConfig::default(),
            optimizer: OptimizerSection::default(),
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub methods: Option<String>,
    pub instances: Option<String>,
    pub lr_grid: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `config` if given, else the snapshot in the `--out` run
    /// directory if one exists, else the defaults; then applies overrides.
    pub fn assemble(config: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match (config, &overrides.out) {
            (Some(p), _) => Self::load(p)?,
            (None, Some(out)) if out.join(CONFIG_FILE).is_file() => Self::load(out.join(CONFIG_FILE))?,
            _ => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out.clone_from(o);
        }
        if let Some(m) = &overrides.methods {
            cfg.explain.methods.clone_from(m);
        }
        if let Some(i) = &overrides.instances {
            cfg.explain.instances.clone_from(i);
        }
        if let Some(g) = &overrides.lr_grid {
            cfg.optimizer.lr_grid.clone_from(g);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with the top-level seed written into every component seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.training.seed = c.seed;
        c.metrics.seed = c.seed;
        c.optimizer.training.schedule.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.augmentation.validate()?;
        self.attribution.validate()?;
        self.explain.render.validate()?;
        self.optimizer.training.schedule.validate()?;
        self.optimizer.training.weights.validate()?;
        self.methods()?;
        if !(self.explain.mask_fraction > 0.0 && self.explain.mask_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "explain.mask_fraction {} must lie in (0, 1]",
                self.explain.mask_fraction
            )));
        }
        if self.optimizer.lr_grid.is_empty() || self.optimizer.lr_grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("optimizer.lr_grid must hold positive learning rates".into()));
        }
        if self.dataset.kind == DatasetKind::Cifar10 && self.dataset.path.is_none() {
            return Err(Error::Config("dataset.path is required for cifar10".into()));
        }
        Ok(())
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        Method::parse_list(&self.explain.methods)
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const CLASSIFIER_FILE: &str = "classifier.xftn";
pub const CLASSIFIER_CURVES_FILE: &str = "classifier_curves.csv";
pub const INSTANCES_FILE: &str = "instances.csv";
pub const MAPS_DIR: &str = "maps";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const OPTIMIZER_FILE: &str = "optimizer.xftn";
pub const OPTIMIZER_CURVES_FILE: &str = "optimizer_curves.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const BOXPLOT_FILE: &str = "boxplot.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_TEXT_FILE: &str = "report.md";

#[cfg(feature = "parallel")]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Dataset for the run: generated or loaded, split with the run seed and
/// optionally ZCA-whitened with statistics of the training split.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<DatasetSplit> {
    let split = match cfg.dataset.kind {
        DatasetKind::Shapes => {
            let s = generate_shapes(&cfg.dataset.shapes)?;
            let names = s.class_names.clone();
            let mut all = s.train;
            all.extend(s.validation);
            all.extend(s.test);
            if let Some(n) = cfg.dataset.limit {
                all.truncate(n);
            }
            split_records(all, names, cfg.seed)
        }
        DatasetKind::Cifar10 => {
            let dir = cfg.dataset.path.as_ref().ok_or_else(|| Error::Config("dataset.path is required".into()))?;
            let mut s = load_cifar10(dir, cfg.seed)?;
            if let Some(n) = cfg.dataset.limit {
                let (a, b, _) = crate::data::split_sizes(n);
                s.train.truncate(a);
                s.validation.truncate(b);
                s.test.truncate(n - a - b);
            }
            s
        }
    };
    if !cfg.augmentation.zca {
        return Ok(split);
    }
    let zca = ZcaTransform::fit(&split.train, cfg.augmentation.zca_epsilon)?;
    let white = |v: Vec<crate::data::ImageRecord>| -> Result<Vec<_>> { v.iter().map(|r| zca.apply(r)).collect() };
    Ok(DatasetSplit {
        train: white(split.train)?,
        validation: white(split.validation)?,
        test: white(split.test)?,
        class_names: split.class_names,
        seed: split.seed,
    })
}

pub fn classifier_config(cfg: &RunConfig, split: &DatasetSplit) -> Result<ClassifierConfig> {
    let c = ClassifierConfig {
        input_shape: split.image_shape()?,
        blocks: cfg.classifier.blocks,
        width: cfg.classifier.width,
        classes: split.num_classes(),
    };
    c.validate()?;
    Ok(c)
}

/// Parses an instance selector against `n` available test images.
pub fn parse_instances(selector: &str, n: usize) -> Result<Vec<usize>> {
    let s = selector.trim();
    let bad = || Error::Config(format!("invalid instance selector '{selector}' (use N, a..b or i,j,k)"));
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        (a..b).collect()
    } else if s.contains(',') {
        let mut v = s
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()?;
        v.sort_unstable();
        v.dedup();
        v
    } else {
        let k: usize = s.parse().map_err(|_| bad())?;
        (0..k.min(n)).collect()
    };
    if out.is_empty() {
        return Err(Error::Config(format!("instance selector '{selector}' selects nothing")));
    }
    if let Some(&i) = out.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("instance {i} out of range: the test split has {n} images")));
    }
    Ok(out)
}

pub fn instance_id(test_index: usize) -> String {
    format!("t{test_index:05}")
}

pub fn parse_instance_id(id: &str) -> Result<usize> {
    id.strip_prefix('t')
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::invalid(format!("bad instance id '{id}'")))
}

/// Explanations of one image for its predicted class.
#[derive(Clone, Debug)]
pub struct InstanceMaps {
    pub key: usize,
    pub class: usize,
    pub maps: Vec<AttributionMap>,
}

/// Predicted class plus one map per method for each `(key, image)`. Method
/// randomness is seeded per key and method.
pub fn explain_images(
    model: &Classifier,
    params: &MethodParams,
    methods: &[Method],
    references: &[Tensor],
    images: &[(usize, &Tensor)],
    seed: u64,
    base: u64,
) -> Result<Vec<InstanceMaps>> {
    par_map(images, |&(key, x)| {
        let class = predict_classes(model, &single(x)?)?[0];
        let explainer = Explainer::new(model, params, references);
        let maps = methods
            .iter()
            .map(|&m| {
                let mut rng = rng::stream(seed, base + ((key as u64) << 4) + m.index() as u64);
                explainer.explain(m, x, class, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InstanceMaps { key, class, maps })
    })
    .into_iter()
    .collect()
}

/// Faithfulness and complexity of every map of every instance; the
/// perturbation draws are shared by the maps of one instance.
pub fn evaluate_instances(
    model: &Classifier,
    partition: &PatchPartition,
    faith: &FaithfulnessConfig,
    instances: &[(usize, &Tensor, Vec<&AttributionMap>)],
) -> Result<Vec<MetricRow>> {
    let rows = par_map(instances, |(key, x, maps)| -> Result<Vec<MetricRow>> {
        let Some(first) = maps.first() else {
            return Ok(vec![]);
        };
        let mut rng = rng::stream(faith.seed, streams::EVALUATE_BASE + *key as u64);
        let set = PerturbationSet::draw(model, x, first.class, partition, faith, &mut rng)?;
        maps.iter()
            .map(|m| {
                if m.class != first.class {
                    return Err(Error::invalid(format!("instance {key}: maps explain different classes")));
                }
                Ok(MetricRow {
                    instance_id: instance_id(*key),
                    method: m.method.clone(),
                    faithfulness: set.score(&m.scores, partition)?,
                    complexity: complexity(&m.scores, partition).ok(),
                })
            })
            .collect()
    });
    Ok(rows.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Training images used as dataset baselines.
pub fn reference_images(cfg: &RunConfig, split: &DatasetSplit) -> Vec<Tensor> {
    split.train.iter().take(cfg.explain.references).map(|r| r.pixels.clone()).collect()
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::file(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| Error::file(p, e))
}

/// Context shared by the commands that need the trained classifier.
pub struct Session {
    pub config: RunConfig,
    pub split: DatasetSplit,
    pub checkpoint: Checkpoint,
    pub partition: PatchPartition,
    pub references: Vec<Tensor>,
}

impl Session {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let config = cfg.resolved();
        let split = prepare_dataset(&config)?;
        let checkpoint = load_checkpoint(config.out.join(CLASSIFIER_FILE))?;
        let shape = split.image_shape()?;
        if checkpoint.model.config().input_shape != shape {
            return Err(Error::invalid(format!(
                "checkpoint expects inputs {:?}, dataset provides {:?}",
                checkpoint.model.config().input_shape,
                shape
            )));
        }
        let partition = config.attribution.partition(shape[1], shape[2])?;
        let references = reference_images(&config, &split);
        Ok(Session {
            config,
            split,
            checkpoint,
            partition,
            references,
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.checkpoint.model
    }

    fn maps_dir(&self) -> PathBuf {
        self.config.out.join(MAPS_DIR)
    }

    pub fn selected(&self) -> Result<Vec<usize>> {
        parse_instances(&self.config.explain.instances, self.split.test.len())
    }

    fn write_map(&self, key: usize, map: &AttributionMap) -> Result<()> {
        let dir = self.maps_dir().join(instance_id(key));
        create_dir(&dir)?;
        save_map(map, dir.join(format!("{}.xmap", map.method)))?;
        let (h, w) = (map.height(), map.width());
        let partition = if (h, w) == self.partition.image_size() {
            self.partition.clone()
        } else {
            let (r, c) = self.partition.grid();
            PatchPartition::new(r, c, h, w)?
        };
        let input = (self.config.explain.render.overlay && (h, w) == self.partition.image_size())
            .then(|| &self.split.test[key].pixels);
        let mut render = self.config.explain.render.clone();
        if render.overlay && input.is_none() {
            render.overlay = false;
        }
        let full = render_heatmap(map, &render, &partition, input)?;
        write_file(&dir.join(format!("{}.png", map.method)), &full.png)?;
        if self.config.explain.mask_fraction < 1.0 {
            render.top_fraction = self.config.explain.mask_fraction;
            let masked = render_heatmap(map, &render, &partition, input)?;
            write_file(&dir.join(format!("{}_top.png", map.method)), &masked.png)?;
        }
        Ok(())
    }

    pub fn load_instance_maps(&self, key: usize, methods: &[String]) -> Result<Vec<AttributionMap>> {
        let dir = self.maps_dir().join(instance_id(key));
        methods.iter().map(|m| load_map(dir.join(format!("{m}.xmap")))).collect()
    }

    /// Instance keys that have a map directory, in order.
    pub fn explained_instances(&self) -> Result<Vec<usize>> {
        let dir = self.maps_dir();
        let mut keys = Vec::new();
        for e in std::fs::read_dir(&dir).map_err(|e| Error::file(&dir, e))? {
            let e = e?;
            if e.file_type()?.is_dir() {
                if let Ok(k) = parse_instance_id(&e.file_name().to_string_lossy()) {
                    keys.push(k);
                }
            }
        }
        keys.sort_unstable();
        if keys.is_empty() {
            return Err(Error::invalid(format!("no explained instances under {}; run explain first", dir.display())));
        }
        Ok(keys)
    }
}

/// Trains the classifier and writes the checkpoint, curves and the config
/// snapshot.
pub fn cmd_train_classifier(cfg: &RunConfig) -> Result<Checkpoint> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let split = prepare_dataset(&cfg)?;
    let model = Classifier::build(&classifier_config(&cfg, &split)?, cfg.seed)?;
    let ckpt = train_classifier(model, &split, &cfg.training, &cfg.augmentation)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    save_checkpoint(&ckpt, cfg.out.join(CLASSIFIER_FILE))?;
    write_curves_csv(&ckpt.curves, cfg.out.join(CLASSIFIER_CURVES_FILE))?;
    if let Some(e) = ckpt.diverged_at {
        return Err(Error::Diverged { epoch: e });
    }
    Ok(ckpt)
}

/// Explains the selected test instances with every configured method.
pub fn cmd_explain(cfg: &RunConfig) -> Result<Vec<InstanceMaps>> {
    let s = Session::open(cfg)?;
    let methods = s.config.methods()?;
    let keys = s.selected()?;
    let images: Vec<(usize, &Tensor)> = keys.iter().map(|&k| (k, &s.split.test[k].pixels)).collect();
    let out = explain_images(
        s.model(),
        &s.config.attribution,
        &methods,
        &s.references,
        &images,
        s.config.seed,
        streams::EXPLAIN_BASE,
    )?;
    let mut w = csv::Writer::from_path(s.config.out.join(INSTANCES_FILE))?;
    w.write_record(["instance_id", "test_index", "label", "predicted_class"])?;
    for inst in &out {
        for m in &inst.maps {
            s.write_map(inst.key, m)?;
        }
        w.write_record([
            instance_id(inst.key),
            inst.key.to_string(),
            s.split.test[inst.key].label.to_string(),
            inst.class.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(out)
}

fn calibration_weights(s: &Session, methods: &[Method]) -> Result<WeightVector> {
    let n = s.config.fusion.calibration_instances.min(s.split.validation.len());
    let calib: Vec<Tensor> = s.split.validation[..n].iter().map(|r| r.pixels.clone()).collect();
    let explainer = Explainer::new(s.model(), &s.config.attribution, &s.references);
    calibrate_weights(
        &explainer,
        methods,
        &calib,
        &s.partition,
        &s.config.metrics,
        s.config.fusion.l1,
        s.config.fusion.l2,
        s.config.seed,
    )
}

/// Calibrates fusion weights on validation images and writes the Weighted
/// Average map of every explained instance.
pub fn cmd_fuse(cfg: &RunConfig) -> Result<WeightVector> {
    let s = Session::open(cfg)?;
    let methods = s.config.methods()?;
    let weights = calibration_weights(&s, &methods)?;
    weights.write_csv(s.config.out.join(WEIGHTS_FILE))?;
    for key in s.explained_instances()? {
        let maps = s.load_instance_maps(key, &weights.methods)?;
        let refs: Vec<&AttributionMap> = maps.iter().collect();
        s.write_map(key, &weighted_average(&refs, &weights.weights)?)?;
    }
    Ok(weights)
}

/// Builds optimizer samples (stacked maps, WET, perturbation pool) for images.
pub fn optimizer_samples(
    s: &Session,
    weights: &WeightVector,
    images: &[(usize, &Tensor)],
    base: u64,
) -> Result<Vec<OptimizerSample>> {
    let methods = weights
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<Method>>>()?;
    let explained = explain_images(
        s.model(),
        &s.config.attribution,
        &methods,
        &s.references,
        images,
        s.config.seed,
        base,
    )?;
    let opt = &s.config.optimizer.training;
    par_map(&explained, |inst| {
        let refs: Vec<&AttributionMap> = inst.maps.iter().collect();
        let wet = weighted_average(&refs, &weights.weights)?;
        let mut rng = rng::stream(s.config.seed, streams::POOL_BASE + base + inst.key as u64);
        let x = images.iter().find(|(k, _)| *k == inst.key).expect("explained image").1;
        OptimizerSample::prepare(
            s.model(),
            x,
            inst.class,
            &refs,
            &wet,
            &s.partition,
            &s.config.metrics,
            opt.pool_size,
            &mut rng,
        )
    })
    .into_iter()
    .collect()
}

/// Trains the explanation optimizer over the learning-rate grid and writes
/// its LR and HR maps for every explained instance.
pub fn cmd_optimize(cfg: &RunConfig) -> Result<OptimizerOutcome> {
    let s = Session::open(cfg)?;
    let weights = WeightVector::read_csv(s.config.out.join(WEIGHTS_FILE))?;
    let section = &s.config.optimizer;
    let train_imgs: Vec<(usize, &Tensor)> = s
        .split
        .train
        .iter()
        .take(section.train_instances)
        .enumerate()
        .map(|(i, r)| (i, &r.pixels))
        .collect();
    let val_imgs: Vec<(usize, &Tensor)> = s
        .split
        .validation
        .iter()
        .take(section.validation_instances)
        .enumerate()
        .map(|(i, r)| (i, &r.pixels))
        .collect();
    let train = optimizer_samples(&s, &weights, &train_imgs, 0)?;
    let val = optimizer_samples(&s, &weights, &val_imgs, 1 << 20)?;
    let mut channels = weights.methods.clone();
    channels.push(WEIGHTED_AVERAGE_TAG.to_string());
    let [_, h, w] = s.model().config().input_shape;
    let net = OptimizerNet::build(channels, h, w, section.training.base_width, s.config.seed)?;
    let (lr, outcome) = train_over_learning_rates(
        &net,
        &train,
        &val,
        &s.partition,
        s.split.num_classes(),
        &section.training,
        &section.lr_grid,
    )?;
    log::info!("selected optimizer learning rate {lr:e}");
    outcome.save(s.config.out.join(OPTIMIZER_FILE))?;
    outcome.write_curves_csv(s.config.out.join(OPTIMIZER_CURVES_FILE))?;
    if let Some(e) = outcome.diverged_at {
        log::warn!("optimizer training diverged at epoch {e}; the best earlier state was kept");
    }
    let mut names = weights.methods.clone();
    names.push(WEIGHTED_AVERAGE_TAG.to_string());
    for key in s.explained_instances()? {
        let mut maps = s.load_instance_maps(key, &names)?;
        let wet = maps.pop().expect("weighted average");
        let refs: Vec<&AttributionMap> = maps.iter().collect();
        let pair = explain_optimal(&outcome.net, &refs, &wet)?;
        s.write_map(key, &pair.lr)?;
        s.write_map(key, &pair.hr)?;
    }
    Ok(outcome)
}

/// Scores every input-resolution map of every explained instance.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    let s = Session::open(cfg)?;
    let mut loaded = Vec::new();
    for key in s.explained_instances()? {
        let dir = s.maps_dir().join(instance_id(key));
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::file(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "xmap"))
            .collect();
        files.sort();
        let maps = files
            .iter()
            .map(load_map)
            .filter(|m| m.as_ref().map_or(true, |m| m.method != OPTIMIZER_HR_TAG))
            .collect::<Result<Vec<_>>>()?;
        if key >= s.split.test.len() {
            return Err(Error::invalid(format!("instance {key} is not in the test split")));
        }
        loaded.push((key, maps));
    }
    let order = |m: &str| -> (usize, usize) {
        match m.parse::<Method>() {
            Ok(x) => (0, x.index()),
            Err(_) if m == WEIGHTED_AVERAGE_TAG => (1, 0),
            Err(_) if m == OPTIMIZER_LR_TAG => (2, 0),
            Err(_) => (3, 0),
        }
    };
    for (_, maps) in &mut loaded {
        maps.sort_by_key(|m| order(&m.method));
    }
    let items: Vec<(usize, &Tensor, Vec<&AttributionMap>)> = loaded
        .iter()
        .map(|(k, maps)| (*k, &s.split.test[*k].pixels, maps.iter().collect()))
        .collect();
    let rows = evaluate_instances(s.model(), &s.partition, &s.config.metrics, &items)?;
    write_metric_csv(&rows, s.config.out.join(METRICS_FILE))?;
    write_summary_csv(&summarize_rows(&rows)?, s.config.out.join(SUMMARY_FILE))?;
    Ok(rows)
}

/// Headline table and box-plot data from `metrics.csv` alone.
pub fn cmd_report(out: &Path) -> Result<(Vec<HeadlineRow>, String)> {
    let rows = read_metric_csv(out.join(METRICS_FILE))?;
    let summaries = summarize_rows(&rows)?;
    let table = headline(&summaries);
    write_headline_csv(&table, out.join(REPORT_FILE))?;
    write_boxplot_csv(&summaries, out.join(BOXPLOT_FILE))?;
    write_summary_csv(&summaries, out.join(SUMMARY_FILE))?;
    let text = format_headline(&table, &summaries);
    write_file(&out.join(REPORT_TEXT_FILE), text.as_bytes())?;
    Ok((table, text))
}
