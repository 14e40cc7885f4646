//! Training loop, evaluation and class-averaged metrics.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagstore::{self, BagManifest, Loaded, ManifestEntry, MemoryTracker};
use crate::milnet::{self, cosine_lr, init_params, LrSchedule, MilModel, ModelKind, OptimizerState};
use crate::mixer::{mix_bag, AugmentConfig, AugmentKind, DictionarySource, KeyIndex};
use crate::reducer::{self, BagDictionary, CovarianceMode};
use crate::rng::{self, stream};
use crate::{Error, Result};

/// Which bag files a manifest points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// RMX1 files with every instance.
    Full,
    /// RMXR prototype dictionaries.
    Reduced,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Full => "full",
            Representation::Reduced => "reduced",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Representation::Full),
            "reduced" => Ok(Representation::Reduced),
            other => Err(Error::config(format!("unknown representation {other:?}"))),
        }
    }
}

/// Tells full from reduced bags by the magic of the manifest's first file.
pub fn detect_representation(manifest: &BagManifest) -> Result<Representation> {
    use std::io::Read;
    let entry = manifest.entries.first().ok_or(Error::NoBags)?;
    let path = manifest.resolve(entry);
    let mut magic = [0u8; 4];
    std::fs::File::open(&path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Error::io(&path, e))?;
    if &magic == reducer::DICT_MAGIC {
        Ok(Representation::Reduced)
    } else if &magic == bagstore::BAG_MAGIC {
        Ok(Representation::Full)
    } else {
        Err(Error::BadMagic {
            path,
            expected: String::from_utf8_lossy(bagstore::BAG_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// ABMIL attention width or DSMIL query width.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub augment: AugmentConfig,
    pub representation: Representation,
    pub seed: u64,
    pub runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Abmil,
            hidden: milnet::DEFAULT_HIDDEN,
            epochs: 50,
            lr: 2e-4,
            augment: AugmentConfig::none(),
            representation: Representation::Reduced,
            seed: 0,
            runs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be >= 1"));
        }
        self.augment.validate()?;
        if self.representation == Representation::Full && self.augment.kind != AugmentKind::None {
            return Err(Error::config("augmentation requires reduced bags"));
        }
        LrSchedule::new(self.lr, 1)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Rate used for the epoch's first step.
    pub lr: f64,
    pub seconds: f64,
}

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,lr,seconds\n");
    for l in logs {
        out.push_str(&format!("{},{},{},{}\n", l.epoch, l.loss, l.lr, l.seconds));
    }
    out
}

/// Loads the bags of one manifest, charging their feature payloads to a
/// [`MemoryTracker`].
#[derive(Debug, Clone)]
pub struct BagStore {
    manifest: BagManifest,
    representation: Representation,
    tracker: MemoryTracker,
}

/// A bag ready for the model. Reduced bags keep their dictionary for mixing.
pub enum LoadedBag {
    Full(Loaded<Array2<f64>>, usize),
    Reduced(Loaded<BagDictionary>),
}

impl BagStore {
    pub fn new(manifest: BagManifest, representation: Representation) -> Self {
        BagStore {
            manifest,
            representation,
            tracker: MemoryTracker::new(),
        }
    }

    pub fn with_tracker(mut self, tracker: MemoryTracker) -> Self {
        self.tracker = tracker;
        self
    }

    pub fn manifest(&self) -> &BagManifest {
        &self.manifest
    }

    pub fn tracker(&self) -> &MemoryTracker {
        &self.tracker
    }

    fn check_label(entry: &ManifestEntry, file_label: usize) -> Result<()> {
        if entry.label != file_label {
            return Err(Error::config(format!(
                "file label {file_label} differs from manifest label {}",
                entry.label
            ))
            .in_bag(&entry.bag_id));
        }
        Ok(())
    }

    fn dictionary(&self, entry: &ManifestEntry) -> Result<Loaded<BagDictionary>> {
        let mut dict = reducer::read_dictionary(self.manifest.resolve(entry)).map_err(|e| e.in_bag(&entry.bag_id))?;
        Self::check_label(entry, dict.label)?;
        dict.bag_id.clone_from(&entry.bag_id);
        let guard = self.tracker.charge(dict.payload_bytes());
        Ok(Loaded::tracked(dict, guard))
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<LoadedBag> {
        match self.representation {
            Representation::Full => {
                let bag = bagstore::read_bag(self.manifest.resolve(entry)).map_err(|e| e.in_bag(&entry.bag_id))?;
                Self::check_label(entry, bag.label)?;
                let guard = self.tracker.charge(bag.payload_bytes());
                Ok(LoadedBag::Full(Loaded::tracked(bag.features_f64(), guard), bag.label))
            }
            Representation::Reduced => self.dictionary(entry).map(LoadedBag::Reduced),
        }
    }
}

impl DictionarySource for BagStore {
    fn load_dictionary(&self, bag_id: &str) -> Result<Loaded<BagDictionary>> {
        let entry = self
            .manifest
            .get(bag_id)
            .ok_or_else(|| Error::UnknownBag(bag_id.to_owned()))?;
        self.dictionary(entry)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MilModel,
    pub logs: Vec<EpochLog>,
    pub optimizer_steps: u64,
    pub mix_events: usize,
    pub peak_bag_bytes: usize,
}

/// Trains one model on `store`'s bags.
///
/// Every epoch visits the bags in a permutation seeded by `(seed, epoch)`.
/// Each bag is (optionally) mixed, then one Adam step is taken at the
/// cosine-annealed rate for the global step index.
pub fn train_on(store: &BagStore, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = store.manifest();
    if manifest.is_empty() {
        return Err(Error::NoBags);
    }
    if cfg.representation != store.representation {
        return Err(Error::config(format!(
            "config expects {} bags, store holds {}",
            cfg.representation, store.representation
        )));
    }
    let d = manifest.dim().expect("non-empty manifest");
    let mut model = init_params(cfg.model, d, manifest.class_count, cfg.hidden, cfg.seed)?;
    let mut state = OptimizerState::new(&model.tensor_sizes());
    let n = manifest.len();
    let schedule = LrSchedule::new(cfg.lr, (cfg.epochs * n) as u64)?;
    let key_index = KeyIndex::from_manifest(manifest);
    if cfg.augment.kind != AugmentKind::None {
        for class in 0..manifest.class_count {
            if key_index.class(class).is_empty() && manifest.entries.iter().any(|e| e.label == class) {
                return Err(Error::MissingClass(class));
            }
        }
    }
    if cfg.augment.kind.needs_covariance() {
        let first = store.dictionary(&manifest.entries[0])?;
        if first.covariance_mode() == CovarianceMode::None {
            return Err(Error::MissingCovariance);
        }
    }

    let mut aug_rng = rng::seeded(rng::derive(cfg.seed, stream::AUGMENT, 0));
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let mut mix_events = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(rng::derive(cfg.seed, stream::SHUFFLE, epoch as u64)));
        let first_lr = cosine_lr(step, &schedule)?;
        let mut loss_sum = 0.0;
        for &i in &order {
            let entry = &manifest.entries[i];
            let (loss, grads) = match store.load(entry)? {
                LoadedBag::Full(x, label) => model.backward(x.view(), label)?,
                LoadedBag::Reduced(dict) => {
                    let mixed = mix_bag(&dict, &key_index, store, &cfg.augment, &mut aug_rng)
                        .map_err(|e| e.in_bag(&entry.bag_id))?;
                    mix_events += mixed.events.len();
                    model.backward(mixed.instances.view(), mixed.label)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::config(format!("non-finite loss at step {step}")));
            }
            let lr = cosine_lr(step, &schedule)?;
            milnet::adam_step(&mut model, &grads, &mut state, lr)?;
            step += 1;
            loss_sum += loss;
        }
        if !model.is_finite() {
            return Err(Error::config(format!("non-finite parameters after epoch {epoch}")));
        }
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / n as f64,
            lr: first_lr,
            seconds: start.elapsed().as_secs_f64().max(1e-9),
        });
    }
    Ok(TrainOutcome {
        model,
        logs,
        optimizer_steps: state.step,
        mix_events,
        peak_bag_bytes: store.tracker().peak(),
    })
}

pub fn train(manifest: &BagManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_on(&BagStore::new(manifest.clone(), cfg.representation), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

impl Metrics {
    /// Mean of precision, recall and accuracy.
    pub fn average(&self) -> f64 {
        (self.precision + self.recall + self.accuracy) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricStd {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub average: f64,
}

/// Evaluation summary. Serialized with keys in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub average: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predictions. Averaged over runs for
    /// an aggregate report, so row sums stay equal to the class counts.
    pub confusion: Vec<Vec<f64>>,
    /// Population standard deviation over runs; zero for a single run.
    pub std: MetricStd,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let m = macro_metrics(&confusion)?;
        let per_class = per_class(&confusion);
        Ok(EvalReport {
            precision: m.precision,
            recall: m.recall,
            accuracy: m.accuracy,
            average: m.average(),
            per_class,
            confusion: confusion.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect(),
            std: MetricStd::default(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn per_class(confusion: &[Vec<u64>]) -> Vec<ClassMetrics> {
    let c = confusion.len();
    (0..c)
        .map(|k| {
            let tp = confusion[k][k];
            let predicted: u64 = (0..c).map(|r| confusion[r][k]).sum();
            let actual: u64 = confusion[k].iter().sum();
            ClassMetrics {
                precision: ratio(tp, predicted),
                recall: ratio(tp, actual),
                support: actual,
            }
        })
        .collect()
}

/// Class-averaged precision and recall, and overall accuracy, from a
/// confusion matrix with true classes as rows. A class whose denominator is
/// zero contributes 0 to the average.
pub fn macro_metrics(confusion: &[Vec<u64>]) -> Result<Metrics> {
    let c = confusion.len();
    if c == 0 || confusion.iter().any(|r| r.len() != c) {
        return Err(Error::config("confusion matrix must be square and non-empty"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::config("confusion matrix is all zero"));
    }
    let classes = per_class(confusion);
    let trace: u64 = (0..c).map(|k| confusion[k][k]).sum();
    Ok(Metrics {
        precision: classes.iter().map(|m| m.precision).sum::<f64>() / c as f64,
        recall: classes.iter().map(|m| m.recall).sum::<f64>() / c as f64,
        accuracy: trace as f64 / total as f64,
    })
}

/// Predicts every bag of `store` without augmentation.
pub fn evaluate_on(model: &MilModel, store: &BagStore) -> Result<EvalReport> {
    let manifest = store.manifest();
    if manifest.is_empty() {
        return Err(Error::NoBags);
    }
    let d = manifest.dim().expect("non-empty manifest");
    if d != model.dim() {
        return Err(Error::DimMismatch {
            expected: model.dim(),
            actual: d,
        });
    }
    if manifest.class_count != model.classes() {
        return Err(Error::config(format!(
            "model has {} classes, data has {}",
            model.classes(),
            manifest.class_count
        )));
    }
    let c = model.classes();
    let mut confusion = vec![vec![0u64; c]; c];
    for entry in &manifest.entries {
        let (pred, label) = match store.load(entry)? {
            LoadedBag::Full(x, label) => (model.predict(x.view())?, label),
            LoadedBag::Reduced(dict) => (model.predict(dict.centroids_f64().view())?, dict.label),
        };
        confusion[label][pred] += 1;
    }
    EvalReport::from_confusion(confusion)
}

pub fn evaluate(model: &MilModel, manifest: &BagManifest, representation: Representation) -> Result<EvalReport> {
    evaluate_on(model, &BagStore::new(manifest.clone(), representation))
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct RepeatedReport {
    pub aggregate: EvalReport,
    pub runs: Vec<RunResult>,
}

/// Mean and population standard deviation over per-run reports, in order.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or(Error::NoBags)?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let std = |f: &dyn Fn(&EvalReport) -> f64| {
        let mu = mean(f);
        (reports.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    let c = first.confusion.len();
    let confusion = (0..c)
        .map(|i| (0..c).map(|j| mean(&|r| r.confusion[i][j])).collect())
        .collect();
    let per_class = (0..first.per_class.len())
        .map(|k| ClassMetrics {
            precision: mean(&|r| r.per_class[k].precision),
            recall: mean(&|r| r.per_class[k].recall),
            support: first.per_class[k].support,
        })
        .collect();
    Ok(EvalReport {
        precision: mean(&|r| r.precision),
        recall: mean(&|r| r.recall),
        accuracy: mean(&|r| r.accuracy),
        average: mean(&|r| r.average),
        per_class,
        confusion,
        std: MetricStd {
            precision: std(&|r| r.precision),
            recall: std(&|r| r.recall),
            accuracy: std(&|r| r.accuracy),
            average: std(&|r| r.average),
        },
    })
}

/// Trains and evaluates `runs` models with seeds `seed, seed + 1, …`.
/// Runs execute in parallel; results are combined in seed order.
pub fn run_repeated(train_set: &BagManifest, test_set: &BagManifest, cfg: &TrainConfig, runs: usize) -> Result<RepeatedReport> {
    cfg.validate()?;
    if runs == 0 {
        return Err(Error::config("runs must be >= 1"));
    }
    let results: Vec<Result<RunResult>> = (0..runs as u64)
        .into_par_iter()
        .map(|i| {
            let run_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            };
            let outcome = train(train_set, &run_cfg)?;
            let report = evaluate(&outcome.model, test_set, cfg.representation)?;
            Ok(RunResult {
                seed: run_cfg.seed,
                outcome,
                report,
            })
        })
        .collect();
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(RepeatedReport {
        aggregate: aggregate(&reports)?,
        runs,
    })
}
