//! Mix-the-bag augmentation over reduced bags.
//!
//! A query bag is mixed with a key bag of the same class. For each query
//! prototype the nearest key prototype is located and, when the Bernoulli
//! gate fires, one of four edits is applied:
//!
//! * append: add the nearest key prototype as a new row;
//! * replace: overwrite the query prototype with it;
//! * interpolate: add `(1 - λ)·c_q + λ·c_k`;
//! * covary: add `c_q + λ·δ`, `δ ~ N(0, Σ_k)` from the nearest key cluster.
//!
//! Joint runs all four passes in that order, each on the previous output.

mod sampler;

use std::cell::OnceCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::bagstore::{BagManifest, Loaded};
use crate::linalg::sq_dist;
use crate::reducer::{BagDictionary, Covariances};
use crate::rng;
use crate::{Error, Result};

pub use sampler::{ridge, sample_gaussian_from_cov, ClusterCov, GaussianSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    None,
    Append,
    Replace,
    Interpolate,
    Covary,
    Joint,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 6] = [
        AugmentKind::None,
        AugmentKind::Append,
        AugmentKind::Replace,
        AugmentKind::Interpolate,
        AugmentKind::Covary,
        AugmentKind::Joint,
    ];

    pub fn needs_covariance(self) -> bool {
        matches!(self, AugmentKind::Covary | AugmentKind::Joint)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::None => "none",
            AugmentKind::Append => "append",
            AugmentKind::Replace => "replace",
            AugmentKind::Interpolate => "interpolate",
            AugmentKind::Covary => "covary",
            AugmentKind::Joint => "joint",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown augmentation {s:?}")))
    }
}

/// How the strength λ is chosen for each fired event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaPolicy {
    /// Uniform on the open interval (0, 1).
    Uniform,
    Fixed(f64),
}

impl LambdaPolicy {
    fn draw(self, rng: &mut rng::Rng) -> f64 {
        match self {
            LambdaPolicy::Uniform => rng.sample(Open01),
            LambdaPolicy::Fixed(v) => v,
        }
    }
}

impl fmt::Display for LambdaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaPolicy::Uniform => f.write_str("uniform"),
            LambdaPolicy::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for LambdaPolicy {
    type Err = Error;

    /// `uniform` or `fixed:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(LambdaPolicy::Uniform);
        }
        let v = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::config(format!("bad lambda policy {s:?}, expected uniform|fixed:<v>")))?;
        Ok(LambdaPolicy::Fixed(v))
    }
}

/// Whether the Bernoulli gate is drawn once per prototype or once per pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatePolicy {
    Prototype,
    Bag,
}

impl FromStr for GatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(GatePolicy::Prototype),
            "bag" => Ok(GatePolicy::Bag),
            other => Err(Error::config(format!("unknown gate {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    pub probability: f64,
    pub lambda: LambdaPolicy,
    pub gate: GatePolicy,
}

impl AugmentConfig {
    /// Defaults: p = 0.5 for single augmentations, 0.1 for joint, λ uniform,
    /// per-prototype gate.
    pub fn new(kind: AugmentKind) -> Self {
        let probability = match kind {
            AugmentKind::Joint => 0.1,
            _ => 0.5,
        };
        AugmentConfig {
            kind,
            probability,
            lambda: LambdaPolicy::Uniform,
            gate: GatePolicy::Prototype,
        }
    }

    pub fn none() -> Self {
        Self::new(AugmentKind::None)
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.probability = p;
        self
    }

    pub fn with_lambda(mut self, lambda: LambdaPolicy) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config(format!("p must lie in [0, 1], got {}", self.probability)));
        }
        if let LambdaPolicy::Fixed(v) = self.lambda {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("fixed lambda must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// One applied edit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixEvent {
    /// Row of the bag being edited, as it stood when the pass started.
    pub query_idx: usize,
    pub key_bag: String,
    pub key_idx: usize,
    pub kind: AugmentKind,
    pub lambda: Option<f64>,
}

/// Augmented instance matrix with an audit log of applied edits.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBag {
    /// `M × d`.
    pub instances: Array2<f64>,
    pub label: usize,
    pub events: Vec<MixEvent>,
}

impl MixedBag {
    /// The query's centroids, unmodified.
    pub fn identity(query: &BagDictionary) -> Self {
        MixedBag {
            instances: query.centroids_f64(),
            label: query.label,
            events: Vec::new(),
        }
    }

    pub fn n_instances(&self) -> usize {
        self.instances.nrows()
    }

    /// `query_idx,key_bag,key_idx,kind,lambda` with an empty λ for append
    /// and replace.
    pub fn provenance_csv(&self) -> String {
        let mut out = String::from("query_idx,key_bag,key_idx,kind,lambda\n");
        for e in &self.events {
            let lambda = e.lambda.map(|l| format!("{l}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.query_idx, e.key_bag, e.key_idx, e.kind, lambda
            ));
        }
        out
    }
}

/// A key dictionary widened to `f64`, with covariance factors computed on
/// first use.
pub struct KeyBag<'a> {
    dict: &'a BagDictionary,
    centroids: Array2<f64>,
    covariances: Covariances<f64>,
    samplers: Vec<OnceCell<GaussianSampler>>,
}

impl<'a> KeyBag<'a> {
    pub fn new(dict: &'a BagDictionary) -> Self {
        KeyBag {
            dict,
            centroids: dict.centroids_f64(),
            covariances: dict.covariances.to_f64(),
            samplers: (0..dict.n_prototypes()).map(|_| OnceCell::new()).collect(),
        }
    }

    fn sampler(&self, k: usize) -> Result<&GaussianSampler> {
        if let Some(s) = self.samplers[k].get() {
            return Ok(s);
        }
        let cov = match &self.covariances {
            Covariances::None => return Err(Error::MissingCovariance),
            Covariances::Diagonal(v) => ClusterCov::Diagonal(v.row(k)),
            Covariances::Full(m) => ClusterCov::Full(m.index_axis(Axis(0), k)),
        };
        let s = GaussianSampler::new(cov)?;
        Ok(self.samplers[k].get_or_init(|| s))
    }
}

/// Index of the key centroid closest to `query_proto` and its squared
/// distance. Ties go to the lower index.
pub fn nearest_key_prototype(query_proto: ArrayView1<'_, f64>, key: &BagDictionary) -> Result<(usize, f64)> {
    nearest_in(query_proto, &key.centroids_f64())
}

fn nearest_in(q: ArrayView1<'_, f64>, keys: &Array2<f64>) -> Result<(usize, f64)> {
    if q.len() != keys.ncols() {
        return Err(Error::DimMismatch {
            expected: keys.ncols(),
            actual: q.len(),
        });
    }
    let mut best = (0, f64::INFINITY);
    for (k, row) in keys.outer_iter().enumerate() {
        let d = sq_dist(q, row);
        if d < best.1 {
            best = (k, d);
        }
    }
    if keys.nrows() == 0 {
        return Err(Error::config("key bag has no prototypes"));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Edit {
    Append,
    Replace,
    Interpolate,
    Covary,
}

impl Edit {
    fn kind(self) -> AugmentKind {
        match self {
            Edit::Append => AugmentKind::Append,
            Edit::Replace => AugmentKind::Replace,
            Edit::Interpolate => AugmentKind::Interpolate,
            Edit::Covary => AugmentKind::Covary,
        }
    }
}

fn check_pair(bag: &MixedBag, key: &KeyBag<'_>) -> Result<()> {
    if bag.label != key.dict.label {
        return Err(Error::ClassMismatch {
            query: bag.label,
            key: key.dict.label,
        });
    }
    if bag.instances.ncols() != key.centroids.ncols() {
        return Err(Error::DimMismatch {
            expected: bag.instances.ncols(),
            actual: key.centroids.ncols(),
        });
    }
    Ok(())
}

/// One augmentation pass over every row of `bag`.
///
/// All gates are drawn first, then λ and δ for each fired row in order.
fn apply_pass(
    bag: &mut MixedBag,
    key: &KeyBag<'_>,
    edit: Edit,
    cfg: &AugmentConfig,
    rng: &mut rng::Rng,
) -> Result<()> {
    check_pair(bag, key)?;
    if edit == Edit::Covary && matches!(key.covariances, Covariances::None) {
        return Err(Error::MissingCovariance);
    }
    let m = bag.n_instances();
    let p = cfg.probability;
    let gates: Vec<bool> = match cfg.gate {
        GatePolicy::Prototype => (0..m).map(|_| rng.random_bool(p)).collect(),
        GatePolicy::Bag => vec![rng.random_bool(p); m],
    };

    let mut appended: Vec<Array1<f64>> = Vec::new();
    for (i, _) in gates.iter().enumerate().filter(|(_, &g)| g) {
        let (k, _) = nearest_in(bag.instances.row(i), &key.centroids)?;
        let key_row = key.centroids.row(k);
        let mut lambda = None;
        match edit {
            Edit::Append => appended.push(key_row.to_owned()),
            Edit::Replace => bag.instances.row_mut(i).assign(&key_row),
            Edit::Interpolate => {
                let l = cfg.lambda.draw(rng);
                lambda = Some(l);
                let q = bag.instances.row(i);
                appended.push(&q * (1.0 - l) + &key_row * l);
            }
            Edit::Covary => {
                let l = cfg.lambda.draw(rng);
                lambda = Some(l);
                let delta = key.sampler(k)?.sample(rng);
                appended.push(&bag.instances.row(i) + &(delta * l));
            }
        }
        bag.events.push(MixEvent {
            query_idx: i,
            key_bag: key.dict.bag_id.clone(),
            key_idx: k,
            kind: edit.kind(),
            lambda,
        });
    }
    if !appended.is_empty() {
        let views: Vec<_> = appended.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
        let extra = ndarray::concatenate(Axis(0), &views).expect("rows share d");
        bag.instances.append(Axis(0), extra.view()).expect("rows share d");
    }
    Ok(())
}

fn run(query: &BagDictionary, key: &BagDictionary, edits: &[Edit], cfg: &AugmentConfig, rng: &mut rng::Rng) -> Result<MixedBag> {
    cfg.validate()?;
    if query.label != key.label {
        return Err(Error::ClassMismatch {
            query: query.label,
            key: key.label,
        });
    }
    let key = KeyBag::new(key);
    let mut bag = MixedBag::identity(query);
    for &edit in edits {
        apply_pass(&mut bag, &key, edit, cfg, rng)?;
    }
    Ok(bag)
}

pub fn augment_append(query: &BagDictionary, key: &BagDictionary, cfg: &AugmentConfig, rng: &mut rng::Rng) -> Result<MixedBag> {
    run(query, key, &[Edit::Append], cfg, rng)
}

pub fn augment_replace(query: &BagDictionary, key: &BagDictionary, cfg: &AugmentConfig, rng: &mut rng::Rng) -> Result<MixedBag> {
    run(query, key, &[Edit::Replace], cfg, rng)
}

pub fn augment_interpolate(
    query: &BagDictionary,
    key: &BagDictionary,
    cfg: &AugmentConfig,
    rng: &mut rng::Rng,
) -> Result<MixedBag> {
    run(query, key, &[Edit::Interpolate], cfg, rng)
}

pub fn augment_covary(query: &BagDictionary, key: &BagDictionary, cfg: &AugmentConfig, rng: &mut rng::Rng) -> Result<MixedBag> {
    run(query, key, &[Edit::Covary], cfg, rng)
}

pub fn augment_joint(query: &BagDictionary, key: &BagDictionary, cfg: &AugmentConfig, rng: &mut rng::Rng) -> Result<MixedBag> {
    if key.covariance_mode() == crate::reducer::CovarianceMode::None {
        return Err(Error::MissingCovariance);
    }
    run(
        query,
        key,
        &[Edit::Append, Edit::Replace, Edit::Interpolate, Edit::Covary],
        cfg,
        rng,
    )
}

/// Applies `cfg.kind` to `query` with an explicit key bag.
pub fn augment(query: &BagDictionary, key: &BagDictionary, cfg: &AugmentConfig, rng: &mut rng::Rng) -> Result<MixedBag> {
    match cfg.kind {
        AugmentKind::None => {
            cfg.validate()?;
            Ok(MixedBag::identity(query))
        }
        AugmentKind::Append => augment_append(query, key, cfg, rng),
        AugmentKind::Replace => augment_replace(query, key, cfg, rng),
        AugmentKind::Interpolate => augment_interpolate(query, key, cfg, rng),
        AugmentKind::Covary => augment_covary(query, key, cfg, rng),
        AugmentKind::Joint => augment_joint(query, key, cfg, rng),
    }
}

/// Key bag ids grouped by class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyIndex {
    per_class: Vec<Vec<String>>,
}

impl KeyIndex {
    pub fn from_manifest(manifest: &BagManifest) -> Self {
        let mut per_class = vec![Vec::new(); manifest.class_count];
        for e in &manifest.entries {
            per_class[e.label].push(e.bag_id.clone());
        }
        KeyIndex { per_class }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut per_class: Vec<Vec<String>> = Vec::new();
        for (id, label) in pairs {
            if per_class.len() <= label {
                per_class.resize(label + 1, Vec::new());
            }
            per_class[label].push(id.to_owned());
        }
        KeyIndex { per_class }
    }

    pub fn class(&self, label: usize) -> &[String] {
        self.per_class.get(label).map_or(&[], Vec::as_slice)
    }

    /// Uniform draw from `label`'s bags other than `exclude`. Falls back to
    /// `exclude` itself when it is the only bag of its class.
    pub fn sample_key<'s>(&'s self, label: usize, exclude: &'s str, rng: &mut rng::Rng) -> Result<&'s str> {
        let bags = self.class(label);
        if bags.is_empty() {
            return Err(Error::MissingClass(label));
        }
        let others: Vec<&String> = bags.iter().filter(|b| b.as_str() != exclude).collect();
        if others.is_empty() {
            return Ok(exclude);
        }
        Ok(others[rng.random_range(0..others.len())].as_str())
    }
}

/// Where key dictionaries come from.
pub trait DictionarySource {
    fn load_dictionary(&self, bag_id: &str) -> Result<Loaded<BagDictionary>>;
}

impl DictionarySource for BTreeMap<String, BagDictionary> {
    fn load_dictionary(&self, bag_id: &str) -> Result<Loaded<BagDictionary>> {
        self.get(bag_id)
            .cloned()
            .map(Loaded::untracked)
            .ok_or_else(|| Error::UnknownBag(bag_id.to_owned()))
    }
}

impl DictionarySource for HashMap<String, BagDictionary> {
    fn load_dictionary(&self, bag_id: &str) -> Result<Loaded<BagDictionary>> {
        self.get(bag_id)
            .cloned()
            .map(Loaded::untracked)
            .ok_or_else(|| Error::UnknownBag(bag_id.to_owned()))
    }
}

impl DictionarySource for [BagDictionary] {
    fn load_dictionary(&self, bag_id: &str) -> Result<Loaded<BagDictionary>> {
        self.iter()
            .find(|d| d.bag_id == bag_id)
            .cloned()
            .map(Loaded::untracked)
            .ok_or_else(|| Error::UnknownBag(bag_id.to_owned()))
    }
}

/// Draws a same-class key bag and applies the configured augmentation.
///
/// `None` returns the query centroids without consuming randomness.
pub fn mix_bag<S: DictionarySource + ?Sized>(
    query: &BagDictionary,
    index: &KeyIndex,
    dictionaries: &S,
    cfg: &AugmentConfig,
    rng: &mut rng::Rng,
) -> Result<MixedBag> {
    cfg.validate()?;
    if cfg.kind == AugmentKind::None {
        return Ok(MixedBag::identity(query));
    }
    let key_id = index.sample_key(query.label, &query.bag_id, rng)?;
    if key_id == query.bag_id {
        return augment(query, query, cfg, rng);
    }
    let key = dictionaries.load_dictionary(key_id)?;
    augment(query, &key, cfg, rng)
}
