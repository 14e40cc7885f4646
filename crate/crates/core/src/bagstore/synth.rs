//! Synthetic MIL datasets with a known generating process.
//!
//! Each class owns a few "evidence" Gaussian components; all classes share a
//! set of "background" components. A bag of class `c` with `N` instances
//! draws `ceil(rho * N)` instances from class-`c` evidence components and the
//! rest from background, then shuffles them. Every instance's source
//! component is written to a generation record next to the manifests.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_bag, BagManifest, FeatureBag, ManifestEntry, Split, BAG_EXTENSION};
use crate::rng::{self, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class_count: usize,
    pub dim: usize,
    pub train_bags_per_class: usize,
    pub test_bags_per_class: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub background_components: usize,
    pub evidence_components_per_class: usize,
    pub component_std: f64,
    /// Fraction of each bag drawn from its class's evidence components.
    pub evidence_fraction: f64,
    /// Minimum pairwise distance between component means. Independent of
    /// `component_std`, so raising the std makes the task harder.
    pub mean_separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 2,
            dim: 32,
            train_bags_per_class: 100,
            test_bags_per_class: 50,
            min_instances: 200,
            max_instances: 800,
            background_components: 4,
            evidence_components_per_class: 2,
            component_std: 0.3,
            evidence_fraction: 0.2,
            mean_separation: 3.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_owned()));
        if self.class_count < 2 {
            return fail("class_count must be >= 2");
        }
        if self.dim == 0 {
            return fail("dim must be >= 1");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail("instance range must satisfy 1 <= min <= max");
        }
        if self.background_components == 0 || self.evidence_components_per_class == 0 {
            return fail("component counts must be >= 1");
        }
        if !(self.component_std > 0.0 && self.component_std.is_finite()) {
            return fail("component_std must be positive");
        }
        if !(self.mean_separation > 0.0 && self.mean_separation.is_finite()) {
            return fail("mean_separation must be positive");
        }
        if !(self.evidence_fraction > 0.0 && self.evidence_fraction <= 1.0) {
            return fail("evidence_fraction must lie in (0, 1]");
        }
        if self.evidence_fraction * (self.min_instances as f64) < 1.0 {
            return fail("evidence_fraction * min_instances must be >= 1");
        }
        Ok(())
    }

    pub fn component_count(&self) -> usize {
        self.background_components + self.class_count * self.evidence_components_per_class
    }

    /// Number of evidence instances in a bag of `n` instances.
    pub fn evidence_count(&self, n: usize) -> usize {
        // Guard against 0.2 * 40 = 8.000000000000002 style rounding.
        let exact = self.evidence_fraction * n as f64;
        ((exact - 1e-9).ceil() as usize).clamp(1, n)
    }
}

/// A generating Gaussian component. Background components have no class.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub id: usize,
    pub class: Option<usize>,
    pub mean: Array1<f64>,
}

impl Component {
    pub fn is_evidence(&self) -> bool {
        self.class.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub bag_id: String,
    pub instance_index: usize,
    pub component_id: usize,
    pub is_evidence: u8,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: BagManifest,
    pub test: BagManifest,
    pub components: Vec<Component>,
    pub train_manifest_path: PathBuf,
    pub test_manifest_path: PathBuf,
}

/// Places `count` means so the closest pair is exactly `separation` apart.
fn place_means(cfg: &SynthConfig, rng: &mut rng::Rng) -> Vec<Array1<f64>> {
    let count = cfg.component_count();
    let draw = |rng: &mut rng::Rng| -> Vec<Array1<f64>> {
        (0..count)
            .map(|_| Array1::from_shape_fn(cfg.dim, |_| rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let spread = |pts: &[Array1<f64>]| -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut max_norm: f64 = 0.0;
        for (i, a) in pts.iter().enumerate() {
            max_norm = max_norm.max(a.dot(a).sqrt());
            for b in &pts[i + 1..] {
                min = min.min(crate::linalg::sq_dist(a.view(), b.view()).sqrt());
            }
        }
        (min, max_norm)
    };
    // Keep the most evenly spread of a few candidate sets.
    let mut best: Option<(f64, Vec<Array1<f64>>)> = None;
    for _ in 0..16 {
        let pts = draw(rng);
        let (min, max_norm) = spread(&pts);
        let score = if count == 1 { 1.0 } else { min / max_norm.max(1e-12) };
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, pts));
        }
    }
    let pts = best.expect("at least one candidate").1;
    let (min, _) = spread(&pts);
    let scale = if min.is_finite() && min > 0.0 {
        cfg.mean_separation / min
    } else {
        cfg.mean_separation
    };
    pts.into_iter().map(|p| p * scale).collect()
}

fn components(cfg: &SynthConfig) -> Vec<Component> {
    let mut rng = rng::seeded(rng::derive(cfg.seed, stream::SYNTH, 0));
    let means = place_means(cfg, &mut rng);
    means
        .into_iter()
        .enumerate()
        .map(|(id, mean)| {
            let class = id
                .checked_sub(cfg.background_components)
                .map(|e| e / cfg.evidence_components_per_class);
            Component { id, class, mean }
        })
        .collect()
}

fn generate_bag(
    cfg: &SynthConfig,
    comps: &[Component],
    bag_id: &str,
    label: usize,
) -> (FeatureBag, Vec<GenerationRow>) {
    let mut rng = rng::seeded(rng::bag_seed(cfg.seed, bag_id));
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let n_evidence = cfg.evidence_count(n);
    let evidence_base = cfg.background_components + label * cfg.evidence_components_per_class;

    let mut sources: Vec<usize> = (0..n)
        .map(|i| {
            if i < n_evidence {
                evidence_base + rng.random_range(0..cfg.evidence_components_per_class)
            } else {
                rng.random_range(0..cfg.background_components)
            }
        })
        .collect();
    sources.shuffle(&mut rng);

    let mut features = Array2::<f32>::zeros((n, cfg.dim));
    for (mut row, &src) in features.rows_mut().into_iter().zip(&sources) {
        let mean = &comps[src].mean;
        for (x, m) in row.iter_mut().zip(mean.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *x = (m + cfg.component_std * z) as f32;
        }
    }
    let record = sources
        .iter()
        .enumerate()
        .map(|(i, &src)| GenerationRow {
            bag_id: bag_id.to_owned(),
            instance_index: i,
            component_id: src,
            is_evidence: u8::from(comps[src].is_evidence()),
        })
        .collect();
    let bag = FeatureBag {
        bag_id: bag_id.to_owned(),
        label,
        features,
    };
    (bag, record)
}

fn write_split(
    cfg: &SynthConfig,
    comps: &[Component],
    out_dir: &Path,
    split: Split,
    per_class: usize,
) -> Result<BagManifest> {
    let bag_dir = out_dir.join(split.to_string());
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::new();
    let mut record = csv::Writer::from_writer(Vec::new());
    for label in 0..cfg.class_count {
        for j in 0..per_class {
            let bag_id = format!("{split}_{:05}", label * per_class + j);
            let (bag, rows) = generate_bag(cfg, comps, &bag_id, label);
            let rel = format!("{split}/{bag_id}.{BAG_EXTENSION}");
            write_bag(&bag, out_dir.join(&rel))?;
            for row in rows {
                record.serialize(row).expect("in-memory csv write");
            }
            entries.push(ManifestEntry {
                bag_id,
                label,
                path: rel,
                n_instances: bag.n_instances(),
                dim: bag.dim(),
            });
        }
    }
    let record_path = out_dir.join(format!("{split}_generation.csv"));
    super::write_file(&record_path, &record.into_inner().expect("flush"))?;
    let manifest = BagManifest::new(entries, cfg.class_count, split, out_dir)?;
    let manifest_path = out_dir.join(format!("{split}.csv"));
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

fn write_components(comps: &[Component], path: &Path) -> Result<()> {
    let mut out = String::from("component_id,class,is_evidence,mean\n");
    for c in comps {
        let mean: Vec<String> = c.mean.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            c.id,
            c.class.map(|k| k.to_string()).unwrap_or_default(),
            u8::from(c.is_evidence()),
            mean.join(" ")
        ));
    }
    super::write_file(path, out.as_bytes())
}

/// Generates train and test splits under `out_dir`.
///
/// Layout: `train.csv`, `test.csv`, `train_generation.csv`,
/// `test_generation.csv`, `components.csv`, and `train/`, `test/` holding
/// one RMX1 file per bag. Output is a pure function of `cfg`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let comps = components(cfg);
    write_components(&comps, &out_dir.join("components.csv"))?;
    let train = write_split(cfg, &comps, out_dir, Split::Train, cfg.train_bags_per_class)?;
    let test = write_split(cfg, &comps, out_dir, Split::Test, cfg.test_bags_per_class)?;
    Ok(SynthOutput {
        train,
        test,
        components: comps,
        train_manifest_path: out_dir.join("train.csv"),
        test_manifest_path: out_dir.join("test.csv"),
    })
}

pub fn read_generation_record(path: impl AsRef<Path>) -> Result<Vec<GenerationRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_owned(),
        line: 0,
        message: e.to_string(),
    })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| Error::Manifest {
                path: path.to_owned(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })
        })
        .collect()
}
