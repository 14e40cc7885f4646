//! Per-bag K-Means reduction into prototype dictionaries.
//!
//! A bag of `N` instances becomes `K' = min(K, N)` centroids, each with the
//! number of instances it absorbed and, optionally, the covariance of those
//! instances. Dictionaries are stored as RMXR files:
//!
//! ```text
//! "RMXR" | u32 K' | u32 d | u32 label | u8 mode (0 none, 1 diag, 2 full)
//! u32 member count × K'
//! f32 centroids, K'·d row-major
//! f32 covariances: none → absent, diag → K'·d, full → K'·d·d
//! ```
//!
//! All integers and floats are little-endian.

mod covariance;
mod kmeans;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagstore::{
    self, check_finite, checked_len, push_f32s, push_u32, read_bag, to_u32, BagManifest, FeatureBag,
    ManifestEntry, Reader,
};
use crate::rng;
use crate::{Error, Result};

pub use covariance::{compute_cluster_covariance, Covariances};
pub use kmeans::{assign, kmeans_fit, ClusterResult, MONOTONE_SLACK};

pub const DICT_MAGIC: &[u8; 4] = b"RMXR";
pub const DICT_EXTENSION: &str = "rmxr";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    None,
    #[serde(rename = "diag")]
    Diagonal,
    Full,
}

impl CovarianceMode {
    /// `Full` up to 256 dimensions, `Diagonal` above.
    pub fn default_for_dim(d: usize) -> Self {
        if d <= 256 {
            CovarianceMode::Full
        } else {
            CovarianceMode::Diagonal
        }
    }

    fn code(self) -> u8 {
        match self {
            CovarianceMode::None => 0,
            CovarianceMode::Diagonal => 1,
            CovarianceMode::Full => 2,
        }
    }
}

impl fmt::Display for CovarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovarianceMode::None => "none",
            CovarianceMode::Diagonal => "diag",
            CovarianceMode::Full => "full",
        })
    }
}

impl FromStr for CovarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CovarianceMode::None),
            "diag" | "diagonal" => Ok(CovarianceMode::Diagonal),
            "full" => Ok(CovarianceMode::Full),
            other => Err(Error::config(format!("unknown covariance mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceConfig {
    pub k: usize,
    pub covariance: CovarianceMode,
    pub max_iterations: usize,
    /// Lloyd stops once the centroid shift, relative to the centroid norm,
    /// falls to this value.
    pub tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
    /// L2-normalize instances before clustering.
    pub normalize: bool,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        ReduceConfig {
            k: 8,
            covariance: CovarianceMode::Full,
            max_iterations: 100,
            tolerance: 1e-4,
            restarts: 1,
            seed: 0,
            normalize: false,
        }
    }
}

impl ReduceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be ≥ 1"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::config("tolerance must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max iterations must be ≥ 1"));
        }
        if self.restarts == 0 {
            return Err(Error::config("restarts must be ≥ 1"));
        }
        Ok(())
    }
}

/// A reduced bag: centroids, member counts and optional covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct BagDictionary {
    pub bag_id: String,
    pub label: usize,
    /// `K' × d`.
    pub centroids: Array2<f32>,
    pub covariances: Covariances<f32>,
    pub member_counts: Vec<u32>,
}

impl BagDictionary {
    pub fn n_prototypes(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn covariance_mode(&self) -> CovarianceMode {
        self.covariances.mode()
    }

    pub fn centroids_f64(&self) -> Array2<f64> {
        self.centroids.mapv(f64::from)
    }

    /// Bytes of the centroid payload, the part consumed as bag features.
    pub fn payload_bytes(&self) -> usize {
        self.centroids.len() * std::mem::size_of::<f32>()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d) = self.centroids.dim();
        if k == 0 || d == 0 {
            return Err(Error::InvalidHeader(format!("dictionary {} is empty", self.bag_id)));
        }
        if self.member_counts.len() != k || self.member_counts.contains(&0) {
            return Err(Error::InvalidHeader(format!(
                "dictionary {} has invalid member counts",
                self.bag_id
            )));
        }
        check_finite(&self.centroids)?;
        let shape_ok = match &self.covariances {
            Covariances::None => true,
            Covariances::Diagonal(v) => v.dim() == (k, d),
            Covariances::Full(m) => m.dim() == (k, d, d),
        };
        if !shape_ok {
            return Err(Error::InvalidHeader(format!(
                "dictionary {} covariance shape does not match {k}x{d}",
                self.bag_id
            )));
        }
        Ok(())
    }
}

pub fn encode_dictionary(dict: &BagDictionary) -> Result<Vec<u8>> {
    dict.validate()?;
    let (k, d) = dict.centroids.dim();
    let mut buf = Vec::with_capacity(17 + 4 * k + 4 * k * d);
    buf.extend_from_slice(DICT_MAGIC);
    push_u32(&mut buf, to_u32(k, "prototype count")?);
    push_u32(&mut buf, to_u32(d, "dimension")?);
    push_u32(&mut buf, to_u32(dict.label, "label")?);
    buf.push(dict.covariance_mode().code());
    for &m in &dict.member_counts {
        push_u32(&mut buf, m);
    }
    push_f32s(&mut buf, dict.centroids.iter());
    match &dict.covariances {
        Covariances::None => {}
        Covariances::Diagonal(v) => push_f32s(&mut buf, v.iter()),
        Covariances::Full(m) => push_f32s(&mut buf, m.iter()),
    }
    Ok(buf)
}

pub fn write_dictionary(dict: &BagDictionary, path: impl AsRef<Path>) -> Result<()> {
    let buf = encode_dictionary(dict)?;
    bagstore::write_file(path.as_ref(), &buf)
}

pub fn decode_dictionary(path: &Path, bytes: &[u8]) -> Result<BagDictionary> {
    let mut r = Reader::new(path, bytes);
    r.magic(DICT_MAGIC)?;
    let k = r.u32()?;
    let d = r.u32()?;
    let label = r.u32()? as usize;
    let mode = match r.u8()? {
        0 => CovarianceMode::None,
        1 => CovarianceMode::Diagonal,
        2 => CovarianceMode::Full,
        other => {
            return Err(Error::InvalidHeader(format!(
                "{}: unknown covariance mode {other}",
                path.display()
            )))
        }
    };
    if k == 0 || d == 0 {
        return Err(Error::InvalidHeader(format!("{}: empty shape {k}x{d}", path.display())));
    }
    let kd = checked_len(path, &[k, d])?;
    let cov_len = match mode {
        CovarianceMode::None => 0,
        CovarianceMode::Diagonal => kd,
        CovarianceMode::Full => checked_len(path, &[k, d, d])?,
    };
    let total = (k as u64)
        .checked_add(kd as u64)
        .and_then(|v| v.checked_add(cov_len as u64))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| bagstore::overflow(path))?;
    r.require(total)?;

    let member_counts = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let (k, d) = (k as usize, d as usize);
    let centroids = Array2::from_shape_vec((k, d), r.f32s(kd)?).expect("length checked");
    let covariances = match mode {
        CovarianceMode::None => Covariances::None,
        CovarianceMode::Diagonal => {
            Covariances::Diagonal(Array2::from_shape_vec((k, d), r.f32s(kd)?).expect("length checked"))
        }
        CovarianceMode::Full => {
            Covariances::Full(Array3::from_shape_vec((k, d, d), r.f32s(cov_len)?).expect("length checked"))
        }
    };
    r.finish()?;
    let dict = BagDictionary {
        bag_id: bagstore::file_stem(path),
        label,
        centroids,
        covariances,
        member_counts,
    };
    dict.validate()?;
    Ok(dict)
}

pub fn read_dictionary(path: impl AsRef<Path>) -> Result<BagDictionary> {
    let path = path.as_ref();
    decode_dictionary(path, &bagstore::read_file(path)?)
}

fn normalized(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Reduces one bag. The clustering seed is derived from `cfg.seed` and the
/// bag id, so the result does not depend on which other bags are reduced or
/// in what order.
pub fn reduce_bag(bag: &FeatureBag, cfg: &ReduceConfig) -> Result<BagDictionary> {
    cfg.validate()?;
    bag.validate()?;
    let mut x = bag.features_f64();
    if cfg.normalize {
        x = normalized(&x);
    }
    let n = x.nrows();

    let (centroids, assignments) = if n <= cfg.k {
        (x.clone(), (0..n).collect::<Vec<_>>())
    } else {
        let bag_cfg = ReduceConfig {
            seed: rng::bag_seed(cfg.seed, &bag.bag_id),
            ..cfg.clone()
        };
        let (c, r) = kmeans_fit(x.view(), &bag_cfg)?;
        (c, r.assignments)
    };
    let covariances =
        compute_cluster_covariance(x.view(), &assignments, centroids.view(), cfg.covariance)?;
    let mut member_counts = vec![0u32; centroids.nrows()];
    for &a in &assignments {
        member_counts[a] += 1;
    }
    Ok(BagDictionary {
        bag_id: bag.bag_id.clone(),
        label: bag.label,
        centroids: centroids.mapv(|v| v as f32),
        covariances: covariances.to_f32(),
        member_counts,
    })
}

/// Reduces every bag of `manifest` into `out_dir/<split>/<bag_id>.rmxr` and
/// writes the reduced manifest to `out_dir/<split>.csv`.
///
/// Bags are processed on up to `threads` workers (all cores when `None`).
/// Output bytes do not depend on the thread count. If any bag fails, files
/// written by this call are removed and the first failure in manifest order
/// is returned.
pub fn reduce_dataset(
    manifest: &BagManifest,
    cfg: &ReduceConfig,
    out_dir: impl AsRef<Path>,
    threads: Option<usize>,
) -> Result<BagManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let split = manifest.split.to_string();
    let bag_dir = out_dir.join(&split);
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;

    let work = |entry: &ManifestEntry| -> Result<(ManifestEntry, PathBuf)> {
        let run = || -> Result<(ManifestEntry, PathBuf)> {
            let bag = read_bag(manifest.resolve(entry))?;
            let bag = FeatureBag {
                bag_id: entry.bag_id.clone(),
                ..bag
            };
            if bag.label != entry.label {
                return Err(Error::config(format!(
                    "file label {} differs from manifest label {}",
                    bag.label, entry.label
                )));
            }
            let dict = reduce_bag(&bag, cfg)?;
            let rel = format!("{split}/{}.{DICT_EXTENSION}", entry.bag_id);
            let path = out_dir.join(&rel);
            write_dictionary(&dict, &path)?;
            let reduced = ManifestEntry {
                bag_id: entry.bag_id.clone(),
                label: entry.label,
                path: rel,
                n_instances: dict.n_prototypes(),
                dim: dict.dim(),
            };
            Ok((reduced, path))
        };
        run().map_err(|e| e.in_bag(&entry.bag_id))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results: Vec<Result<(ManifestEntry, PathBuf)>> =
        pool.install(|| manifest.entries.par_iter().map(work).collect());

    if results.iter().any(Result::is_err) {
        let mut first = None;
        for r in results {
            match r {
                Ok((_, path)) => {
                    let _ = fs::remove_file(path);
                }
                Err(e) if first.is_none() => first = Some(e),
                Err(_) => {}
            }
        }
        return Err(first.expect("at least one error"));
    }
    let entries = results.into_iter().map(|r| r.expect("checked").0).collect();
    let mut reduced = BagManifest::new(entries, manifest.class_count, manifest.split, out_dir)?;
    reduced.class_names = manifest.class_names.clone();
    reduced.write(out_dir.join(format!("{split}.csv")))?;
    Ok(reduced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagstore::{write_bag, Split};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_bag(id: &str, n: usize, d: usize, seed: u64) -> FeatureBag {
        let mut rng = rng::seeded(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f32, _>(StandardNormal));
        FeatureBag::new(id, 1, x).unwrap()
    }

    #[test]
    fn identical_instances_single_prototype() {
        let bag = FeatureBag::new("same", 0, array![[1.5, -2.0], [1.5, -2.0], [1.5, -2.0]]).unwrap();
        let dict = reduce_bag(&bag, &ReduceConfig { k: 1, ..Default::default() }).unwrap();
        assert_eq!(dict.centroids, array![[1.5f32, -2.0]]);
        assert_eq!(dict.member_counts, vec![3]);
        let Covariances::Full(m) = &dict.covariances else { panic!() };
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_bag_clamps_k() {
        let bag = random_bag("five", 5, 3, 1);
        let dict = reduce_bag(&bag, &ReduceConfig { k: 8, ..Default::default() }).unwrap();
        assert_eq!(dict.n_prototypes(), 5);
        assert_eq!(dict.centroids, bag.features);
        assert_eq!(dict.member_counts, vec![1; 5]);
    }

    #[test]
    fn k8_gives_eight_prototypes() {
        let bag = random_bag("big", 100, 4, 2);
        let dict = reduce_bag(&bag, &ReduceConfig { k: 8, ..Default::default() }).unwrap();
        assert_eq!(dict.n_prototypes(), 8);
        assert_eq!(dict.member_counts.iter().sum::<u32>(), 100);
    }

    #[test]
    fn centroids_are_member_means() {
        let bag = random_bag("m", 300, 6, 3);
        let cfg = ReduceConfig { k: 5, ..Default::default() };
        let x = bag.features_f64();
        let seeded = ReduceConfig { seed: rng::bag_seed(0, "m"), ..cfg.clone() };
        let (c, r) = kmeans_fit(x.view(), &seeded).unwrap();
        for k in 0..c.nrows() {
            let members: Vec<usize> = (0..300).filter(|&i| r.assignments[i] == k).collect();
            for j in 0..6 {
                let mean = members.iter().map(|&i| x[[i, j]]).sum::<f64>() / members.len() as f64;
                assert!((c[[k, j]] - mean).abs() <= 1e-5 * mean.abs().max(1.0));
            }
        }
        let dict = reduce_bag(&bag, &cfg).unwrap();
        assert_eq!(dict.centroids, c.mapv(|v| v as f32));
    }

    #[test]
    fn dictionary_round_trip() {
        let bag = random_bag("rt", 40, 3, 4);
        for mode in [CovarianceMode::None, CovarianceMode::Diagonal, CovarianceMode::Full] {
            let dict = reduce_bag(&bag, &ReduceConfig { k: 4, covariance: mode, ..Default::default() }).unwrap();
            let buf = encode_dictionary(&dict).unwrap();
            let expected_len = 17 + 4 * 4 + 4 * 12
                + match mode {
                    CovarianceMode::None => 0,
                    CovarianceMode::Diagonal => 4 * 12,
                    CovarianceMode::Full => 4 * 36,
                };
            assert_eq!(buf.len(), expected_len);
            let back = decode_dictionary(Path::new("rt.rmxr"), &buf).unwrap();
            assert_eq!(back, dict);
        }
    }

    #[test]
    fn dictionary_rejects_corruption() {
        let bag = random_bag("c", 20, 2, 5);
        let buf = encode_dictionary(&reduce_bag(&bag, &ReduceConfig { k: 2, ..Default::default() }).unwrap())
            .unwrap();
        let mut bad = buf.clone();
        bad[..4].copy_from_slice(b"RMX1");
        assert!(matches!(decode_dictionary(Path::new("c.rmxr"), &bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_dictionary(Path::new("c.rmxr"), &buf[..buf.len() - 4]),
            Err(Error::Truncated { .. })
        ));
        let mut mode = buf.clone();
        mode[16] = 9;
        assert!(decode_dictionary(Path::new("c.rmxr"), &mode).is_err());
    }

    #[test]
    fn k_zero_rejected() {
        let err = ReduceConfig { k: 0, ..Default::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("K must be ≥ 1"));
    }

    fn tiny_dataset(dir: &Path, sizes: &[usize]) -> BagManifest {
        let mut entries = Vec::new();
        for (i, &n) in sizes.iter().enumerate() {
            let id = format!("bag{i}");
            let mut bag = random_bag(&id, n, 3, 10 + i as u64);
            bag.label = i % 2;
            write_bag(&bag, dir.join(format!("{id}.rmx1"))).unwrap();
            entries.push(ManifestEntry {
                bag_id: id.clone(),
                label: i % 2,
                path: format!("{id}.rmx1"),
                n_instances: n,
                dim: 3,
            });
        }
        BagManifest::new(entries, 2, Split::Train, dir).unwrap()
    }

    #[test]
    fn dataset_reduction_is_thread_independent() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(dir.path(), &[12, 30, 9, 50, 4, 17]);
        let cfg = ReduceConfig { k: 4, seed: 9, ..Default::default() };
        let one = reduce_dataset(&m, &cfg, dir.path().join("a"), Some(1)).unwrap();
        let many = reduce_dataset(&m, &cfg, dir.path().join("b"), Some(4)).unwrap();
        assert_eq!(one.entries, many.entries);
        assert_eq!(
            one.entries.iter().map(|e| e.n_instances).collect::<Vec<_>>(),
            vec![4, 4, 4, 4, 4, 4]
        );
        for e in &one.entries {
            let a = fs::read(one.resolve(e)).unwrap();
            let b = fs::read(many.resolve(e)).unwrap();
            assert_eq!(a, b);
        }
        let reread = bagstore::read_manifest(dir.path().join("a/train.csv")).unwrap();
        assert_eq!(reread.entries, one.entries);
    }

    #[test]
    fn failed_bag_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_dataset(dir.path(), &[10, 10, 10]);
        m.entries[1].path = "missing.rmx1".into();
        let out = dir.path().join("out");
        let err = reduce_dataset(&m, &ReduceConfig { k: 2, ..Default::default() }, &out, Some(2)).unwrap_err();
        assert!(err.to_string().contains("bag1"));
        assert_eq!(fs::read_dir(out.join("train")).unwrap().count(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn counts_sum_and_clamp(n in 1usize..80, k in 1usize..12, seed in 0u64..1000) {
            let bag = random_bag("p", n, 3, seed);
            let dict = reduce_bag(&bag, &ReduceConfig { k, seed, ..Default::default() }).unwrap();
            prop_assert_eq!(dict.n_prototypes(), k.min(n));
            prop_assert_eq!(dict.member_counts.iter().map(|&m| m as usize).sum::<usize>(), n);
            prop_assert!(dict.member_counts.iter().all(|&m| m >= 1));
        }
    }
}
