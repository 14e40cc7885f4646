//! Training-budget measurement: wall time per epoch and peak resident bag
//! payload for full and reduced bags.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::bagstore::BagManifest;
use crate::trainer::{train_on, BagStore, Representation, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub mode: Representation,
    pub epochs: usize,
    /// Mean wall-clock seconds per epoch, first (warm-up) epoch excluded.
    pub seconds_per_epoch: f64,
    /// Largest number of bag feature payload bytes resident at once.
    pub peak_bag_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedBench {
    pub full: BenchReport,
    pub reduced: BenchReport,
    /// Full seconds/epoch over reduced seconds/epoch.
    pub speedup: f64,
    /// Full peak bytes over reduced peak bytes.
    pub memory_ratio: f64,
}

/// Trains once on `manifest` and reports the measured cost. Needs at least
/// two epochs since the first one is not timed.
pub fn bench_mode(manifest: &BagManifest, mode: Representation, cfg: &TrainConfig) -> Result<BenchReport> {
    if cfg.epochs < 2 {
        return Err(Error::config("bench needs at least 2 epochs (one is warm-up)"));
    }
    let cfg = TrainConfig {
        representation: mode,
        ..cfg.clone()
    };
    let store = BagStore::new(manifest.clone(), mode);
    let outcome = train_on(&store, &cfg)?;
    let timed = &outcome.logs[1..];
    Ok(BenchReport {
        mode,
        epochs: cfg.epochs,
        seconds_per_epoch: timed.iter().map(|l| l.seconds).sum::<f64>() / timed.len() as f64,
        peak_bag_bytes: outcome.peak_bag_bytes as u64,
    })
}

fn bag_ids(m: &BagManifest) -> BTreeSet<&str> {
    m.entries.iter().map(|e| e.bag_id.as_str()).collect()
}

/// Runs full then reduced training with the same seed, epochs and bag ids.
/// Augmentation is switched off so that only the representation differs.
pub fn bench_paired(full: &BagManifest, reduced: &BagManifest, cfg: &TrainConfig) -> Result<PairedBench> {
    if bag_ids(full) != bag_ids(reduced) {
        return Err(Error::config("full and reduced manifests list different bags"));
    }
    let cfg = TrainConfig {
        augment: crate::AugmentConfig::none(),
        ..cfg.clone()
    };
    let full_report = bench_mode(full, Representation::Full, &cfg)?;
    let reduced_report = bench_mode(reduced, Representation::Reduced, &cfg)?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Ok(PairedBench {
        speedup: ratio(full_report.seconds_per_epoch, reduced_report.seconds_per_epoch),
        memory_ratio: ratio(full_report.peak_bag_bytes as f64, reduced_report.peak_bag_bytes as f64),
        full: full_report,
        reduced: reduced_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagstore::{generate_synthetic_dataset, SynthConfig};
    use crate::reducer::{reduce_dataset, CovarianceMode, ReduceConfig};

    #[test]
    fn reduced_peak_is_one_dictionary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            dim: 32,
            train_bags_per_class: 3,
            test_bags_per_class: 1,
            min_instances: 400,
            max_instances: 600,
            ..SynthConfig::default()
        };
        let out = generate_synthetic_dataset(&cfg, dir.path().join("d")).unwrap();
        let rc = ReduceConfig { k: 8, covariance: CovarianceMode::Diagonal, ..Default::default() };
        let red = reduce_dataset(&out.train, &rc, dir.path().join("r"), None).unwrap();
        let tc = TrainConfig { epochs: 2, hidden: 8, ..Default::default() };
        let paired = bench_paired(&out.train, &red, &tc).unwrap();
        assert_eq!(paired.reduced.peak_bag_bytes, 8 * 32 * 4);
        let max_n = out.train.entries.iter().map(|e| e.n_instances).max().unwrap();
        assert_eq!(paired.full.peak_bag_bytes, (max_n * 32 * 4) as u64);
        assert!(paired.memory_ratio >= 50.0);
        assert!(paired.full.seconds_per_epoch > 0.0 && paired.reduced.seconds_per_epoch > 0.0);

        assert!(bench_mode(&red, Representation::Reduced, &TrainConfig { epochs: 1, ..tc.clone() }).is_err());
        let fewer = BagManifest::new(red.entries[1..].to_vec(), 2, red.split, &red.root).unwrap();
        assert!(bench_paired(&out.train, &fewer, &tc).is_err());
    }
}
