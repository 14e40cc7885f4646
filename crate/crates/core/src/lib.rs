//! Prototype-based reduction and latent bag mixing for multiple instance
//! learning.
//!
//! The pipeline has three stages:
//!
//! * [`reducer`] clusters each bag's instance features with K-Means and keeps a
//!   dictionary of centroids plus intra-cluster covariances.
//! * [`mixer`] augments a reduced bag at training time by mixing it with
//!   another bag of the same class (append, replace, interpolate, covary, or
//!   all four in sequence).
//! * [`milnet`] and [`trainer`] fit attention-pooling MIL classifiers (ABMIL,
//!   DSMIL) on either full or reduced bags and report class-averaged metrics.
//!
//! [`bagstore`] holds the on-disk formats and a synthetic dataset generator,
//! and [`budget`] measures the training-time and bag-memory cost of both
//! representations.

pub mod bagstore;
pub mod budget;
mod error;
mod linalg;
pub mod milnet;
pub mod mixer;
pub mod reducer;
pub mod rng;
pub mod trainer;

pub use bagstore::{BagManifest, FeatureBag, ManifestEntry, MemoryTracker, Split, SynthConfig};
pub use error::{Error, Result};
pub use mixer::{AugmentConfig, AugmentKind, GatePolicy, LambdaPolicy, MixedBag};
pub use milnet::{MilModel, ModelKind};
pub use reducer::{BagDictionary, CovarianceMode, ReduceConfig};
pub use trainer::{EvalReport, Representation, TrainConfig};
