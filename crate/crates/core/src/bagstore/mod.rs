//! Bag data model, on-disk formats and manifests.
//!
//! An RMX1 file stores one bag: a 16-byte little-endian header
//! (`"RMX1"`, `u32` instance count, `u32` dimension, `u32` label) followed by
//! the row-major `f32` feature payload. The bag id is the file stem.

mod manifest;
mod synth;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::Array2;

use crate::{Error, Result};

pub use manifest::{dataset_stats, read_manifest, BagManifest, DatasetStats, ManifestEntry, Split};
pub use synth::{
    generate_synthetic_dataset, read_generation_record, Component, GenerationRow, SynthConfig,
    SynthOutput,
};

pub const BAG_MAGIC: &[u8; 4] = b"RMX1";
pub const BAG_EXTENSION: &str = "rmx1";
pub(crate) const HEADER_LEN: usize = 16;

/// One bag of instance features with its bag-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub bag_id: String,
    pub label: usize,
    /// `N × d`, one instance per row.
    pub features: Array2<f32>,
}

impl FeatureBag {
    pub fn new(bag_id: impl Into<String>, label: usize, features: Array2<f32>) -> Result<Self> {
        let bag = FeatureBag {
            bag_id: bag_id.into(),
            label,
            features,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn n_instances(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn payload_bytes(&self) -> usize {
        self.features.len() * std::mem::size_of::<f32>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances() == 0 || self.dim() == 0 {
            return Err(Error::InvalidHeader(format!(
                "bag {} has shape {}x{}",
                self.bag_id,
                self.n_instances(),
                self.dim()
            )));
        }
        check_finite(&self.features)
    }

    /// Features widened to `f64`.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

pub(crate) fn check_finite(m: &Array2<f32>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
    }
    Ok(())
}

pub(crate) fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::InvalidHeader(format!("{what} {value} exceeds u32")))
}

pub(crate) fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f32s<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian cursor over a fully-read file.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.bytes.get(..4).unwrap_or(self.bytes);
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_owned(),
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    /// Fails with `Truncated` unless `n` more bytes are available.
    pub(crate) fn require(&self, n: u64) -> Result<()> {
        let expected = (self.pos as u64).saturating_add(n);
        if expected > self.bytes.len() as u64 {
            return Err(Error::Truncated {
                path: self.path.to_owned(),
                expected,
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.require(n as u64)?;
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| overflow(self.path))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| overflow(self.path))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::InvalidHeader(format!(
                "{}: {} trailing bytes",
                self.path.display(),
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn overflow(path: &Path) -> Error {
    Error::InvalidHeader(format!("{}: declared payload size overflows", path.display()))
}

pub(crate) fn checked_len(path: &Path, dims: &[u32]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| overflow(path))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn encode_bag(bag: &FeatureBag) -> Result<Vec<u8>> {
    bag.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + bag.payload_bytes());
    buf.extend_from_slice(BAG_MAGIC);
    push_u32(&mut buf, to_u32(bag.n_instances(), "instance count")?);
    push_u32(&mut buf, to_u32(bag.dim(), "dimension")?);
    push_u32(&mut buf, to_u32(bag.label, "label")?);
    push_f32s(&mut buf, bag.features.iter());
    Ok(buf)
}

/// Writes `bag` in RMX1 format. Non-finite features are rejected before
/// anything touches the disk.
pub fn write_bag(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    let buf = encode_bag(bag)?;
    write_file(path.as_ref(), &buf)
}

pub fn decode_bag(path: &Path, bytes: &[u8]) -> Result<FeatureBag> {
    let mut r = Reader::new(path, bytes);
    r.magic(BAG_MAGIC)?;
    let n = r.u32()?;
    let d = r.u32()?;
    let label = r.u32()? as usize;
    if n == 0 || d == 0 {
        return Err(Error::InvalidHeader(format!(
            "{}: empty shape {n}x{d}",
            path.display()
        )));
    }
    let len = checked_len(path, &[n, d])?;
    r.require(len.checked_mul(4).ok_or_else(|| overflow(path))? as u64)?;
    let data = r.f32s(len)?;
    r.finish()?;
    let features = Array2::from_shape_vec((n as usize, d as usize), data)
        .expect("payload length matches header");
    Ok(FeatureBag {
        bag_id: file_stem(path),
        label,
        features,
    })
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<FeatureBag> {
    let path = path.as_ref();
    decode_bag(path, &read_file(path)?)
}

/// Counts the feature payload bytes of bags currently held in memory.
///
/// Loads charge the tracker through a [`MemoryGuard`]; dropping the guard
/// releases the charge. The peak is the maximum concurrent total.
#[derive(Debug, Clone, Default)]
pub struct MemoryTracker {
    inner: Arc<TrackerState>,
}

#[derive(Debug, Default)]
struct TrackerState {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&self, bytes: usize) -> MemoryGuard {
        let now = self.inner.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.inner.peak.fetch_max(now, Ordering::SeqCst);
        MemoryGuard {
            tracker: self.clone(),
            bytes,
        }
    }

    pub fn current(&self) -> usize {
        self.inner.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.inner.peak.store(self.current(), Ordering::SeqCst);
    }
}

#[derive(Debug)]
pub struct MemoryGuard {
    tracker: MemoryTracker,
    bytes: usize,
}

impl MemoryGuard {
    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl Drop for MemoryGuard {
    fn drop(&mut self) {
        self.tracker
            .inner
            .current
            .fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

/// A value loaded from disk together with its memory charge, released on
/// drop.
#[derive(Debug)]
pub struct Loaded<T> {
    pub value: T,
    guard: Option<MemoryGuard>,
}

impl<T> Loaded<T> {
    pub fn untracked(value: T) -> Self {
        Loaded { value, guard: None }
    }

    pub fn tracked(value: T, guard: MemoryGuard) -> Self {
        Loaded {
            value,
            guard: Some(guard),
        }
    }

    pub fn charged_bytes(&self) -> usize {
        self.guard.as_ref().map_or(0, MemoryGuard::bytes)
    }
}

impl<T> std::ops::Deref for Loaded<T> {
    type Target = T;

    fn deref(&self) -> &T {
        &self.value
    }
}
