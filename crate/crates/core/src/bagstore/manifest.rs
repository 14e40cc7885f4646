use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Reader;
use crate::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["bag_id", "label", "path", "n_instances", "dim"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bag_id: String,
    pub label: usize,
    /// Relative to the manifest's directory.
    pub path: String,
    pub n_instances: usize,
    pub dim: usize,
}

/// A list of bags sharing one feature dimension.
///
/// On disk this is a CSV file with the header
/// `bag_id,label,path,n_instances,dim`, optionally preceded by `# key=value`
/// metadata lines (`split`, `classes`, `class_names` as a `|`-separated
/// list).
#[derive(Debug, Clone, PartialEq)]
pub struct BagManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_count: usize,
    pub split: Split,
    pub class_names: Vec<String>,
    /// Directory that entry paths are resolved against.
    pub root: PathBuf,
}

impl BagManifest {
    pub fn new(
        entries: Vec<ManifestEntry>,
        class_count: usize,
        split: Split,
        root: impl Into<PathBuf>,
    ) -> Result<Self> {
        let m = BagManifest {
            entries,
            class_count,
            split,
            class_names: Vec::new(),
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.class_count {
            return Err(Error::config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.class_count
            )));
        }
        let mut seen = HashSet::new();
        let first_dim = self.entries.first().map(|e| e.dim);
        for e in &self.entries {
            if !seen.insert(e.bag_id.as_str()) {
                return Err(Error::DuplicateId(e.bag_id.clone()));
            }
            if Some(e.dim) != first_dim {
                return Err(Error::InconsistentDimension {
                    first: first_dim.unwrap_or(0),
                    other: e.dim,
                    bag_id: e.bag_id.clone(),
                });
            }
            if e.label >= self.class_count {
                return Err(Error::LabelOutOfRange {
                    label: e.label,
                    classes: self.class_count,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Shared feature dimension, `None` for an empty manifest.
    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.dim)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn get(&self, bag_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.bag_id == bag_id)
    }

    pub fn total_instances(&self) -> u64 {
        self.entries.iter().map(|e| e.n_instances as u64).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# split={}\n# classes={}\n", self.split, self.class_count);
        if !self.class_names.is_empty() {
            out.push_str(&format!("# class_names={}\n", self.class_names.join("|")));
        }
        out.push_str(&MANIFEST_HEADER.join(","));
        out.push('\n');
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).expect("in-memory csv write");
        }
        out.push_str(std::str::from_utf8(&w.into_inner().expect("flush")).expect("utf-8"));
        out
    }

    /// Writes the manifest to `path`. `root` is not stored; entry paths are
    /// written as given.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<BagManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(path, &text, root)
}

fn parse_manifest(path: &Path, text: &str, root: PathBuf) -> Result<BagManifest> {
    let err = |line: u64, message: String| Error::Manifest {
        path: path.to_owned(),
        line,
        message,
    };

    let mut split = Split::Train;
    let mut classes: Option<usize> = None;
    let mut class_names = Vec::new();
    let mut meta_lines = 0u64;
    let mut body_start = 0usize;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.starts_with('#') {
            break;
        }
        meta_lines += 1;
        body_start += line.len();
        let Some((key, value)) = trimmed[1..].split_once('=') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "split" => split = value.parse().map_err(|e: Error| err(meta_lines, e.to_string()))?,
            "classes" => {
                classes = Some(
                    value
                        .parse()
                        .map_err(|_| err(meta_lines, format!("bad class count {value:?}")))?,
                )
            }
            "class_names" => class_names = value.split('|').map(str::to_owned).collect(),
            _ => {}
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(&text.as_bytes()[body_start..]);
    let headers = rdr
        .headers()
        .map_err(|e| err(meta_lines + 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(err(
            meta_lines + 1,
            format!("expected header {:?}", MANIFEST_HEADER.join(",")),
        ));
    }

    let mut entries = Vec::new();
    for record in rdr.deserialize::<ManifestEntry>() {
        let entry = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line()) + meta_lines;
            err(line, e.to_string())
        })?;
        entries.push(entry);
    }

    let class_count = classes.unwrap_or_else(|| {
        entries
            .iter()
            .map(|e| e.label + 1)
            .max()
            .unwrap_or(0)
            .max(2)
    });
    let m = BagManifest {
        entries,
        class_count,
        split,
        class_names,
        root,
    };
    m.validate()?;
    Ok(m)
}

/// Summary statistics read from the bag files themselves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub bags: usize,
    pub total_instances: u64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    pub class_histogram: Vec<usize>,
}

impl DatasetStats {
    pub fn mean_instances(&self) -> f64 {
        self.total_instances as f64 / self.bags as f64
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bags={} mean_n={:.2} min_n={} max_n={} dim={} classes={:?}",
            self.bags,
            self.mean_instances(),
            self.min_instances,
            self.max_instances,
            self.dim,
            self.class_histogram
        )
    }
}

/// Reads the 16-byte header shared by RMX1 and RMXR files:
/// (instance or prototype count, dimension, label).
pub(crate) fn read_header(path: &Path) -> Result<(usize, usize, usize)> {
    use std::io::Read;
    let mut buf = [0u8; 16];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
    let bytes = &buf[..n];
    let magic = bytes.get(..4).unwrap_or(bytes);
    let expected = if magic == b"RMXR" {
        crate::reducer::DICT_MAGIC
    } else {
        super::BAG_MAGIC
    };
    let mut r = Reader::new(path, bytes);
    r.magic(expected)?;
    Ok((r.u32()? as usize, r.u32()? as usize, r.u32()? as usize))
}

pub fn dataset_stats(manifest: &BagManifest) -> Result<DatasetStats> {
    if manifest.is_empty() {
        return Err(Error::NoBags);
    }
    let mut stats = DatasetStats {
        bags: 0,
        total_instances: 0,
        min_instances: usize::MAX,
        max_instances: 0,
        dim: manifest.dim().unwrap_or(0),
        class_histogram: vec![0; manifest.class_count],
    };
    for entry in &manifest.entries {
        let (n, d, label) = read_header(&manifest.resolve(entry)).map_err(|e| e.in_bag(&entry.bag_id))?;
        if d != stats.dim {
            return Err(Error::InconsistentDimension {
                first: stats.dim,
                other: d,
                bag_id: entry.bag_id.clone(),
            });
        }
        let slot = stats
            .class_histogram
            .get_mut(label)
            .ok_or(Error::LabelOutOfRange {
                label,
                classes: manifest.class_count,
            })?;
        *slot += 1;
        stats.bags += 1;
        stats.total_instances += n as u64;
        stats.min_instances = stats.min_instances.min(n);
        stats.max_instances = stats.max_instances.max(n);
    }
    Ok(stats)
}
