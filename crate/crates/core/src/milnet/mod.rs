//! Attention-based MIL classifiers with hand-written gradients.
//!
//! Two aggregators are provided, [`AbmilParams`] and [`DsmilParams`], both
//! mapping an `M × d` instance matrix to `C` class logits. All arithmetic is
//! `f64`.

mod abmil;
mod dsmil;
mod loss;
mod optim;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bagstore::{self, push_u32, to_u32, Reader};
use crate::rng::{self, stream};
use crate::{Error, Result};

pub use abmil::AbmilParams;
pub use dsmil::DsmilParams;
pub use loss::{cross_entropy, softmax};
pub use optim::{cosine_lr, LrSchedule, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMXM";
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Abmil,
    Dsmil,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Abmil => 0,
            ModelKind::Dsmil => 1,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Abmil => "abmil",
            ModelKind::Dsmil => "dsmil",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abmil" => Ok(ModelKind::Abmil),
            "dsmil" => Ok(ModelKind::Dsmil),
            other => Err(Error::config(format!("unknown model {other:?}"))),
        }
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Array1<f64>,
    /// One weight per instance, summing to 1.
    pub attention: Array1<f64>,
    /// ABMIL: attention-pooled instance features. DSMIL: the value-projected
    /// bag embedding.
    pub bag_embedding: Array1<f64>,
    /// DSMIL only, `M × C`.
    pub instance_logits: Option<Array2<f64>>,
    /// DSMIL only.
    pub critical_index: Option<usize>,
}

/// Parameters of one model. Also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub enum MilModel {
    Abmil(AbmilParams),
    Dsmil(DsmilParams),
}

pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn uniform_fill(values: &mut [f64], fan_in: usize, rng: &mut rng::Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in values {
        *v = rng.random_range(-bound..bound);
    }
}

/// Weights uniform in `±1/√fan_in`, biases zero.
pub fn init_params(kind: ModelKind, d: usize, classes: usize, hidden: usize, seed: u64) -> Result<MilModel> {
    if d == 0 || classes == 0 || hidden == 0 {
        return Err(Error::config("model dimensions must be >= 1"));
    }
    let mut rng = rng::seeded(rng::derive(seed, stream::INIT, 0));
    let mut model = MilModel::zeros(kind, d, classes, hidden);
    match &mut model {
        MilModel::Abmil(p) => {
            let [v, w, wc, _bc] = p.tensors_mut();
            uniform_fill(v, d, &mut rng);
            uniform_fill(w, hidden, &mut rng);
            uniform_fill(wc, d, &mut rng);
        }
        MilModel::Dsmil(p) => {
            let [w0, wq, wv, wb, _bb] = p.tensors_mut();
            for t in [w0, wq, wv, wb] {
                uniform_fill(t, d, &mut rng);
            }
        }
    }
    Ok(model)
}

impl MilModel {
    pub fn zeros(kind: ModelKind, d: usize, classes: usize, hidden: usize) -> Self {
        match kind {
            ModelKind::Abmil => MilModel::Abmil(AbmilParams::zeros(d, classes, hidden)),
            ModelKind::Dsmil => MilModel::Dsmil(DsmilParams::zeros(d, classes, hidden)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind(), self.dim(), self.classes(), self.hidden())
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            MilModel::Abmil(_) => ModelKind::Abmil,
            MilModel::Dsmil(_) => ModelKind::Dsmil,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MilModel::Abmil(p) => p.dim(),
            MilModel::Dsmil(p) => p.dim(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            MilModel::Abmil(p) => p.classes(),
            MilModel::Dsmil(p) => p.classes(),
        }
    }

    /// Attention width `H` (ABMIL) or query width `Q` (DSMIL).
    pub fn hidden(&self) -> usize {
        match self {
            MilModel::Abmil(p) => p.hidden(),
            MilModel::Dsmil(p) => p.query_width(),
        }
    }

    pub fn tensor_names(&self) -> &'static [&'static str] {
        match self {
            MilModel::Abmil(_) => &["V", "w", "W_c", "b_c"],
            MilModel::Dsmil(_) => &["W_0", "W_q", "W_v", "W_b", "b_b"],
        }
    }

    /// Parameter tensors, flattened row-major, in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            MilModel::Abmil(p) => p.tensors().to_vec(),
            MilModel::Dsmil(p) => p.tensors().to_vec(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            MilModel::Abmil(p) => p.tensors_mut().into_iter().collect(),
            MilModel::Dsmil(p) => p.tensors_mut().into_iter().collect(),
        }
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::config("bag has no instances"));
        }
        if x.ncols() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: x.ncols(),
            });
        }
        for ((row, col), v) in x.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        self.check_input(x)?;
        Ok(match self {
            MilModel::Abmil(p) => abmil::forward(p, x).0,
            MilModel::Dsmil(p) => dsmil::forward(p, x).0,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<usize> {
        let logits = self.forward(x)?.logits;
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Cross-entropy loss of `x` against `label` and its gradient with
    /// respect to every parameter.
    pub fn backward(&self, x: ArrayView2<'_, f64>, label: usize) -> Result<(f64, MilModel)> {
        self.check_input(x)?;
        match self {
            MilModel::Abmil(p) => {
                let (out, cache) = abmil::forward(p, x);
                let (loss, g) = cross_entropy(out.logits.view(), label)?;
                Ok((loss, MilModel::Abmil(abmil::backward(p, x, &cache, &g))))
            }
            MilModel::Dsmil(p) => {
                let (out, cache) = dsmil::forward(p, x);
                let (loss, g) = cross_entropy(out.logits.view(), label)?;
                Ok((loss, MilModel::Dsmil(dsmil::backward(p, x, &cache, &g))))
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(self.kind().code());
        push_u32(&mut buf, to_u32(self.dim(), "dimension")?);
        push_u32(&mut buf, to_u32(self.classes(), "class count")?);
        push_u32(&mut buf, to_u32(self.hidden(), "hidden width")?);
        for t in self.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let kind = match r.u8()? {
            0 => ModelKind::Abmil,
            1 => ModelKind::Dsmil,
            other => return Err(Error::InvalidHeader(format!("{}: unknown model kind {other}", path.display()))),
        };
        let d = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        if d == 0 || classes == 0 || hidden == 0 {
            return Err(Error::InvalidHeader(format!("{}: zero model dimension", path.display())));
        }
        let sizes: Vec<usize> = match kind {
            ModelKind::Abmil => vec![hidden.checked_mul(d), Some(hidden), classes.checked_mul(d), Some(classes)],
            ModelKind::Dsmil => vec![
                classes.checked_mul(d),
                hidden.checked_mul(d),
                d.checked_mul(d),
                classes.checked_mul(d),
                Some(classes),
            ],
        }
        .into_iter()
        .collect::<Option<_>>()
        .ok_or_else(|| bagstore::overflow(path))?;
        let total = sizes
            .iter()
            .try_fold(0u64, |acc, &n| acc.checked_add(n as u64))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bagstore::overflow(path))?;
        r.require(total)?;
        let mut model = MilModel::zeros(kind, d, classes, hidden);
        for (t, &n) in model.tensors_mut().into_iter().zip(&sizes) {
            t.copy_from_slice(&r.f64s(n)?);
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        bagstore::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(path, &bagstore::read_file(path)?)
    }
}

/// Gradients of the cross-entropy loss for one bag.
pub fn backward(model: &MilModel, instances: ArrayView2<'_, f64>, label: usize) -> Result<MilModel> {
    Ok(model.backward(instances, label)?.1)
}

pub fn adam_step(model: &mut MilModel, grads: &MilModel, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if model.kind() != grads.kind() {
        return Err(Error::config("gradient model kind differs from parameters"));
    }
    let g = grads.tensors();
    state.update(&mut model.tensors_mut(), &g, lr)
}

#[cfg(test)]
mod tests;
