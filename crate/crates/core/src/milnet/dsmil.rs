//! Two-stream MIL in a single-scale form.
//!
//! Instance stream: `l_k = W₀ h_k`; the critical instance `m` holds the
//! largest instance logit (lowest instance, then lowest class, on ties).
//! Bag stream: `q_k = W_q h_k`, `a = softmax_k(q_k·q_m / √Q)`,
//! `b = Σ a_k W_v h_k`, `s = W_b b + b_b`. Output: `0.5 · (l_m + s)`.
//! The argmax is held fixed when differentiating.

use ndarray::{Array1, Array2, ArrayView2};

use super::loss::softmax;
use super::{outer, Forward};

#[derive(Debug, Clone, PartialEq)]
pub struct DsmilParams {
    /// `C × d`.
    pub w0: Array2<f64>,
    /// `Q × d`.
    pub wq: Array2<f64>,
    /// `d × d`.
    pub wv: Array2<f64>,
    /// `C × d`.
    pub wb: Array2<f64>,
    /// `C`.
    pub bb: Array1<f64>,
}

impl DsmilParams {
    pub fn zeros(d: usize, classes: usize, query: usize) -> Self {
        DsmilParams {
            w0: Array2::zeros((classes, d)),
            wq: Array2::zeros((query, d)),
            wv: Array2::zeros((d, d)),
            wb: Array2::zeros((classes, d)),
            bb: Array1::zeros(classes),
        }
    }

    pub fn dim(&self) -> usize {
        self.w0.ncols()
    }

    pub fn classes(&self) -> usize {
        self.bb.len()
    }

    pub fn query_width(&self) -> usize {
        self.wq.nrows()
    }

    pub(super) fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w0.as_slice().expect("standard layout"),
            self.wq.as_slice().expect("standard layout"),
            self.wv.as_slice().expect("standard layout"),
            self.wb.as_slice().expect("standard layout"),
            self.bb.as_slice().expect("standard layout"),
        ]
    }

    pub(super) fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w0.as_slice_mut().expect("standard layout"),
            self.wq.as_slice_mut().expect("standard layout"),
            self.wv.as_slice_mut().expect("standard layout"),
            self.wb.as_slice_mut().expect("standard layout"),
            self.bb.as_slice_mut().expect("standard layout"),
        ]
    }
}

pub(super) struct Cache {
    critical: usize,
    q: Array2<f64>,
    attention: Array1<f64>,
    z: Array1<f64>,
    b: Array1<f64>,
}

/// `(instance, class)` of the largest entry, row-major first on ties.
pub(super) fn critical_instance(instance_logits: &Array2<f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, row) in instance_logits.outer_iter().enumerate() {
        for &v in row {
            if v > best.1 {
                best = (k, v);
            }
        }
    }
    best.0
}

pub(super) fn forward(p: &DsmilParams, x: ArrayView2<'_, f64>) -> (Forward, Cache) {
    let instance_logits = x.dot(&p.w0.t());
    let m = critical_instance(&instance_logits);
    let q = x.dot(&p.wq.t());
    let scale = (p.query_width() as f64).sqrt();
    let scores = q.dot(&q.row(m)) / scale;
    let attention = softmax(scores.view());
    let z = x.t().dot(&attention);
    let b = p.wv.dot(&z);
    let bag_logits = p.wb.dot(&b) + &p.bb;
    let logits = (&instance_logits.row(m) + &bag_logits) * 0.5;
    let out = Forward {
        logits,
        attention: attention.clone(),
        bag_embedding: b.clone(),
        instance_logits: Some(instance_logits),
        critical_index: Some(m),
    };
    let cache = Cache {
        critical: m,
        q,
        attention,
        z,
        b,
    };
    (out, cache)
}

pub(super) fn backward(p: &DsmilParams, x: ArrayView2<'_, f64>, cache: &Cache, dlogits: &Array1<f64>) -> DsmilParams {
    let Cache {
        critical: m,
        q,
        attention: a,
        z,
        b,
    } = cache;
    let m = *m;
    let half = dlogits * 0.5;
    let w0 = outer(&half, &x.row(m).to_owned());
    let wb = outer(&half, b);
    let bb = half.clone();
    let db = p.wb.t().dot(&half);
    let wv = outer(&db, z);
    let dz = p.wv.t().dot(&db);
    let da = x.dot(&dz);
    let mean = a.dot(&da);
    let ds = (a * &(da - mean)) / (p.query_width() as f64).sqrt();
    // s_k = q_k·q_m: every q_k receives ds_k·q_m, and q_m also receives Σ ds_k q_k.
    let mut dq = outer(&ds, &q.row(m).to_owned());
    let to_critical = q.t().dot(&ds);
    dq.row_mut(m).scaled_add(1.0, &to_critical);
    let wq = dq.t().dot(&x).as_standard_layout().into_owned();
    DsmilParams { w0, wq, wv, wb, bb }
}
