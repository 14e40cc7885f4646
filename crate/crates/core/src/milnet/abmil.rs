//! Attention pooling with a tanh scoring MLP:
//! `a = softmax_k(wᵀ tanh(V h_k))`, `z = Σ a_k h_k`, `logits = W_c z + b_c`.

use ndarray::{Array1, Array2, ArrayView2};

use super::loss::softmax;
use super::{outer, Forward};

#[derive(Debug, Clone, PartialEq)]
pub struct AbmilParams {
    /// `H × d`.
    pub v: Array2<f64>,
    /// `H`.
    pub w: Array1<f64>,
    /// `C × d`.
    pub wc: Array2<f64>,
    /// `C`.
    pub bc: Array1<f64>,
}

impl AbmilParams {
    pub fn zeros(d: usize, classes: usize, hidden: usize) -> Self {
        AbmilParams {
            v: Array2::zeros((hidden, d)),
            w: Array1::zeros(hidden),
            wc: Array2::zeros((classes, d)),
            bc: Array1::zeros(classes),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn classes(&self) -> usize {
        self.bc.len()
    }

    pub fn hidden(&self) -> usize {
        self.w.len()
    }

    pub(super) fn tensors(&self) -> [&[f64]; 4] {
        [
            self.v.as_slice().expect("standard layout"),
            self.w.as_slice().expect("standard layout"),
            self.wc.as_slice().expect("standard layout"),
            self.bc.as_slice().expect("standard layout"),
        ]
    }

    pub(super) fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.v.as_slice_mut().expect("standard layout"),
            self.w.as_slice_mut().expect("standard layout"),
            self.wc.as_slice_mut().expect("standard layout"),
            self.bc.as_slice_mut().expect("standard layout"),
        ]
    }
}

pub(super) struct Cache {
    u: Array2<f64>,
    attention: Array1<f64>,
    z: Array1<f64>,
}

pub(super) fn forward(p: &AbmilParams, x: ArrayView2<'_, f64>) -> (Forward, Cache) {
    let u = x.dot(&p.v.t()).mapv_into(f64::tanh);
    let attention = softmax(u.dot(&p.w).view());
    let z = x.t().dot(&attention);
    let logits = p.wc.dot(&z) + &p.bc;
    let out = Forward {
        logits,
        attention: attention.clone(),
        bag_embedding: z.clone(),
        instance_logits: None,
        critical_index: None,
    };
    (out, Cache { u, attention, z })
}

pub(super) fn backward(p: &AbmilParams, x: ArrayView2<'_, f64>, cache: &Cache, dlogits: &Array1<f64>) -> AbmilParams {
    let Cache { u, attention: a, z } = cache;
    let wc = outer(dlogits, z);
    let bc = dlogits.clone();
    let dz = p.wc.t().dot(dlogits);
    let da = x.dot(&dz);
    let mean = a.dot(&da);
    let de = a * &(da - mean);
    let w = u.t().dot(&de);
    // d pre-activation = (de ⊗ w) ⊙ (1 − u²)
    let mut dpre = outer(&de, &p.w);
    dpre.zip_mut_with(u, |g, &t| *g *= 1.0 - t * t);
    let v = dpre.t().dot(&x).as_standard_layout().into_owned();
    AbmilParams { v, w, wc, bc }
}
