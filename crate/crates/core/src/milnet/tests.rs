use super::*;
use ndarray::{concatenate, s, Axis};
use rand_distr::StandardNormal;

fn random_bag(m: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    Array2::from_shape_fn((m, d), |_| r.sample(StandardNormal))
}

/// Random parameters with larger spread than `init_params`, so every
/// nonlinearity is exercised.
fn random_model(kind: ModelKind, d: usize, c: usize, h: usize, seed: u64) -> MilModel {
    let mut model = MilModel::zeros(kind, d, c, h);
    let mut r = rng::seeded(seed);
    for t in model.tensors_mut() {
        for v in t {
            *v = r.sample::<f64, _>(StandardNormal) * 0.5;
        }
    }
    model
}

fn abmil_reference(p: &AbmilParams, x: &Array2<f64>) -> Vec<f64> {
    let (m, d) = x.dim();
    let h = p.w.len();
    let mut e = vec![0.0; m];
    for k in 0..m {
        for hh in 0..h {
            let mut pre = 0.0;
            for j in 0..d {
                pre += p.v[[hh, j]] * x[[k, j]];
            }
            e[k] += p.w[hh] * pre.tanh();
        }
    }
    let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = ex.iter().sum();
    let mut z = vec![0.0; d];
    for k in 0..m {
        for j in 0..d {
            z[j] += ex[k] / sum * x[[k, j]];
        }
    }
    (0..p.bc.len())
        .map(|c| p.bc[c] + (0..d).map(|j| p.wc[[c, j]] * z[j]).sum::<f64>())
        .collect()
}

fn dsmil_reference(p: &DsmilParams, x: &Array2<f64>) -> Vec<f64> {
    let (m, d) = x.dim();
    let c = p.bb.len();
    let qw = p.wq.nrows();
    let mut il = vec![vec![0.0; c]; m];
    let (mut crit, mut best) = (0, f64::NEG_INFINITY);
    for k in 0..m {
        for cc in 0..c {
            for j in 0..d {
                il[k][cc] += p.w0[[cc, j]] * x[[k, j]];
            }
            if il[k][cc] > best {
                best = il[k][cc];
                crit = k;
            }
        }
    }
    let mut q = vec![vec![0.0; qw]; m];
    for k in 0..m {
        for a in 0..qw {
            for j in 0..d {
                q[k][a] += p.wq[[a, j]] * x[[k, j]];
            }
        }
    }
    let scores: Vec<f64> = (0..m)
        .map(|k| (0..qw).map(|a| q[k][a] * q[crit][a]).sum::<f64>() / (qw as f64).sqrt())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = ex.iter().sum();
    let mut b = vec![0.0; d];
    for k in 0..m {
        for i in 0..d {
            let mut vk = 0.0;
            for j in 0..d {
                vk += p.wv[[i, j]] * x[[k, j]];
            }
            b[i] += ex[k] / sum * vk;
        }
    }
    (0..c)
        .map(|cc| {
            let bag = p.bb[cc] + (0..d).map(|i| p.wb[[cc, i]] * b[i]).sum::<f64>();
            0.5 * (il[crit][cc] + bag)
        })
        .collect()
}

/// Central differences of the loss for every entry of tensor `t`.
fn finite_difference(model: &MilModel, x: &Array2<f64>, label: usize, t: usize) -> Vec<f64> {
    let h = 1e-5;
    let n = model.tensors()[t].len();
    (0..n)
        .map(|i| {
            let mut up = model.clone();
            up.tensors_mut()[t][i] += h;
            let mut dn = model.clone();
            dn.tensors_mut()[t][i] -= h;
            let lu = up.backward(x.view(), label).unwrap().0;
            let ld = dn.backward(x.view(), label).unwrap().0;
            (lu - ld) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn abmil_singleton_bag() {
    let model = random_model(ModelKind::Abmil, 4, 3, 5, 1);
    let x = random_bag(1, 4, 2);
    let out = model.forward(x.view()).unwrap();
    assert_eq!(out.attention.to_vec(), vec![1.0]);
    assert_eq!(out.bag_embedding, x.row(0));
}

#[test]
fn abmil_identical_instances() {
    let model = random_model(ModelKind::Abmil, 4, 2, 5, 1);
    let row = random_bag(1, 4, 3);
    let x = concatenate![Axis(0), row, row];
    let out = model.forward(x.view()).unwrap();
    assert_eq!(out.attention.to_vec(), vec![0.5, 0.5]);
    for (a, b) in out.bag_embedding.iter().zip(row.row(0)) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn abmil_matches_scalar_reference() {
    for seed in 0..5 {
        let model = random_model(ModelKind::Abmil, 5, 3, 6, seed);
        let x = random_bag(7, 5, 100 + seed);
        let got = model.forward(x.view()).unwrap().logits;
        let MilModel::Abmil(p) = &model else { unreachable!() };
        let want = abmil_reference(p, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn dsmil_singleton_bag() {
    let model = random_model(ModelKind::Dsmil, 3, 2, 4, 5);
    let x = random_bag(1, 3, 6);
    let out = model.forward(x.view()).unwrap();
    assert_eq!(out.attention.to_vec(), vec![1.0]);
    let MilModel::Dsmil(p) = &model else { unreachable!() };
    let inst = p.w0.dot(&x.row(0));
    let bag = p.wb.dot(&p.wv.dot(&x.row(0))) + &p.bb;
    for c in 0..2 {
        assert!((out.logits[c] - 0.5 * (inst[c] + bag[c])).abs() < 1e-12);
    }
}

#[test]
fn dsmil_duplicate_of_critical_shares_attention() {
    let model = random_model(ModelKind::Dsmil, 4, 2, 6, 7);
    let x = random_bag(5, 4, 8);
    let crit = model.forward(x.view()).unwrap().critical_index.unwrap();
    let dup = concatenate![Axis(0), x, x.slice(s![crit..crit + 1, ..])];
    let out = model.forward(dup.view()).unwrap();
    assert_eq!(out.critical_index, Some(crit));
    assert!((out.attention[5] - out.attention[crit]).abs() < 1e-15);
}

#[test]
fn dsmil_matches_scalar_reference() {
    for seed in 0..5 {
        let model = random_model(ModelKind::Dsmil, 4, 2, 5, seed);
        let x = random_bag(6, 4, 200 + seed);
        let got = model.forward(x.view()).unwrap().logits;
        let MilModel::Dsmil(p) = &model else { unreachable!() };
        let want = dsmil_reference(p, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for kind in [ModelKind::Abmil, ModelKind::Dsmil] {
        for seed in 0..20u64 {
            let m = 2 + (seed as usize % 6);
            let model = random_model(kind, 4, 3, 5, 300 + seed);
            let x = random_bag(m, 4, 400 + seed);
            let label = seed as usize % 3;
            let (_, grads) = model.backward(x.view(), label).unwrap();
            for t in 0..grads.tensors().len() {
                let fd = finite_difference(&model, &x, label, t);
                let err = relative_error(grads.tensors()[t], &fd);
                assert!(err < 1e-5, "{kind} seed {seed} tensor {}: {err}", model.tensor_names()[t]);
            }
        }
    }
}

#[test]
fn abmil_zero_attention_vector() {
    let mut model = random_model(ModelKind::Abmil, 3, 2, 4, 9);
    let MilModel::Abmil(p) = &mut model else { unreachable!() };
    p.w.fill(0.0);
    let x = random_bag(5, 3, 10);
    let out = model.forward(x.view()).unwrap();
    assert!(out.attention.iter().all(|&a| (a - 0.2).abs() < 1e-15));
    let (_, grads) = model.backward(x.view(), 1).unwrap();
    let fd = finite_difference(&model, &x, 1, 1);
    assert!(relative_error(grads.tensors()[1], &fd) < 1e-5);
}

#[test]
fn abmil_duplicated_bag_same_loss_and_head_gradient() {
    let model = random_model(ModelKind::Abmil, 4, 3, 5, 11);
    let x = random_bag(6, 4, 12);
    let doubled = concatenate![Axis(0), x, x];
    let (l1, g1) = model.backward(x.view(), 2).unwrap();
    let (l2, g2) = model.backward(doubled.view(), 2).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for t in [2, 3] {
        assert!(relative_error(g1.tensors()[t], g2.tensors()[t]) < 1e-12);
    }
}

#[test]
fn attention_is_a_distribution() {
    for kind in [ModelKind::Abmil, ModelKind::Dsmil] {
        for m in 1..12 {
            let model = random_model(kind, 3, 2, 4, m as u64);
            let out = model.forward(random_bag(m, 3, 50 + m as u64).view()).unwrap();
            assert!(out.attention.iter().all(|&a| a >= 0.0));
            assert!((out.attention.sum() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn instance_order_invariance() {
    use rand::seq::SliceRandom;
    for kind in [ModelKind::Abmil, ModelKind::Dsmil] {
        let model = random_model(kind, 5, 3, 6, 13);
        let x = random_bag(9, 5, 14);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng::seeded(15));
        let shuffled = x.select(Axis(0), &perm);
        let a = model.forward(x.view()).unwrap().logits;
        let b = model.forward(shuffled.view()).unwrap().logits;
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn initial_loss_near_ln_c() {
    for kind in [ModelKind::Abmil, ModelKind::Dsmil] {
        let c = 4;
        let model = init_params(kind, 16, c, 32, 3).unwrap();
        let mut total = 0.0;
        let n = 200;
        for i in 0..n {
            let x = random_bag(10, 16, 1000 + i as u64) * 0.3;
            total += model.backward(x.view(), i % c).unwrap().0;
        }
        let mean = total / n as f64;
        let ln_c = (c as f64).ln();
        assert!((mean - ln_c).abs() < 0.1 * ln_c, "{kind}: {mean}");
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let a = init_params(ModelKind::Abmil, 64, 2, 128, 5).unwrap();
    let b = init_params(ModelKind::Abmil, 64, 2, 128, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params(ModelKind::Abmil, 64, 2, 128, 6).unwrap());
    let MilModel::Abmil(p) = &a else { unreachable!() };
    assert!(p.v.iter().all(|v| v.abs() <= 0.125));
    assert!(p.bc.iter().all(|&v| v == 0.0));
    let MilModel::Dsmil(p) = init_params(ModelKind::Dsmil, 8, 3, 16, 1).unwrap() else { unreachable!() };
    assert!(p.bb.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_rejects_bad_input() {
    let model = init_params(ModelKind::Abmil, 3, 2, 4, 0).unwrap();
    let mut x = random_bag(2, 3, 0);
    x[[1, 2]] = f64::NAN;
    assert!(matches!(model.forward(x.view()), Err(Error::NonFinite { row: 1, col: 2 })));
    assert!(matches!(
        model.forward(random_bag(2, 4, 0).view()),
        Err(Error::DimMismatch { expected: 3, actual: 4 })
    ));
}

#[test]
fn checkpoint_round_trip() {
    for kind in [ModelKind::Abmil, ModelKind::Dsmil] {
        let model = random_model(kind, 5, 3, 7, 21);
        let bytes = model.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RMXM");
        let n: usize = model.tensor_sizes().iter().sum();
        assert_eq!(bytes.len(), 17 + 8 * n);
        let back = MilModel::from_bytes(Path::new("m.rmxm"), &bytes).unwrap();
        assert_eq!(back, model);
        assert!(MilModel::from_bytes(Path::new("m.rmxm"), &bytes[..bytes.len() - 8]).is_err());
    }
}

#[test]
fn adam_step_zero_gradient() {
    let mut model = init_params(ModelKind::Dsmil, 4, 2, 3, 0).unwrap();
    let before = model.clone();
    let zero = model.zeros_like();
    let mut state = OptimizerState::new(&model.tensor_sizes());
    adam_step(&mut model, &zero, &mut state, 0.1).unwrap();
    assert_eq!(model, before);
    let other = init_params(ModelKind::Abmil, 4, 2, 3, 0).unwrap();
    assert!(adam_step(&mut model, &other, &mut state, 0.1).is_err());
}
