use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::ReduceConfig;
use crate::linalg::sq_dist;
use crate::rng;
use crate::{Error, Result};

const KMEANS_STREAM: u64 = 0x6b6d_6e73;

/// Relative slack allowed when checking that inertia never increases.
pub const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Inertia after every assignment step of the winning run, then after
    /// the final mean update, then (if it helped) after single-point
    /// refinement; the last entry is the inertia of the returned centroids.
    pub inertia_trace: Vec<f64>,
}

/// Nearest centroid per row; ties go to the lower cluster index.
pub fn assign(features: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if features.ncols() != centroids.ncols() {
        return Err(Error::DimMismatch {
            expected: centroids.ncols(),
            actual: features.ncols(),
        });
    }
    if centroids.nrows() == 0 {
        return Err(Error::config("no centroids"));
    }
    Ok(assign_with_dist(features, centroids).0)
}

fn assign_with_dist(x: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>) -> (Vec<usize>, Vec<f64>) {
    x.outer_iter()
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (k, cent) in c.outer_iter().enumerate() {
                let d = sq_dist(row, cent);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .unzip()
}

/// Rows ordered by (squared norm, original index); k-means++ walks this
/// order so row shuffles do not change which points get sampled.
fn candidate_order(x: ArrayView2<'_, f64>) -> Vec<usize> {
    let norms: Vec<f64> = x.outer_iter().map(|r| r.dot(&r)).collect();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    order
}

fn kmeans_pp(x: ArrayView2<'_, f64>, k: usize, order: &[usize], rng: &mut rng::Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = vec![false; n];
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = order[rng.random_range(0..n)];
    chosen[first] = true;
    centroids.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = x.outer_iter().map(|r| sq_dist(r, x.row(first))).collect();

    for j in 1..k {
        let total: f64 = order.iter().map(|&i| d2[i]).sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = None;
            for &i in order {
                if d2[i] > 0.0 {
                    acc += d2[i];
                    last_positive = Some(i);
                    if acc > target {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.or(last_positive).expect("positive total has a positive entry")
        } else {
            // All remaining points coincide with a chosen centroid.
            *order.iter().find(|&&i| !chosen[i]).unwrap_or(&order[0])
        };
        chosen[pick] = true;
        centroids.row_mut(j).assign(&x.row(pick));
        for (i, r) in x.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(pick)));
        }
    }
    centroids
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty(assign: &mut [usize], dist: &mut [f64], k: usize) {
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for i in 0..assign.len() {
            if counts[assign[i]] < 2 {
                continue;
            }
            if best.is_none_or(|b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        let Some(i) = best else { break };
        counts[assign[i]] -= 1;
        counts[empty] = 1;
        assign[i] = empty;
        // The empty centroid is reseeded onto this point.
        dist[i] = 0.0;
    }
}

fn means(x: ArrayView2<'_, f64>, assign: &[usize], k: usize, fallback: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &a) in x.outer_iter().zip(assign) {
        sums.row_mut(a).scaled_add(1.0, &row);
        counts[a] += 1;
    }
    for (j, mut s) in sums.axis_iter_mut(Axis(0)).enumerate() {
        if counts[j] == 0 {
            s.assign(&fallback.row(j));
        } else {
            s /= counts[j] as f64;
        }
    }
    sums
}

fn inertia_of(x: ArrayView2<'_, f64>, c: ArrayView2<'_, f64>, assign: &[usize]) -> f64 {
    x.outer_iter()
        .zip(assign)
        .map(|(r, &a)| sq_dist(r, c.row(a)))
        .sum()
}

/// Hartigan single-point moves: relocate a point when doing so lowers the
/// total inertia, accounting for both cluster means shifting. Lloyd stops at
/// any partition where each point is nearest its own mean; this escapes some
/// of those that are still not locally optimal. Points are visited in
/// `order` so the outcome does not depend on row order.
fn refine(x: ArrayView2<'_, f64>, assign: &mut [usize], centroids: &mut Array2<f64>, order: &[usize], max_passes: usize) -> bool {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    let mut moved_any = false;
    for _ in 0..max_passes {
        let mut moved = false;
        for &i in order {
            let from = assign[i];
            let nf = counts[from] as f64;
            if counts[from] < 2 {
                continue;
            }
            let row = x.row(i);
            let removal = nf / (nf - 1.0) * sq_dist(row, centroids.row(from));
            let mut best: Option<(usize, f64)> = None;
            for to in (0..k).filter(|&to| to != from) {
                let nt = counts[to] as f64;
                let cost = nt / (nt + 1.0) * sq_dist(row, centroids.row(to));
                if best.is_none_or(|(_, c)| cost < c) {
                    best = Some((to, cost));
                }
            }
            let Some((to, cost)) = best else { continue };
            // Demand a clear gain so rounding cannot cause cycling.
            if cost >= removal - 1e-12 * removal.max(1.0) {
                continue;
            }
            let nt = counts[to] as f64;
            let mut cf = centroids.row_mut(from);
            cf *= nf / (nf - 1.0);
            cf.scaled_add(-1.0 / (nf - 1.0), &row);
            let mut ct = centroids.row_mut(to);
            ct *= nt / (nt + 1.0);
            ct.scaled_add(1.0 / (nt + 1.0), &row);
            counts[from] -= 1;
            counts[to] += 1;
            assign[i] = to;
            moved = true;
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    moved_any
}

fn lloyd(
    x: ArrayView2<'_, f64>,
    mut centroids: Array2<f64>,
    order: &[usize],
    cfg: &ReduceConfig,
) -> (Array2<f64>, ClusterResult) {
    let k = centroids.nrows();
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut assignments = Vec::new();

    while iterations < cfg.max_iterations {
        iterations += 1;
        let (mut a, mut dist) = assign_with_dist(x, centroids.view());
        repair_empty(&mut a, &mut dist, k);
        let inertia: f64 = dist.iter().sum();
        if let Some(&prev) = trace.last() {
            debug_assert!(
                inertia <= prev + MONOTONE_SLACK * prev.abs().max(1.0),
                "inertia increased: {prev} -> {inertia}"
            );
        }
        trace.push(inertia);

        let updated = means(x, &a, k, centroids.view());
        let shift: f64 = updated
            .iter()
            .zip(centroids.iter())
            .map(|(u, c)| (u - c) * (u - c))
            .sum::<f64>()
            .sqrt();
        let scale = updated.iter().map(|v| v * v).sum::<f64>().sqrt();
        centroids = updated;
        assignments = a;
        if shift <= cfg.tolerance * scale || shift == 0.0 {
            converged = true;
            break;
        }
    }

    let mut inertia = inertia_of(x, centroids.view(), &assignments);
    let mut refined = assignments.clone();
    let mut moved_centroids = centroids.clone();
    if refine(x, &mut refined, &mut moved_centroids, order, cfg.max_iterations) {
        // Recompute exactly instead of trusting the incremental updates.
        let exact = means(x, &refined, k, centroids.view());
        let refined_inertia = inertia_of(x, exact.view(), &refined);
        if refined_inertia < inertia {
            trace.push(inertia);
            inertia = refined_inertia;
            centroids = exact;
            assignments = refined;
        }
    }
    trace.push(inertia);
    let result = ClusterResult {
        assignments,
        inertia,
        iterations,
        converged,
        inertia_trace: trace,
    };
    (centroids, result)
}

/// K-Means with k-means++ seeding and Lloyd iterations, finished with
/// single-point (Hartigan) refinement.
///
/// Uses `K' = min(cfg.k, N)` clusters. Every returned centroid is the mean
/// of the rows assigned to it. With several restarts the lowest-inertia run
/// wins, earlier runs winning ties.
pub fn kmeans_fit(features: ArrayView2<'_, f64>, cfg: &ReduceConfig) -> Result<(Array2<f64>, ClusterResult)> {
    cfg.validate()?;
    let n = features.nrows();
    if n == 0 {
        return Err(Error::config("kmeans needs at least one row"));
    }
    let k = cfg.k.min(n);
    let order = candidate_order(features);
    let mut best: Option<(Array2<f64>, ClusterResult)> = None;
    for restart in 0..cfg.restarts {
        let mut rng = rng::seeded(rng::derive(cfg.seed, KMEANS_STREAM, restart as u64));
        let init = kmeans_pp(features, k, &order, &mut rng);
        let (c, r) = lloyd(features, init, &order, cfg);
        if best.as_ref().is_none_or(|(_, b)| r.inertia < b.inertia) {
            best = Some((c, r));
        }
    }
    Ok(best.expect("restarts >= 1"))
}
