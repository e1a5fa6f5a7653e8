//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeSet;

/// Straight transcription of the recurrence
/// `h_t = exp(d A) h_{t-1} + (exp(d A) - 1) / A * B_t u_t`, `y_t = C_t h_t`,
/// one channel at a time.
pub fn naive_scan_f32(
    u: &[f32],
    delta: &[f32],
    a: &[f32],
    b: &[f32],
    c: &[f32],
    len: usize,
    channels: usize,
    state: usize,
) -> Vec<f32> {
    let mut y = vec![0f32; len * channels];
    for ch in 0..channels {
        let mut h = vec![0f32; state];
        for t in 0..len {
            let d = delta[t * channels + ch];
            let x = u[t * channels + ch];
            let mut out = 0f32;
            for k in 0..state {
                let ak = a[ch * state + k];
                let decay = (d * ak).exp();
                h[k] = decay * h[k] + (decay - 1.0) / ak * b[t * state + k] * x;
                out += c[t * state + k] * h[k];
            }
            y[t * channels + ch] = out;
        }
    }
    y
}

pub fn naive_scan_f64(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    len: usize,
    channels: usize,
    state: usize,
) -> Vec<f64> {
    let mut y = vec![0f64; len * channels];
    for ch in 0..channels {
        let mut h = vec![0f64; state];
        for t in 0..len {
            let d = delta[t * channels + ch];
            let x = u[t * channels + ch];
            let mut out = 0f64;
            for k in 0..state {
                let ak = a[ch * state + k];
                let decay = (d * ak).exp();
                h[k] = decay * h[k] + (decay - 1.0) / ak * b[t * state + k] * x;
                out += c[t * state + k] * h[k];
            }
            y[t * channels + ch] = out;
        }
    }
    y
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// O(P^2) density clustering: pairwise distances, union-find over core
/// pairs, border points to the nearest core (ties to the lowest coordinates).
pub fn brute_dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<BTreeSet<usize>> {
    let n = points.len();
    let d2 = |i: usize, j: usize| -> f64 { (0..3).map(|a| (points[i][a] - points[j][a]).powi(2)).sum() };
    let near = |i: usize, j: usize| d2(i, j) <= eps * eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if core[i] && core[j] && near(i, j) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut owner: Vec<Option<usize>> = (0..n).map(|i| core[i].then_some(i)).collect();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<usize> = None;
        for j in 0..n {
            if !core[j] || !near(i, j) {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(k) => {
                    let (dj, dk) = (d2(i, j), d2(i, k));
                    if dj < dk || (dj == dk && points[j] < points[k]) {
                        Some(j)
                    } else {
                        Some(k)
                    }
                }
            };
        }
        owner[i] = best;
    }
    let mut groups: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for i in 0..n {
        if let Some(o) = owner[i] {
            let r = find(&mut parent, o);
            groups.entry(r).or_default().insert(i);
        }
    }
    groups.into_values().collect()
}

/// Memberships as a set of sets, which ignores label order.
pub fn partition(clusters: &[Vec<usize>]) -> BTreeSet<BTreeSet<usize>> {
    clusters.iter().map(|m| m.iter().copied().collect()).collect()
}

/// Worst relative error between the analytic gradient of `f` with respect to
/// every parameter in `store` and a central difference with step `1e-5`.
/// Errors are relative to `max(|analytic|, |numeric|, 1e-3)`.
pub fn fd_params(
    store: &mut avdtec::params::ParamStore,
    f: impl Fn(&mut avdtec::graph::Graph, &avdtec::params::Binding) -> avdtec::graph::Var,
) -> f64 {
    use avdtec::graph::Graph;
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let out = f(&mut g, &b);
    let grads = g.backward(out);
    let mut analytic = store.zeros_like();
    b.accumulate(&grads, &mut analytic);
    let eval = |s: &avdtec::params::ParamStore| {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let out = f(&mut g, &b);
        g.value(out).item()
    };
    let h = 1e-5;
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (n, id) in ids.into_iter().enumerate() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[n].data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}
