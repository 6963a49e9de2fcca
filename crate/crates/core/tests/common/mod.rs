#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scs::agent::AgentParams;
use scs::clustering::KMeansModel;
use scs::features::{FeatureSet, FeatureVector};
use scs::metrics::Mask;
use scs::pool::Rank;

pub fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, d: usize, blobs: usize, spread: f64) -> FeatureSet {
    let centers: Vec<Vec<f64>> = (0..blobs.max(1))
        .map(|_| (0..d).map(|_| 4.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let items = (0..n)
        .map(|i| {
            let c = &centers[i % centers.len()];
            let v = c.iter().map(|x| x + spread * rng.sample::<f64, _>(StandardNormal)).collect();
            FeatureVector::new(format!("s{i:04}"), v).unwrap()
        })
        .collect();
    FeatureSet::new(d, items).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Scores a concatenated pair by walking the layers directly.
pub fn reference_forward(params: &AgentParams, c: &[f64], q: &[f64]) -> f64 {
    let mut x: Vec<f64> = c.to_vec();
    x.extend_from_slice(q);
    let n = params.shapes().len();
    for l in 0..n {
        let s = params.shapes()[l];
        let (w, b) = params.layer(l);
        let mut z = vec![0.0; s.fan_out];
        for o in 0..s.fan_out {
            let mut acc = b[o];
            for i in 0..s.fan_in {
                acc += w[o * s.fan_in + i] * x[i];
            }
            z[o] = if l + 1 < n && acc < 0.0 { 0.0 } else { acc };
        }
        x = z;
    }
    x[0]
}

/// Smallest |pre-activation| over hidden units, for staying off ReLU kinks.
pub fn min_hidden_margin(params: &AgentParams, c: &[f64], q: &[f64]) -> f64 {
    let mut x: Vec<f64> = c.to_vec();
    x.extend_from_slice(q);
    let n = params.shapes().len();
    let mut margin = f64::INFINITY;
    for l in 0..n - 1 {
        let s = params.shapes()[l];
        let (w, b) = params.layer(l);
        let mut z = vec![0.0; s.fan_out];
        for o in 0..s.fan_out {
            let mut acc = b[o];
            for i in 0..s.fan_in {
                acc += w[o * s.fan_in + i] * x[i];
            }
            margin = margin.min(acc.abs());
            z[o] = acc.max(0.0);
        }
        x = z;
    }
    margin
}

/// `-(1/P) * sum (u - mean(u)) * log softmax(s)`.
pub fn reference_loss(params: &AgentParams, cands: &[Vec<f64>], q: &[f64], ious: &[f64]) -> f64 {
    let scores: Vec<f64> = cands.iter().map(|c| reference_forward(params, c, q)).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    let p = ious.len() as f64;
    let avg = ious.iter().sum::<f64>() / p;
    let mut l = 0.0;
    for (u, s) in ious.iter().zip(&scores) {
        l -= (u - avg) * (s - lse);
    }
    l / p
}

pub fn central_difference(params: &AgentParams, i: usize, h: f64, f: impl Fn(&AgentParams) -> f64) -> f64 {
    let mut plus = params.clone();
    plus.values_mut()[i] += h;
    let mut minus = params.clone();
    minus.values_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub struct Enumeration {
    pub global_min: f64,
    /// Objectives of partitions that Lloyd's algorithm leaves unchanged.
    pub stable: Vec<f64>,
}

/// Every assignment of `points` to `m` nonempty clusters.
pub fn enumerate_partitions(points: &[Vec<f64>], m: usize) -> Enumeration {
    let n = points.len();
    let d = points[0].len();
    let total = m.pow(n as u32);
    let mut global_min = f64::INFINITY;
    let mut stable = Vec::new();
    let mut labels = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % m;
            c /= m;
        }
        let mut counts = vec![0usize; m];
        let mut means = vec![vec![0.0; d]; m];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for k in 0..d {
                means[l][k] += p[k];
            }
        }
        if counts.contains(&0) {
            continue;
        }
        for (mean, &cnt) in means.iter_mut().zip(&counts) {
            for v in mean.iter_mut() {
                *v /= cnt as f64;
            }
        }
        let obj: f64 = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &means[l])).sum();
        global_min = global_min.min(obj);
        let is_stable = points.iter().zip(&labels).all(|(p, &l)| {
            let own = sq_dist(p, &means[l]);
            means.iter().all(|mu| own <= sq_dist(p, mu) + 1e-12)
        });
        if is_stable {
            stable.push(obj);
        }
    }
    Enumeration { global_min, stable }
}

/// `(id, cluster, rank)` picked by sorting every cluster in full.
pub fn full_sort_pool(model: &KMeansModel, set: &FeatureSet) -> Vec<(String, usize, Rank, f64)> {
    let mut members: BTreeMap<usize, Vec<(f64, String)>> = BTreeMap::new();
    for v in set.iter() {
        let k = model.assignments()[v.id()];
        members
            .entry(k)
            .or_default()
            .push((sq_dist(v.values(), model.centroid(k)).sqrt(), v.id().to_string()));
    }
    let mut out = Vec::new();
    for (k, mut list) in members {
        list.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let first = list.first().unwrap().clone();
        out.push((first.1, k, Rank::Nearest, first.0));
        if list.len() > 1 {
            let last = list.last().unwrap().clone();
            out.push((last.1, k, Rank::Farthest, last.0));
        }
    }
    out
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    let density: f64 = rng.random_range(0.0..1.0);
    Mask::from_fn(w, h, |_, _| rng.random_bool(density)).unwrap()
}

/// Intersection and union counted pixel by pixel.
pub fn count_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, g) = (a.get(x, y), b.get(x, y));
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn invert(m: &Mask) -> Mask {
    Mask::from_fn(m.width(), m.height(), |x, y| !m.get(x, y)).unwrap()
}
