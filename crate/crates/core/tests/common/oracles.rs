//! Independent reference implementations used as oracles.

use std::cmp::Ordering;

use placerec_core::embedding::SimilarityMatrix;
use placerec_core::evaluator::format::{DescriptorMeta, DescriptorSet};
use placerec_core::mining::{MinedSet, MiningStats};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random square similarity matrix. With `quantized`, entries come from a
/// coarse grid so that ties are common.
pub fn random_similarity(rng: &mut ChaCha8Rng, n: usize, quantized: bool) -> SimilarityMatrix {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
        for j in i + 1..n {
            let x = if quantized {
                rng.random_range(-4i32..=4) as f64 / 4.0
            } else {
                rng.random_range(-1.0..1.0)
            };
            v[i * n + j] = x;
            v[j * n + i] = x;
        }
    }
    SimilarityMatrix::from_values(n, v).unwrap()
}

/// P x K labels with arbitrary label values, shuffled over positions.
pub fn shuffled_labels(rng: &mut ChaCha8Rng, p: usize, k: usize) -> Vec<u64> {
    let ids: Vec<u64> = (0..p).map(|i| 1000 + 7 * i as u64).collect();
    let mut labels: Vec<u64> = ids.iter().flat_map(|&id| std::iter::repeat_n(id, k)).collect();
    labels.shuffle(rng);
    labels
}

/// Indices ordered by the given comparator on similarity, ties by index.
fn ranked(cands: &[usize], row: &[f64], descending: bool) -> Vec<usize> {
    let mut v = cands.to_vec();
    v.sort_by(|&a, &b| {
        let o = row[a].total_cmp(&row[b]);
        let o = if descending { o.reverse() } else { o };
        o.then(a.cmp(&b))
    });
    v
}

fn split(labels: &[u64], i: usize) -> (Vec<usize>, Vec<usize>) {
    let others = (0..labels.len()).filter(|&j| j != i);
    others.partition(|&j| labels[j] == labels[i])
}

pub fn brute_hardest(sim: &SimilarityMatrix, labels: &[u64]) -> MinedSet {
    let mut out = MinedSet {
        stats: MiningStats {
            anchors: labels.len(),
            skipped_anchors: 0,
        },
        ..MinedSet::default()
    };
    for i in 0..labels.len() {
        let (pos, neg) = split(labels, i);
        if pos.is_empty() || neg.is_empty() {
            out.stats.skipped_anchors += 1;
            continue;
        }
        let j = ranked(&pos, sim.row(i), false)[0];
        let k = ranked(&neg, sim.row(i), true)[0];
        out.positive_pairs.push((i, j));
        out.negative_pairs.push((i, k));
        out.triplets.push((i, j, k));
    }
    out
}

pub fn brute_ms(sim: &SimilarityMatrix, labels: &[u64], eps: f64) -> MinedSet {
    let mut out = MinedSet {
        stats: MiningStats {
            anchors: labels.len(),
            skipped_anchors: 0,
        },
        ..MinedSet::default()
    };
    for i in 0..labels.len() {
        let (pos, neg) = split(labels, i);
        if pos.is_empty() || neg.is_empty() {
            out.stats.skipped_anchors += 1;
            continue;
        }
        let row = sim.row(i);
        let min_pos = row[ranked(&pos, row, false)[0]];
        let max_neg = row[ranked(&neg, row, true)[0]];
        out.positive_pairs
            .extend(pos.iter().filter(|&&j| row[j] < max_neg + eps).map(|&j| (i, j)));
        out.negative_pairs
            .extend(neg.iter().filter(|&&k| row[k] > min_pos - eps).map(|&k| (i, k)));
    }
    out
}

/// Sequential dot product (same summation order as the library).
pub fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Every reference index, best first, ties to the smaller index.
pub fn full_ranking(query: &[f64], refs: &DescriptorSet) -> Vec<usize> {
    let sims: Vec<f64> = (0..refs.len())
        .map(|r| naive_dot(query, refs.embeddings.row(r)))
        .collect();
    let mut order: Vec<usize> = (0..refs.len()).collect();
    order.sort_by(|&a, &b| match sims[b].partial_cmp(&sims[a]).unwrap() {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Hand count of recall@k with label ground truth: `(recall, first correct
/// rank per query, excluded queries)`.
pub fn count_recall(queries: &DescriptorSet, refs: &DescriptorSet, k: usize) -> (f64, Vec<Option<usize>>, usize) {
    let mut hits = 0usize;
    let mut evaluated = 0usize;
    let mut first = Vec::new();
    for q in 0..queries.len() {
        let label = queries.meta[q].place_id;
        let ranking = full_ranking(queries.embeddings.row(q), refs);
        let correct: Vec<bool> = ranking.iter().map(|&r| refs.meta[r].place_id == label).collect();
        if !correct.iter().any(|&c| c) {
            first.push(None);
            continue;
        }
        evaluated += 1;
        let pos = correct.iter().position(|&c| c).unwrap() + 1;
        first.push(Some(pos));
        if pos <= k {
            hits += 1;
        }
    }
    (hits as f64 / evaluated as f64, first, queries.len() - evaluated)
}

/// Random unit descriptors with labels; a few rows duplicate earlier ones
/// to create exact ties.
pub fn random_descriptor_set(rng: &mut ChaCha8Rng, n: usize, d: usize, labels: impl Fn(&mut ChaCha8Rng) -> u64) -> DescriptorSet {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.random_bool(0.1) {
            let src = rng.random_range(0..i);
            rows.push(rows[src].clone());
        } else {
            rows.push((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
    }
    let meta = (0..n)
        .map(|i| DescriptorMeta {
            id: format!("r{i}"),
            lat: None,
            lon: None,
            place_id: Some(labels(rng)),
        })
        .collect();
    DescriptorSet::new(&rows, meta).unwrap()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns eigenvalues in descending order with unit eigenvectors.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let vals = idx.iter().map(|&i| m[i * n + i]).collect();
    let vecs = idx.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (vals, vecs)
}

/// Sample covariance (divisor N - 1), row-major D x D.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    cov
}

/// Point at `dist_m` meters and `bearing_deg` from `origin`, by a local
/// equirectangular offset (accurate to well under a millimeter at these
/// distances).
pub fn offset_point(origin: (f64, f64), dist_m: f64, bearing_deg: f64) -> (f64, f64) {
    let r = 6_371_008.8;
    let b = bearing_deg.to_radians();
    let dlat = dist_m * b.cos() / r;
    let dlon = dist_m * b.sin() / (r * origin.0.to_radians().cos());
    (origin.0 + dlat.to_degrees(), origin.1 + dlon.to_degrees())
}

/// Momentum SGD with weight decay on one scalar, written out longhand.
pub fn sgd_hand_trace() -> [f64; 3] {
    // lr 0.03, momentum 0.9, weight decay 0.001, w0 = 1, grads 1, -0.5, 0.25
    // step 1: g' = 1.001,           v = 1.001,          w = 0.96997
    // step 2: g' = -0.49903003,     v = 0.40186997,     w = 0.9579139009
    // step 3: g' = 0.2509579139009, v = 0.6126408869009, w = 0.939534674292973
    [0.96997, 0.9579139009, 0.939534674292973]
}
