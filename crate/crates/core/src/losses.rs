//! Pair- and triplet-based metric-learning losses over a similarity matrix.
//!
//! Each loss returns its scalar value together with `dL/dS`, the gradient
//! with respect to the similarity matrix. [`LossOutput::grad`] chains that
//! through `S = Z Z^T` to the unit-norm embeddings, and
//! [`LossOutput::raw_grad`] continues through the row normalization to the
//! raw (pre-normalization) embeddings, which is what the trainer feeds to
//! the aggregation head.

use crate::embedding::{normalize_backward, similarity_backward, EmbeddingBatch, SimilarityMatrix};
use crate::mining::MinedSet;
use crate::places::haversine;
use crate::{Error, Result};

/// `I_ij = 1` iff samples `i != j` share a label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLabels {
    n: usize,
    indicator: Vec<bool>,
}

impl PairLabels {
    pub fn from_labels(labels: &[u64]) -> Self {
        let n = labels.len();
        let mut indicator = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                indicator[i * n + j] = i != j && labels[i] == labels[j];
            }
        }
        Self { n, indicator }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.indicator[i * self.n + j]
    }

    /// Positive and negative index lists of anchor `i`, in index order.
    pub fn split(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.n)
            .filter(|&j| j != i)
            .partition(|&j| self.is_positive(i, j))
    }
}

/// Loss hyperparameters. The margin is shared by every loss; `alpha` and
/// `beta` only affect Multi-Similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub ms_alpha: f64,
    pub ms_beta: f64,
}

impl LossConfig {
    pub fn contrastive() -> Self {
        Self {
            margin: 0.5,
            ..Self::multi_similarity()
        }
    }

    pub fn triplet() -> Self {
        Self {
            margin: 0.1,
            ..Self::multi_similarity()
        }
    }

    pub fn multi_similarity() -> Self {
        Self {
            margin: 0.5,
            ms_alpha: 2.0,
            ms_beta: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() {
            return Err(Error::InvalidParam(format!("margin {}", self.margin)));
        }
        if !(self.ms_alpha > 0.0 && self.ms_alpha.is_finite())
            || !(self.ms_beta > 0.0 && self.ms_beta.is_finite())
        {
            return Err(Error::InvalidParam(format!(
                "alpha={} and beta={} must be positive",
                self.ms_alpha, self.ms_beta
            )));
        }
        Ok(())
    }
}

/// A weakly supervised training tuple: a query, its potential positives
/// (geographically close, possibly facing elsewhere), and definite
/// negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakTuple {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl WeakTuple {
    pub fn new(query: usize, positives: Vec<usize>, negatives: Vec<usize>) -> Result<Self> {
        if positives.contains(&query) || negatives.contains(&query) {
            return Err(Error::InvalidParam(format!(
                "query {query} appears in its own candidate sets"
            )));
        }
        if positives.iter().any(|p| negatives.contains(p)) {
            return Err(Error::InvalidParam(
                "potential positives and negatives overlap".into(),
            ));
        }
        Ok(Self {
            query,
            positives,
            negatives,
        })
    }
}

/// Builds one weak tuple per sample from geotags: potential positives lie
/// within `positive_radius_m`, negatives at least `negative_min_m` away.
/// Samples with no potential positive get no tuple.
pub fn weak_tuples_from_geo(
    coords: &[(f64, f64)],
    positive_radius_m: f64,
    negative_min_m: f64,
) -> Vec<WeakTuple> {
    let mut out = Vec::new();
    for (q, &a) in coords.iter().enumerate() {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (j, &b) in coords.iter().enumerate() {
            if j == q {
                continue;
            }
            let d = haversine(a, b);
            if d <= positive_radius_m {
                positives.push(j);
            } else if d >= negative_min_m {
                negatives.push(j);
            }
        }
        if !positives.is_empty() {
            out.push(WeakTuple {
                query: q,
                positives,
                negatives,
            });
        }
    }
    out
}

/// Scalar loss with its gradient w.r.t. the similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Row-major `N x N` gradient `dL/dS`.
    pub grad_sim: Vec<f64>,
    /// Number of pairs, triplets or anchors averaged over.
    pub terms: usize,
    /// Set when nothing was mined; value and gradient are then zero.
    pub empty: bool,
}

impl LossOutput {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad_sim: vec![0.0; n * n],
            terms: 0,
            empty: true,
        }
    }

    /// `dL/dZ` for the unit-norm embeddings `Z` that produced `S`.
    pub fn grad(&self, batch: &EmbeddingBatch) -> Vec<f64> {
        similarity_backward(&self.grad_sim, batch)
    }

    /// `dL/dX` for raw embeddings `X` whose rows normalize to `batch`.
    pub fn raw_grad(&self, batch: &EmbeddingBatch, raw: &[Vec<f64>]) -> Vec<f64> {
        let d = batch.dim();
        let gz = self.grad(batch);
        raw.iter()
            .zip(gz.chunks_exact(d.max(1)))
            .flat_map(|(x, g)| normalize_backward(x, g))
            .collect()
    }
}

fn check_indices(n: usize, idx: impl IntoIterator<Item = usize>) -> Result<()> {
    for i in idx {
        if i >= n {
            return Err(Error::Shape(format!("index {i} out of range for batch of {n}")));
        }
    }
    Ok(())
}

/// Contrastive loss averaged over all mined pairs: `-S_ij` for positives,
/// `[S_ik - m]_+` for negatives.
pub fn contrastive_loss(
    sim: &SimilarityMatrix,
    pairs: &MinedSet,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = sim.len();
    check_indices(
        n,
        pairs
            .positive_pairs
            .iter()
            .chain(&pairs.negative_pairs)
            .flat_map(|&(a, b)| [a, b]),
    )?;
    let terms = pairs.num_pairs();
    if terms == 0 {
        return Ok(LossOutput::zero(n));
    }
    let scale = 1.0 / terms as f64;
    let mut out = LossOutput::zero(n);
    out.empty = false;
    out.terms = terms;
    let mut total = 0.0;
    for &(i, j) in &pairs.positive_pairs {
        total -= sim.get(i, j);
        out.grad_sim[i * n + j] -= scale;
    }
    for &(i, k) in &pairs.negative_pairs {
        let t = sim.get(i, k) - cfg.margin;
        if t > 0.0 {
            total += t;
            out.grad_sim[i * n + k] += scale;
        }
    }
    out.value = total * scale;
    Ok(out)
}

/// Triplet margin loss `[S_ik - S_ij + m]_+` averaged over triplets
/// `(anchor i, positive j, negative k)`.
pub fn triplet_loss(
    sim: &SimilarityMatrix,
    triplets: &[(usize, usize, usize)],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = sim.len();
    check_indices(n, triplets.iter().flat_map(|&(a, p, q)| [a, p, q]))?;
    if triplets.is_empty() {
        return Ok(LossOutput::zero(n));
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut out = LossOutput::zero(n);
    out.empty = false;
    out.terms = triplets.len();
    let mut total = 0.0;
    for &(i, j, k) in triplets {
        let t = sim.get(i, k) - sim.get(i, j) + cfg.margin;
        if t > 0.0 {
            total += t;
            out.grad_sim[i * n + k] += scale;
            out.grad_sim[i * n + j] -= scale;
        }
    }
    out.value = total * scale;
    Ok(out)
}

/// `log(1 + sum exp(a))` and the weights `exp(a_j) / (1 + sum exp(a))`,
/// computed with a max shift.
fn log1p_sum_exp(logits: &[f64]) -> (f64, Vec<f64>) {
    let shift = logits.iter().copied().fold(0.0, f64::max);
    let denom = (-shift).exp() + logits.iter().map(|a| (a - shift).exp()).sum::<f64>();
    let lse = shift + denom.ln();
    let weights = logits.iter().map(|a| (a - lse).exp()).collect();
    (lse, weights)
}

fn ms_loss_by_anchor(
    sim: &SimilarityMatrix,
    cfg: &LossConfig,
    sets: impl Iterator<Item = (usize, Vec<usize>, Vec<usize>)>,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = sim.len();
    if n == 0 {
        return Ok(LossOutput::zero(0));
    }
    let (alpha, beta, m) = (cfg.ms_alpha, cfg.ms_beta, cfg.margin);
    let scale = 1.0 / n as f64;
    let mut out = LossOutput::zero(n);
    let mut total = 0.0;
    for (i, pos, neg) in sets {
        check_indices(n, pos.iter().chain(&neg).copied())?;
        if !pos.is_empty() {
            let logits: Vec<f64> = pos.iter().map(|&j| -alpha * (sim.get(i, j) - m)).collect();
            let (lse, w) = log1p_sum_exp(&logits);
            total += lse / alpha;
            for (&j, wj) in pos.iter().zip(w) {
                out.grad_sim[i * n + j] -= wj * scale;
            }
        }
        if !neg.is_empty() {
            let logits: Vec<f64> = neg.iter().map(|&k| beta * (sim.get(i, k) - m)).collect();
            let (lse, w) = log1p_sum_exp(&logits);
            total += lse / beta;
            for (&k, wk) in neg.iter().zip(w) {
                out.grad_sim[i * n + k] += wk * scale;
            }
        }
        if !pos.is_empty() || !neg.is_empty() {
            out.empty = false;
        }
    }
    out.terms = n;
    out.value = total * scale;
    Ok(out)
}

/// Multi-Similarity loss over every positive and negative pair, averaged
/// over the `N` anchors.
pub fn multi_similarity_loss(
    sim: &SimilarityMatrix,
    labels: &PairLabels,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if labels.len() != sim.len() {
        return Err(Error::Shape(format!(
            "{} labels for a {}x{0} similarity matrix",
            labels.len(),
            sim.len()
        )));
    }
    ms_loss_by_anchor(
        sim,
        cfg,
        (0..sim.len()).map(|i| {
            let (p, n) = labels.split(i);
            (i, p, n)
        }),
    )
}

/// Multi-Similarity loss restricted to mined pairs. Anchors keep the
/// `1/N` normalization even when mining left them without pairs.
pub fn multi_similarity_loss_mined(
    sim: &SimilarityMatrix,
    pairs: &MinedSet,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let n = sim.len();
    let mut pos = vec![Vec::new(); n];
    let mut neg = vec![Vec::new(); n];
    for &(i, j) in &pairs.positive_pairs {
        check_indices(n, [i])?;
        pos[i].push(j);
    }
    for &(i, k) in &pairs.negative_pairs {
        check_indices(n, [i])?;
        neg[i].push(k);
    }
    ms_loss_by_anchor(
        sim,
        cfg,
        pos.into_iter()
            .zip(neg)
            .enumerate()
            .map(|(i, (p, n))| (i, p, n)),
    )
}

/// Weakly supervised triplet loss: only the potential positive most
/// similar to the query counts, and the hinge terms are summed over the
/// negatives.
pub fn weak_triplet_loss(
    sim: &SimilarityMatrix,
    tuple: &WeakTuple,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = sim.len();
    let q = tuple.query;
    check_indices(
        n,
        std::iter::once(q)
            .chain(tuple.positives.iter().copied())
            .chain(tuple.negatives.iter().copied()),
    )?;
    let best = tuple
        .positives
        .iter()
        .copied()
        .reduce(|a, b| {
            let (sa, sb) = (sim.get(q, a), sim.get(q, b));
            if sb > sa || (sb == sa && b < a) {
                b
            } else {
                a
            }
        })
        .ok_or_else(|| Error::InvalidParam("weak tuple has no potential positive".into()))?;
    let mut out = LossOutput::zero(n);
    out.empty = tuple.negatives.is_empty();
    out.terms = tuple.negatives.len();
    let s_pos = sim.get(q, best);
    for &k in &tuple.negatives {
        let t = sim.get(q, k) - s_pos + cfg.margin;
        if t > 0.0 {
            out.value += t;
            out.grad_sim[q * n + k] += 1.0;
            out.grad_sim[q * n + best] -= 1.0;
        }
    }
    Ok(out)
}

/// Loss selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Contrastive,
    Triplet,
    MultiSimilarity,
}

impl LossKind {
    pub fn default_config(self) -> LossConfig {
        match self {
            LossKind::Contrastive => LossConfig::contrastive(),
            LossKind::Triplet => LossConfig::triplet(),
            LossKind::MultiSimilarity => LossConfig::multi_similarity(),
        }
    }

    /// Evaluates the loss on the pairs (or triplets) chosen by a miner.
    pub fn compute(
        self,
        sim: &SimilarityMatrix,
        mined: &MinedSet,
        cfg: &LossConfig,
    ) -> Result<LossOutput> {
        match self {
            LossKind::Contrastive => contrastive_loss(sim, mined, cfg),
            LossKind::Triplet => triplet_loss(sim, &mined.triplet_view(), cfg),
            LossKind::MultiSimilarity => multi_similarity_loss_mined(sim, mined, cfg),
        }
    }
}
