//! Online selection of informative pairs and triplets inside a batch.
//!
//! Every miner works on the similarity matrix of the current batch, after
//! the forward pass. Outputs are ordered by anchor, then by candidate
//! index, and ties always resolve to the smallest index, so identical
//! inputs give identical mined sets on every platform.

use crate::embedding::SimilarityMatrix;

/// Per-batch mining counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MiningStats {
    pub anchors: usize,
    /// Anchors without any positive or without any negative in the batch.
    pub skipped_anchors: usize,
}

/// Index pairs/triplets selected within one batch.
///
/// Positive pairs `(i, j)` share a label, negative pairs `(i, k)` do not;
/// the first index is always the anchor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinedSet {
    pub positive_pairs: Vec<(usize, usize)>,
    pub negative_pairs: Vec<(usize, usize)>,
    pub triplets: Vec<(usize, usize, usize)>,
    pub stats: MiningStats,
}

impl MinedSet {
    pub fn is_empty(&self) -> bool {
        self.positive_pairs.is_empty() && self.negative_pairs.is_empty() && self.triplets.is_empty()
    }

    pub fn num_pairs(&self) -> usize {
        self.positive_pairs.len() + self.negative_pairs.len()
    }

    /// The explicit triplets if the miner produced any, otherwise every
    /// `(anchor, positive, negative)` combination of the mined pairs that
    /// share an anchor.
    pub fn triplet_view(&self) -> Vec<(usize, usize, usize)> {
        if !self.triplets.is_empty() {
            return self.triplets.clone();
        }
        let mut out = Vec::new();
        let mut neg_start = 0;
        let mut pos_idx = 0;
        while pos_idx < self.positive_pairs.len() {
            let anchor = self.positive_pairs[pos_idx].0;
            let pos_end = pos_idx
                + self.positive_pairs[pos_idx..]
                    .iter()
                    .take_while(|p| p.0 == anchor)
                    .count();
            while neg_start < self.negative_pairs.len() && self.negative_pairs[neg_start].0 < anchor
            {
                neg_start += 1;
            }
            let negs: Vec<usize> = self.negative_pairs[neg_start..]
                .iter()
                .take_while(|n| n.0 == anchor)
                .map(|n| n.1)
                .collect();
            for &(_, j) in &self.positive_pairs[pos_idx..pos_end] {
                out.extend(negs.iter().map(|&k| (anchor, j, k)));
            }
            pos_idx = pos_end;
        }
        out
    }
}

/// All ordered positive and negative pairs implied by the labels.
///
/// A `P x K` batch yields `P K (K-1)` positive and `P K (P-1) K` negative
/// pairs.
pub fn enumerate_pairs(labels: &[u64]) -> MinedSet {
    let n = labels.len();
    let mut set = MinedSet::default();
    for i in 0..n {
        let mut has_pos = false;
        let mut has_neg = false;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[i] == labels[j] {
                set.positive_pairs.push((i, j));
                has_pos = true;
            } else {
                set.negative_pairs.push((i, j));
                has_neg = true;
            }
        }
        set.stats.anchors += 1;
        if !(has_pos && has_neg) {
            set.stats.skipped_anchors += 1;
        }
    }
    set
}

/// Online hardest mining: per anchor, the least similar positive and the
/// most similar negative.
pub fn hardest_mining(sim: &SimilarityMatrix, labels: &[u64]) -> MinedSet {
    assert_eq!(sim.len(), labels.len(), "similarity/label size mismatch");
    let n = labels.len();
    let mut set = MinedSet::default();
    for i in 0..n {
        set.stats.anchors += 1;
        let row = sim.row(i);
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if hardest_pos.is_none_or(|p| row[j] < row[p]) {
                    hardest_pos = Some(j);
                }
            } else if hardest_neg.is_none_or(|k| row[j] > row[k]) {
                hardest_neg = Some(j);
            }
        }
        match (hardest_pos, hardest_neg) {
            (Some(j), Some(k)) => {
                set.positive_pairs.push((i, j));
                set.negative_pairs.push((i, k));
                set.triplets.push((i, j, k));
            }
            _ => set.stats.skipped_anchors += 1,
        }
    }
    set
}

/// Multi-Similarity pair mining.
///
/// For anchor `i` with positives `P_i` and negatives `N_i`, a negative
/// `k` is kept iff `S_ik > min_{j in P_i} S_ij - epsilon` and a positive
/// `j` is kept iff `S_ij < max_{k in N_i} S_ik + epsilon`. Anchors lacking
/// either side contribute nothing.
pub fn ms_mining(sim: &SimilarityMatrix, labels: &[u64], epsilon: f64) -> MinedSet {
    assert_eq!(sim.len(), labels.len(), "similarity/label size mismatch");
    assert!(epsilon >= 0.0, "epsilon must be nonnegative");
    let n = labels.len();
    let mut set = MinedSet::default();
    for i in 0..n {
        set.stats.anchors += 1;
        let row = sim.row(i);
        let mut min_pos = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        for j in (0..n).filter(|&j| j != i) {
            if labels[j] == labels[i] {
                min_pos = min_pos.min(row[j]);
            } else {
                max_neg = max_neg.max(row[j]);
            }
        }
        if min_pos == f64::INFINITY || max_neg == f64::NEG_INFINITY {
            set.stats.skipped_anchors += 1;
            continue;
        }
        for j in (0..n).filter(|&j| j != i) {
            if labels[j] == labels[i] {
                if row[j] < max_neg + epsilon {
                    set.positive_pairs.push((i, j));
                }
            } else if row[j] > min_pos - epsilon {
                set.negative_pairs.push((i, j));
            }
        }
    }
    set
}

/// Mining strategy selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Miner {
    /// Every pair in the batch.
    All,
    /// Online hardest mining (one triplet per anchor).
    Hardest,
    MultiSimilarity { epsilon: f64 },
}

impl Miner {
    pub fn mine(&self, sim: &SimilarityMatrix, labels: &[u64]) -> MinedSet {
        match *self {
            Miner::All => enumerate_pairs(labels),
            Miner::Hardest => hardest_mining(sim, labels),
            Miner::MultiSimilarity { epsilon } => ms_mining(sim, labels, epsilon),
        }
    }
}
