//! Retrieval evaluation (recall@k) and descriptor compression.
//!
//! Retrieval is exhaustive: every query is compared with every reference
//! by cosine similarity. A query counts as retrieved at `k` if any of its
//! top-`k` references matches it under the ground-truth rule: within a
//! radius in meters (geo mode) or sharing the place label (label mode).

pub mod format;
pub mod pca;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::embedding::{dot, EmbeddingBatch, UNIT_NORM_TOL};
use crate::places::haversine;
use crate::{Error, Result};

pub use format::{DescriptorMeta, DescriptorSet};
pub use pca::{pca_transform, pca_whiten_fit, PCAModel};

/// Default geo ground-truth radius in meters.
pub const DEFAULT_GT_RADIUS_M: f64 = 25.0;

/// Indices of the `k` references most similar to `query`, best first.
/// Ties go to the smaller index.
pub fn retrieve_topk(query: &[f64], refs: &EmbeddingBatch, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > refs.len() {
        return Err(Error::InvalidParam(format!(
            "k={k} out of range for {} references",
            refs.len()
        )));
    }
    if query.len() != refs.dim() {
        return Err(Error::Shape(format!(
            "query dimension {} vs reference dimension {}",
            query.len(),
            refs.dim()
        )));
    }
    let qn = dot(query, query).sqrt();
    if (qn - 1.0).abs() > UNIT_NORM_TOL || !refs.is_normalized() {
        return Err(Error::NotNormalized { row: 0, norm: qn });
    }
    let mut scored: Vec<(f64, usize)> = refs.rows().map(|r| dot(query, r)).zip(0..).collect();
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_rank);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Rule deciding whether a reference depicts the query's place.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundTruthMatcher {
    Geo { radius_m: f64 },
    Label,
}

impl Default for GroundTruthMatcher {
    fn default() -> Self {
        GroundTruthMatcher::Geo {
            radius_m: DEFAULT_GT_RADIUS_M,
        }
    }
}

impl GroundTruthMatcher {
    pub fn matches(&self, query: &DescriptorMeta, reference: &DescriptorMeta) -> Result<bool> {
        match *self {
            GroundTruthMatcher::Geo { radius_m } => {
                let (q, r) = match (query.coords(), reference.coords()) {
                    (Some(q), Some(r)) => (q, r),
                    _ => {
                        return Err(Error::GroundTruth(format!(
                            "geo matching needs coordinates ({:?} vs {:?})",
                            query.id, reference.id
                        )))
                    }
                };
                Ok(haversine(q, r) <= radius_m)
            }
            GroundTruthMatcher::Label => match (query.place_id, reference.place_id) {
                (Some(a), Some(b)) => Ok(a == b),
                _ => Err(Error::GroundTruth(format!(
                    "label matching needs place ids ({:?} vs {:?})",
                    query.id, reference.id
                ))),
            },
        }
    }

    /// `geo:<radius>` or `label`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(Self::Label),
            "geo" => Ok(Self::default()),
            _ => s
                .strip_prefix("geo:")
                .and_then(|r| r.parse().ok())
                .filter(|r: &f64| *r >= 0.0)
                .map(|radius_m| Self::Geo { radius_m })
                .ok_or_else(|| Error::InvalidParam(format!("ground truth mode {s:?}"))),
        }
    }
}

/// Retrieval trace of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    /// The top `max(ks)` reference indices, best first.
    pub retrieved: Vec<usize>,
    /// 1-based rank of the first correct reference within `retrieved`.
    pub first_correct: Option<usize>,
    /// Whether any reference at all matches this query.
    pub has_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub recall_at: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryTrace>,
    pub num_queries: usize,
    /// Queries without any matching reference; left out of the denominator.
    pub num_excluded: usize,
}

impl RecallReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn num_evaluated(&self) -> usize {
        self.num_queries - self.num_excluded
    }

    /// Plain-text table, one row per k.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8}  {:>8}", "k", "recall");
        for (k, r) in &self.recall_at {
            let _ = writeln!(s, "{:>8}  {:>8.4}", k, r);
        }
        let _ = writeln!(
            s,
            "queries: {} (evaluated {}, excluded {})",
            self.num_queries,
            self.num_evaluated(),
            self.num_excluded
        );
        s
    }

    /// `key=value` lines; floats print in shortest round-trip form.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let ks: Vec<String> = self.ks.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "ks={}", ks.join(","));
        let _ = writeln!(s, "queries={}", self.num_queries);
        let _ = writeln!(s, "excluded={}", self.num_excluded);
        for (k, r) in &self.recall_at {
            let _ = writeln!(s, "recall@{k}={r}");
        }
        s
    }

    /// Parses the summary written by [`Self::to_kv`]; per-query traces are
    /// not stored and come back empty. Unknown keys are ignored so callers
    /// can append their own.
    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("missing key {k:?}")))
        };
        let bad = |k: &str| Error::Format(format!("bad value for {k:?}"));
        let ks: Vec<usize> = get("ks")?
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| bad("ks")))
            .collect::<Result<_>>()?;
        let mut recall_at = BTreeMap::new();
        for &k in &ks {
            let key = format!("recall@{k}");
            recall_at.insert(k, get(&key)?.parse().map_err(|_| bad(&key))?);
        }
        Ok(Self {
            ks,
            recall_at,
            per_query: Vec::new(),
            num_queries: get("queries")?.parse().map_err(|_| bad("queries"))?,
            num_excluded: get("excluded")?.parse().map_err(|_| bad("excluded"))?,
        })
    }
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

/// Recall@k of `queries` against `refs`.
pub fn recall_at_k(
    queries: &DescriptorSet,
    refs: &DescriptorSet,
    gt: &GroundTruthMatcher,
    ks: &[usize],
) -> Result<RecallReport> {
    if queries.is_empty() {
        return Err(Error::InvalidParam("empty query set".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidParam(format!("invalid ks {ks:?}")));
    }
    let mut ks_sorted = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    let kmax = *ks_sorted.last().expect("nonempty");

    let per_query: Vec<QueryTrace> = (0..queries.len())
        .into_par_iter()
        .map(|q| -> Result<QueryTrace> {
            let qm = &queries.meta[q];
            let mut matches = Vec::with_capacity(refs.len());
            for rm in &refs.meta {
                matches.push(gt.matches(qm, rm)?);
            }
            let retrieved = retrieve_topk(queries.embeddings.row(q), &refs.embeddings, kmax)?;
            let first_correct = retrieved.iter().position(|&r| matches[r]).map(|p| p + 1);
            Ok(QueryTrace {
                retrieved,
                first_correct,
                has_ground_truth: matches.iter().any(|&m| m),
            })
        })
        .collect::<Result<_>>()?;

    let evaluated = per_query.iter().filter(|t| t.has_ground_truth).count();
    let mut recall_at = BTreeMap::new();
    for &k in &ks_sorted {
        let hits = per_query
            .iter()
            .filter(|t| t.first_correct.is_some_and(|r| r <= k))
            .count();
        let r = if evaluated == 0 {
            0.0
        } else {
            hits as f64 / evaluated as f64
        };
        recall_at.insert(k, r);
    }
    Ok(RecallReport {
        ks: ks_sorted,
        recall_at,
        num_queries: per_query.len(),
        num_excluded: per_query.len() - evaluated,
        per_query,
    })
}
