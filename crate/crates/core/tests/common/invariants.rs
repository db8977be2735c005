//! Module invariants as property tests. Each property runs `CASES` random
//! cases through proptest's runner and reports the first failure.

use std::collections::{BTreeMap, BTreeSet};

use placerec_core::aggregators::{
    adaptive_avg_pool, avg_pool, channel_means, conv_ap_forward, pool_bins, Aggregator, ConvAPParams, GemParams,
};
use placerec_core::embedding::{dot, l2_normalize, similarity_matrix, EmbeddingBatch, SimilarityMatrix};
use placerec_core::evaluator::format::DescriptorMeta;
use placerec_core::evaluator::pca::pca_whiten_fit;
use placerec_core::evaluator::{recall_at_k, retrieve_topk, GroundTruthMatcher};
use placerec_core::losses::{
    contrastive_loss, multi_similarity_loss, triplet_loss, weak_triplet_loss, LossConfig, PairLabels, WeakTuple,
};
use placerec_core::mining::{enumerate_pairs, hardest_mining, ms_mining};
use placerec_core::places::{
    cell_of, grid_group, haversine, synth_places, BatchSpec, ImageRecord, Place, PkSampler, PlacesDB, SynthConfig,
};
use placerec_core::trainer::{describe_db, lr_at_epoch, sgd_step, train, OptimizerState, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, LossInstance, LossUnderTest, ALL_LOSSES};
use super::oracles::{full_ranking, random_descriptor_set, random_similarity, shuffled_labels};
use super::{random_map, random_vec};

pub const CASES: u32 = 256;

pub type Property = fn() -> Result<(), String>;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const ALL: &[(&str, Property)] = &[
    ("places: batches hold P labels of multiplicity K", batch_composition),
    ("places: grid_group cells are distinct and regrouping is the identity", grid_group_idempotent),
    ("places: haversine nonnegative, symmetric, zero only on identity", haversine_metric),
    ("places: an epoch visits every eligible place once", sampler_epoch_coverage),
    ("embedding: similarity is permutation equivariant", similarity_permutation),
    ("embedding: similarity ignores positive rescaling", similarity_scale_invariance),
    ("embedding: one-pass matrix equals pairwise dots", similarity_matches_pairwise),
    ("aggregators: identity Conv-AP equals average pooling", identity_conv_ap_is_avg),
    ("aggregators: adaptive pooling preserves the global mean", aap_global_mean),
    ("aggregators: gradients match finite differences", aggregator_gradients),
    ("aggregators: output dimension and repeatability", descriptor_dim_and_repeatability),
    ("losses: invariant under joint permutation", loss_permutation_invariance),
    ("losses: sign constraints", loss_signs),
    ("losses: gradients match finite differences", loss_gradients),
    ("losses: multi-similarity is monotone in similarities", ms_monotone),
    ("losses: weak triplet sees only the best positive", weak_triplet_best_positive_only),
    ("mining: mined pairs are label consistent", mined_subset_of_enumeration),
    ("mining: hardest mining invariant to increasing transforms", hardest_monotone_invariance),
    ("mining: ms_mining limits (eps = inf, eps = 0)", ms_mining_limits),
    ("mining: deterministic including tie order", mining_determinism),
    ("trainer: update equals the momentum formula", sgd_formula),
    ("trainer: schedule is non-increasing", schedule_monotone),
    ("trainer: trained heads emit unit-norm descriptors", trained_unit_norm),
    ("trainer: zero learning rate leaves parameters unchanged", zero_lr_identity),
    ("evaluator: recall is monotone in k", recall_monotone),
    ("evaluator: top-k agrees with a full sort", topk_matches_sort),
    ("evaluator: geo radius 0 matches identical coordinates only", geo_radius_zero),
    ("evaluator: PCA fit is deterministic", pca_deterministic),
    ("evaluator: noiseless synthetic data gives recall@1 = 1", noiseless_perfect_recall),
];

fn place_db(rng: &mut ChaCha8Rng, places: usize, min_k: usize, max_k: usize) -> PlacesDB {
    let places = (0..places)
        .map(|p| Place {
            place_id: 10 + p as u64,
            images: (0..rng.random_range(min_k..=max_k))
                .map(|k| ImageRecord {
                    image_ref: format!("p{p}/{k}"),
                    lat: 10.0 + p as f64 * 0.01,
                    lon: 20.0,
                    bearing: None,
                    year: 2020,
                    month: (k % 12) as u8 + 1,
                    payload: None,
                })
                .collect(),
        })
        .collect();
    PlacesDB::new(places, 0.001, None).unwrap()
}

pub fn batch_composition() -> Result<(), String> {
    check((2usize..6, 2usize..5, 0usize..6, any::<u64>()), |(p, k, extra, seed)| {
        let mut r = rng(seed);
        let db = place_db(&mut r, p + extra, k, k + 3);
        let spec = BatchSpec {
            num_places: p,
            images_per_place: k,
            rng_seed: seed,
        };
        let mut sampler = PkSampler::new(&db, spec).unwrap();
        for _ in 0..5 {
            let b = sampler.next_batch(&db);
            let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
            for &l in &b.labels {
                *counts.entry(l).or_default() += 1;
            }
            prop_assert_eq!(counts.len(), p);
            prop_assert!(counts.values().all(|&c| c == k));
            let mut imgs: Vec<(usize, usize)> = b.items.iter().map(|i| (i.place_index, i.image_index)).collect();
            imgs.sort_unstable();
            imgs.dedup();
            prop_assert_eq!(imgs.len(), p * k);
        }
        Ok(())
    })
}

pub fn grid_group_idempotent() -> Result<(), String> {
    check((1usize..60, 1usize..4, any::<u64>()), |(n, min_dates, seed)| {
        let mut r = rng(seed);
        let cell = 0.001;
        let recs: Vec<ImageRecord> = (0..n)
            .map(|i| ImageRecord {
                image_ref: format!("img{i}"),
                lat: 45.0 + r.random_range(0..4) as f64 * cell + r.random_range(0.0..cell * 0.9),
                lon: 7.0 + r.random_range(0..4) as f64 * cell + r.random_range(0.0..cell * 0.9),
                bearing: None,
                year: 2015 + r.random_range(0..2),
                month: r.random_range(1..=3),
                payload: None,
            })
            .collect();
        let db = grid_group(recs, cell, min_dates).unwrap();
        let cells: BTreeSet<(i64, i64)> = db
            .places()
            .iter()
            .map(|p| {
                let c = cell_of(p.images[0].lat, p.images[0].lon, cell);
                assert!(p.images.iter().all(|im| cell_of(im.lat, im.lon, cell) == c));
                c
            })
            .collect();
        prop_assert_eq!(cells.len(), db.len());
        let groups = |db: &PlacesDB| -> Vec<Vec<String>> {
            db.places()
                .iter()
                .map(|p| p.images.iter().map(|i| i.image_ref.clone()).collect())
                .collect()
        };
        let again = grid_group(db.records().map(|(_, r)| r.clone()).collect(), cell, min_dates).unwrap();
        prop_assert_eq!(groups(&again), groups(&db));
        Ok(())
    })
}

pub fn haversine_metric() -> Result<(), String> {
    let coord = (-90.0f64..=90.0, -180.0f64..=180.0);
    check((coord.clone(), coord), |(a, b)| {
        let d = haversine(a, b);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, haversine(b, a));
        prop_assert_eq!(haversine(a, a), 0.0);
        if a != b && a.0.abs() < 90.0 {
            prop_assert!(d > 0.0, "distinct points at {} m", d);
        }
        Ok(())
    })
}

pub fn sampler_epoch_coverage() -> Result<(), String> {
    check((2usize..5, 1usize..4, 2usize..4, any::<u64>()), |(p, batches, k, seed)| {
        let mut r = rng(seed);
        let eligible = p * batches;
        // a few places too small to be eligible
        let mut db_places = place_db(&mut r, eligible, k, k + 2).into_places();
        db_places.push(Place {
            place_id: 9999,
            images: Vec::new(),
        });
        let db = PlacesDB::new(db_places, 0.001, None).unwrap();
        let mut sampler = PkSampler::new(
            &db,
            BatchSpec {
                num_places: p,
                images_per_place: k,
                rng_seed: seed,
            },
        )
        .unwrap();
        for _epoch in 0..3 {
            sampler.start_epoch();
            let mut seen = BTreeSet::new();
            for _ in 0..sampler.batches_per_epoch() {
                for l in sampler.next_batch(&db).labels.iter().step_by(k) {
                    prop_assert!(seen.insert(*l), "place {} repeated within an epoch", l);
                }
            }
            prop_assert_eq!(seen.len(), eligible);
            prop_assert!(!seen.contains(&9999));
        }
        Ok(())
    })
}

fn random_batch(r: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingBatch {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_vec(r, d)).collect();
    EmbeddingBatch::normalized(&rows, (0..n as u64).collect()).unwrap()
}

pub fn similarity_permutation() -> Result<(), String> {
    check((1usize..12, 1usize..6, any::<u64>()), |(n, d, seed)| {
        let mut r = rng(seed);
        let batch = random_batch(&mut r, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        // row t of the permuted batch is row perm[t] of the original
        let s = similarity_matrix(&batch).unwrap();
        let sp = similarity_matrix(&batch.permuted(&perm)).unwrap();
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(sp.get(a, b), s.get(perm[a], perm[b]));
            }
        }
        Ok(())
    })
}

pub fn similarity_scale_invariance() -> Result<(), String> {
    check((1usize..8, 1e-3f64..1e3, 1e-3f64..1e3, any::<u64>()), |(d, a, b, seed)| {
        let mut r = rng(seed);
        let (u, v) = (random_vec(&mut r, d), random_vec(&mut r, d));
        if u.iter().all(|x| *x == 0.0) || v.iter().all(|x| *x == 0.0) {
            return Ok(());
        }
        let sim = |u: &[f64], v: &[f64]| dot(l2_normalize(u).unwrap().as_slice(), l2_normalize(v).unwrap().as_slice());
        let scaled_u: Vec<f64> = u.iter().map(|x| x * a).collect();
        let scaled_v: Vec<f64> = v.iter().map(|x| x * b).collect();
        prop_assert!((sim(&u, &v) - sim(&scaled_u, &scaled_v)).abs() < 1e-12);
        Ok(())
    })
}

pub fn similarity_matches_pairwise() -> Result<(), String> {
    check((1usize..40, 1usize..16, any::<u64>()), |(n, d, seed)| {
        let batch = random_batch(&mut rng(seed), n, d);
        let s = similarity_matrix(&batch).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((s.get(i, j) - dot(batch.row(i), batch.row(j))).abs() < 1e-12);
            }
        }
        Ok(())
    })
}

pub fn identity_conv_ap_is_avg() -> Result<(), String> {
    check((1usize..8, 1usize..8, 1usize..10, any::<u64>()), |(h, w, c, seed)| {
        let map = random_map(&mut rng(seed), h, w, c, -5.0, 5.0);
        let params = ConvAPParams::identity(c, 1, 1).unwrap();
        let (a, b) = (conv_ap_forward(&map, &params), avg_pool(&map));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a.as_slice()), bits(b.as_slice()));
            }
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
        Ok(())
    })
}

pub fn aap_global_mean() -> Result<(), String> {
    check((1usize..10, 1usize..10, 1usize..5, any::<u64>()), |(h, w, c, seed)| {
        let mut r = rng(seed);
        let (s1, s2) = (r.random_range(1..=h), r.random_range(1..=w));
        let map = random_map(&mut r, h, w, c, -3.0, 3.0);
        let pooled = adaptive_avg_pool(&map, s1, s2).unwrap();
        let (rows, cols) = (pool_bins(h, s1), pool_bins(w, s2));
        let global = channel_means(&map);
        for (ch, want) in global.iter().enumerate() {
            let mut acc = 0.0;
            for (i, ri) in rows.iter().enumerate() {
                for (j, cj) in cols.iter().enumerate() {
                    acc += pooled.get(i, j, ch) * (ri.len() * cj.len()) as f64;
                }
            }
            prop_assert!((acc / (h * w) as f64 - want).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn aggregator_gradients() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        let [w, b, f] = gradcheck::conv_ap_check(1, seed);
        let [p, g] = gradcheck::gem_check(1, seed);
        for (name, e) in [("W", w), ("bias", b), ("F", f), ("p", p), ("GeM F", g)] {
            prop_assert!(e < gradcheck::REL_TOL, "{} relative error {}", name, e);
        }
        Ok(())
    })
}

pub fn descriptor_dim_and_repeatability() -> Result<(), String> {
    check((1usize..7, 1usize..7, 1usize..5, 1usize..5, any::<u64>()), |(h, w, c, d, seed)| {
        let mut r = rng(seed);
        let (s1, s2) = (r.random_range(1..=h), r.random_range(1..=w));
        let params = ConvAPParams::init(c, d, s1, s2, true, &mut r).unwrap();
        let map = random_map(&mut r, h, w, c, 0.0, 1.0);
        let Ok(a) = conv_ap_forward(&map, &params) else {
            return Ok(());
        };
        prop_assert_eq!(a.dim(), s1 * s2 * d);
        let b = conv_ap_forward(&map, &params).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(a.as_slice()), bits(b.as_slice()));
        Ok(())
    })
}

fn loss_value(which: LossUnderTest, sim: &SimilarityMatrix, labels: &[u64], tuple: &WeakTuple) -> f64 {
    match which {
        LossUnderTest::Contrastive => contrastive_loss(sim, &enumerate_pairs(labels), &LossConfig::contrastive()),
        LossUnderTest::Triplet => triplet_loss(sim, &enumerate_pairs(labels).triplet_view(), &LossConfig::triplet()),
        LossUnderTest::MultiSimilarity => {
            multi_similarity_loss(sim, &PairLabels::from_labels(labels), &LossConfig::multi_similarity())
        }
        LossUnderTest::WeakTriplet => weak_triplet_loss(sim, tuple, &LossConfig::triplet()),
    }
    .unwrap()
    .value
}

pub fn loss_permutation_invariance() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        let mut r = rng(seed);
        let inst = LossInstance::random(&mut r);
        let n = inst.labels.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        // new position t holds old row perm[t]
        let mut inv = vec![0; n];
        for (t, &o) in perm.iter().enumerate() {
            inv[o] = t;
        }
        let batch = EmbeddingBatch::normalized(&inst.raw, inst.labels.clone()).unwrap();
        let sim = similarity_matrix(&batch).unwrap();
        let pbatch = batch.permuted(&perm);
        let psim = similarity_matrix(&pbatch).unwrap();
        let ptuple = WeakTuple::new(
            inv[inst.tuple.query],
            inst.tuple.positives.iter().map(|&j| inv[j]).collect(),
            inst.tuple.negatives.iter().map(|&k| inv[k]).collect(),
        )
        .unwrap();
        for which in ALL_LOSSES {
            let a = loss_value(which, &sim, &inst.labels, &inst.tuple);
            let b = loss_value(which, &psim, pbatch.labels(), &ptuple);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{:?}: {} vs {}", which, a, b);
        }
        Ok(())
    })
}

pub fn loss_signs() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        let inst = LossInstance::random(&mut rng(seed));
        let batch = EmbeddingBatch::normalized(&inst.raw, inst.labels.clone()).unwrap();
        let sim = similarity_matrix(&batch).unwrap();
        for which in [LossUnderTest::Triplet, LossUnderTest::MultiSimilarity, LossUnderTest::WeakTriplet] {
            prop_assert!(loss_value(which, &sim, &inst.labels, &inst.tuple) >= 0.0);
        }
        // the per-pair term is -S_ij, so it lies in [-1, 0] exactly when the
        // pair is not anti-aligned; in general it stays within [-1, 1]
        for (i, j) in enumerate_pairs(&inst.labels).positive_pairs {
            let single = placerec_core::mining::MinedSet {
                positive_pairs: vec![(i, j)],
                ..Default::default()
            };
            let term = contrastive_loss(&sim, &single, &LossConfig::contrastive()).unwrap().value;
            prop_assert_eq!(term, -sim.get(i, j));
            prop_assert!(term.abs() <= 1.0 + 1e-12);
            if sim.get(i, j) >= 0.0 {
                prop_assert!((-1.0 - 1e-12..=0.0).contains(&term));
            }
        }
        Ok(())
    })
}

pub fn loss_gradients() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        for which in ALL_LOSSES {
            let e = gradcheck::loss_check(which, 1, seed);
            prop_assert!(e < gradcheck::REL_TOL, "{:?} relative error {}", which, e);
        }
        Ok(())
    })
}

fn sim_with(sim: &SimilarityMatrix, i: usize, j: usize, value: f64) -> SimilarityMatrix {
    let n = sim.len();
    let mut v = sim.as_slice().to_vec();
    v[i * n + j] = value;
    SimilarityMatrix::from_values(n, v).unwrap()
}

pub fn ms_monotone() -> Result<(), String> {
    check((2usize..5, 2usize..4, 0.01f64..0.3, any::<u64>()), |(p, k, delta, seed)| {
        let mut r = rng(seed);
        let labels = shuffled_labels(&mut r, p, k);
        let sim = random_similarity(&mut r, p * k, false);
        let pl = PairLabels::from_labels(&labels);
        let cfg = LossConfig::multi_similarity();
        let base = multi_similarity_loss(&sim, &pl, &cfg).unwrap().value;
        let i = r.random_range(0..p * k);
        let j = (0..p * k).filter(|&j| j != i).collect::<Vec<_>>()[r.random_range(0..p * k - 1)];
        let moved = multi_similarity_loss(&sim_with(&sim, i, j, sim.get(i, j) + delta), &pl, &cfg)
            .unwrap()
            .value;
        // strict in exact arithmetic; exp(beta * (S - m)) can vanish next to 1
        if labels[i] == labels[j] {
            prop_assert!(moved <= base, "positive raised: {} -> {}", base, moved);
        } else {
            prop_assert!(moved >= base, "negative raised: {} -> {}", base, moved);
        }
        Ok(())
    })
}

pub fn weak_triplet_best_positive_only() -> Result<(), String> {
    check((3usize..10, any::<u64>()), |(n, seed)| {
        let mut r = rng(seed);
        let sim = random_similarity(&mut r, n, false);
        let mut others: Vec<usize> = (1..n).collect();
        others.shuffle(&mut r);
        let (pos, neg) = others.split_at(r.random_range(1..others.len()));
        let tuple = WeakTuple::new(0, pos.to_vec(), neg.to_vec()).unwrap();
        let cfg = LossConfig::triplet();
        let base = weak_triplet_loss(&sim, &tuple, &cfg).unwrap().value;
        let best = pos.iter().map(|&j| sim.get(0, j)).fold(f64::NEG_INFINITY, f64::max);
        for &j in pos {
            let s = sim.get(0, j);
            if s < best {
                let raised = s + (best - s) * 0.5;
                let v = weak_triplet_loss(&sim_with(&sim, 0, j, raised), &tuple, &cfg).unwrap().value;
                prop_assert_eq!(v, base);
            }
        }
        Ok(())
    })
}

pub fn mined_subset_of_enumeration() -> Result<(), String> {
    check((1usize..9, 1usize..5, 0.0f64..1.0, any::<bool>(), any::<u64>()), |(p, k, eps, q, seed)| {
        let mut r = rng(seed);
        let labels = shuffled_labels(&mut r, p, k);
        let sim = random_similarity(&mut r, p * k, q);
        let all = enumerate_pairs(&labels);
        let pos: BTreeSet<_> = all.positive_pairs.iter().collect();
        let neg: BTreeSet<_> = all.negative_pairs.iter().collect();
        for mined in [hardest_mining(&sim, &labels), ms_mining(&sim, &labels, eps)] {
            prop_assert!(mined.positive_pairs.iter().all(|x| pos.contains(x)));
            prop_assert!(mined.negative_pairs.iter().all(|x| neg.contains(x)));
            for &(i, j, kk) in &mined.triplets {
                prop_assert!(labels[i] == labels[j] && labels[i] != labels[kk] && i != j);
            }
        }
        Ok(())
    })
}

pub fn hardest_monotone_invariance() -> Result<(), String> {
    check((1usize..9, 1usize..5, any::<bool>(), any::<u64>()), |(p, k, q, seed)| {
        let mut r = rng(seed);
        let labels = shuffled_labels(&mut r, p, k);
        let sim = random_similarity(&mut r, p * k, q);
        let warped: Vec<f64> = sim.as_slice().iter().map(|&x| (3.0 * x).exp() + x.powi(3)).collect();
        let warped = SimilarityMatrix::from_values(p * k, warped).unwrap();
        prop_assert_eq!(hardest_mining(&sim, &labels), hardest_mining(&warped, &labels));
        Ok(())
    })
}

pub fn ms_mining_limits() -> Result<(), String> {
    check((2usize..9, 2usize..5, any::<bool>(), any::<u64>()), |(p, k, q, seed)| {
        let mut r = rng(seed);
        let labels = shuffled_labels(&mut r, p, k);
        let sim = random_similarity(&mut r, p * k, q);
        let all = enumerate_pairs(&labels);
        let inf = ms_mining(&sim, &labels, f64::INFINITY);
        prop_assert_eq!(&inf.positive_pairs, &all.positive_pairs);
        prop_assert_eq!(&inf.negative_pairs, &all.negative_pairs);
        let zero = ms_mining(&sim, &labels, 0.0);
        for &(i, j) in &zero.positive_pairs {
            let max_neg = (0..p * k)
                .filter(|&x| labels[x] != labels[i])
                .map(|x| sim.get(i, x))
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(sim.get(i, j) < max_neg);
        }
        Ok(())
    })
}

pub fn mining_determinism() -> Result<(), String> {
    check((1usize..9, 1usize..5, 0.0f64..0.5, any::<u64>()), |(p, k, eps, seed)| {
        let mut r = rng(seed);
        let labels = shuffled_labels(&mut r, p, k);
        let sim = random_similarity(&mut r, p * k, true);
        prop_assert_eq!(hardest_mining(&sim, &labels), hardest_mining(&sim.clone(), &labels));
        prop_assert_eq!(ms_mining(&sim, &labels, eps), ms_mining(&sim.clone(), &labels, eps));
        Ok(())
    })
}

pub fn sgd_formula() -> Result<(), String> {
    let params = (0.0f64..1.0, 0.0f64..0.99, 0.0f64..0.1, 1usize..6, 1usize..5, any::<u64>());
    check(params, |(lr, mu, wd, n, steps, seed)| {
        let mut r = rng(seed);
        let mut w = random_vec(&mut r, n);
        let mut state = OptimizerState::new(lr, mu, wd).unwrap();
        let (mut ew, mut ev) = (w.clone(), vec![0.0; n]);
        for _ in 0..steps {
            let g = random_vec(&mut r, n);
            for i in 0..n {
                ev[i] = mu * ev[i] + (g[i] + wd * ew[i]);
                ew[i] -= lr * ev[i];
            }
            sgd_step(&mut [w.as_mut_slice()], &[g], &mut state).unwrap();
            prop_assert_eq!(&w, &ew);
        }
        Ok(())
    })
}

pub fn schedule_monotone() -> Result<(), String> {
    check((1e-4f64..1.0, 0.01f64..1.0, 1usize..10), |(lr, factor, every)| {
        let cfg = TrainConfig {
            initial_lr: lr,
            lr_decay_factor: factor,
            lr_decay_every: every,
            ..TrainConfig::default()
        };
        for e in 0..60 {
            prop_assert!(lr_at_epoch(&cfg, e + 1) <= lr_at_epoch(&cfg, e));
        }
        Ok(())
    })
}

fn tiny_train_cfg(seed: u64, lr: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        batch: BatchSpec {
            num_places: 2,
            images_per_place: 2,
            rng_seed: seed,
        },
        aggregator: placerec_core::trainer::AggregatorSpec::ConvAp {
            d: 3,
            s1: 2,
            s2: 1,
            bias: true,
        },
        max_epochs: 2,
        rng_seed: seed,
        ..TrainConfig::default()
    };
    cfg.initial_lr = lr;
    cfg
}

fn tiny_db(seed: u64) -> PlacesDB {
    synth_places(4, 3, (3, 3, 4), &SynthConfig::default(), seed).unwrap()
}

pub fn trained_unit_norm() -> Result<(), String> {
    check((any::<u64>(), 0.0f64..0.5), |(seed, lr)| {
        let db = tiny_db(seed);
        let (head, _) = train(&db, &tiny_train_cfg(seed, lr)).unwrap();
        let set = describe_db(&head, &db).unwrap();
        for (_, r) in db.records() {
            let z = head.forward(r.payload.as_ref().unwrap()).unwrap();
            prop_assert!((z.norm() - 1.0).abs() < 1e-6);
        }
        prop_assert!(set.embeddings.is_normalized());
        Ok(())
    })
}

pub fn zero_lr_identity() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        let db = tiny_db(seed);
        let cfg = tiny_train_cfg(seed, 0.0);
        let init = cfg.aggregator.init(4, &mut rng(seed)).unwrap();
        let (head, log) = train(&db, &cfg).unwrap();
        prop_assert!(!log.steps.is_empty());
        prop_assert_eq!(head, init);
        Ok(())
    })
}

pub fn recall_monotone() -> Result<(), String> {
    check((10usize..40, 10usize..60, 2u64..12, any::<u64>()), |(nq, nr, labels, seed)| {
        let mut r = rng(seed);
        let refs = random_descriptor_set(&mut r, nr, 4, |r| r.random_range(0..labels));
        let queries = random_descriptor_set(&mut r, nq, 4, |r| r.random_range(0..labels + 2));
        let rep = recall_at_k(&queries, &refs, &GroundTruthMatcher::Label, &[1, 5, 10]).unwrap();
        if rep.num_evaluated() > 0 {
            let (a, b, c) = (rep.recall(1).unwrap(), rep.recall(5).unwrap(), rep.recall(10).unwrap());
            prop_assert!(a <= b && b <= c);
        }
        Ok(())
    })
}

pub fn topk_matches_sort() -> Result<(), String> {
    check((1usize..80, 1usize..6, any::<u64>()), |(nr, d, seed)| {
        let mut r = rng(seed);
        let refs = random_descriptor_set(&mut r, nr, d, |_| 0);
        let q = random_descriptor_set(&mut r, 1, d, |_| 0);
        let query = q.embeddings.row(0);
        let full = full_ranking(query, &refs);
        let k = r.random_range(1..=nr);
        prop_assert_eq!(retrieve_topk(query, &refs.embeddings, k).unwrap(), full[..k].to_vec());
        Ok(())
    })
}

pub fn geo_radius_zero() -> Result<(), String> {
    let coord = (-80.0f64..80.0, -170.0f64..170.0);
    check((coord, any::<bool>(), -1e-6f64..1e-6), |((lat, lon), same, nudge)| {
        let m = |lat: f64, lon: f64| DescriptorMeta {
            id: String::new(),
            lat: Some(lat),
            lon: Some(lon),
            place_id: None,
        };
        let a = m(lat, lon);
        let b = if same { m(lat, lon) } else { m(lat + nudge, lon) };
        let expect = same || lat + nudge == lat;
        prop_assert_eq!(GroundTruthMatcher::Geo { radius_m: 0.0 }.matches(&a, &b).unwrap(), expect);
        Ok(())
    })
}

pub fn pca_deterministic() -> Result<(), String> {
    check((1usize..6, any::<u64>()), |(out, seed)| {
        let mut r = rng(seed);
        let d = out + r.random_range(0..4);
        let n = d + 1 + r.random_range(0..20);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, d)).collect();
        let batch = EmbeddingBatch::from_raw(&rows, vec![0; n]).unwrap();
        let fit = || pca_whiten_fit(&batch, out, 1e-9).map_err(|e| e.to_string());
        prop_assert_eq!(fit(), fit());
        Ok(())
    })
}

pub fn noiseless_perfect_recall() -> Result<(), String> {
    check((2usize..8, 2usize..4, 4usize..9, any::<u64>()), |(places, images, c, seed)| {
        let db = synth_places(places, images, (3, 3, c), &SynthConfig::noiseless(), seed).unwrap();
        let mut r = rng(seed);
        let heads = [
            Aggregator::Avg,
            Aggregator::Gem(GemParams::new(3.0).unwrap()),
            Aggregator::ConvAp(ConvAPParams::init(c, 4, 2, 2, true, &mut r).unwrap()),
        ];
        for head in heads {
            let (refs, queries) = db.split_images(1);
            let rep = recall_at_k(
                &describe_db(&head, &queries).unwrap(),
                &describe_db(&head, &refs).unwrap(),
                &GroundTruthMatcher::Label,
                &[1],
            )
            .unwrap();
            prop_assert_eq!(rep.recall(1), Some(1.0), "{}", head.label());
        }
        Ok(())
    })
}
