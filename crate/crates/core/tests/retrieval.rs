mod common;

use std::sync::atomic::{AtomicU64, Ordering};

use bgg_core::data::{build_dataset, LoadedLocation, Split};
use bgg_core::model::Describer;
use bgg_core::retrieval::{
    average_precision, evaluate, evaluate_locations, query_topk, recall_at_k, reports_csv, run_queries, Direction,
    DirectionSel, RECALL_KS,
};
use bgg_core::{BackboneConfig, BggError, BggModel, DataConfig, Descriptor, ModelConfig, RetrievalIndex, Tensor};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn random_descs(n: usize, dim: usize, seed: u64) -> Vec<Descriptor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| unit(Tensor::randn([dim], 1.0, &mut r).into_data()))
        .collect()
}

#[test]
fn topk_matches_exhaustive_oracle_with_ties() {
    for seed in 0..20 {
        let mut rows = random_descs(6, 8, seed);
        // Duplicate rows force exact ties.
        rows[4] = rows[1].clone();
        rows[5] = rows[1].clone();
        let ids = vec![40, 7, 13, 2, 5, 30];
        let index = RetrievalIndex::new(&rows, ids.clone(), ids.clone()).unwrap();
        for q in random_descs(4, 8, 100 + seed).iter().chain([&rows[1]]) {
            let got = query_topk(&index, q, 3).unwrap();
            let want = selection_rank(&rows, &ids, q);
            assert_eq!(got, want[..3].to_vec());
        }
        let tied = query_topk(&index, &rows[1], 3).unwrap();
        assert_eq!(tied.iter().map(|t| t.0).collect::<Vec<_>>(), vec![5, 7, 30]);
    }
}

#[test]
fn self_query_ranks_first_with_unit_similarity() {
    let rows = random_descs(10, 16, 1);
    let ids: Vec<u32> = (0..10).collect();
    let index = RetrievalIndex::new(&rows, ids.clone(), ids).unwrap();
    for (i, r) in rows.iter().enumerate() {
        let top = query_topk(&index, r, 1).unwrap();
        assert_eq!(top[0].0, i as u32);
        assert!((top[0].1 - 1.0).abs() < 1e-12);
    }
}

#[test]
fn full_k_is_a_permutation_and_bounds_are_checked() {
    let rows = random_descs(7, 4, 2);
    let ids: Vec<u32> = vec![9, 3, 1, 8, 0, 4, 6];
    let index = RetrievalIndex::new(&rows, ids.clone(), ids.clone()).unwrap();
    let mut all: Vec<u32> = query_topk(&index, &rows[0], 7)
        .unwrap()
        .into_iter()
        .map(|p| p.0)
        .collect();
    all.sort_unstable();
    let mut sorted = ids;
    sorted.sort_unstable();
    assert_eq!(all, sorted);
    assert!(matches!(query_topk(&index, &rows[0], 8), Err(BggError::Usage(_))));
    let empty = RetrievalIndex::new(&[], vec![], vec![]).unwrap();
    assert!(matches!(query_topk(&empty, &rows[0], 0), Err(BggError::Usage(_))));
}

#[test]
fn index_rejects_duplicate_ids_and_unnormalized_rows() {
    let rows = random_descs(2, 4, 3);
    assert!(matches!(
        RetrievalIndex::new(&rows, vec![1, 1], vec![0, 0]),
        Err(BggError::Usage(_))
    ));
    let raw = Descriptor {
        vec: Tensor::full([4], 1.0),
        l2_normalized: false,
    };
    assert!(RetrievalIndex::new(&[raw], vec![0], vec![0]).is_err());
}

#[test]
fn recall_hand_counts() {
    assert_eq!(recall_at_k(&[vec![1], vec![1]], 1), 1.0);
    assert_eq!(recall_at_k(&[vec![1], vec![3]], 1), 0.5);
    assert_eq!(recall_at_k(&[vec![1], vec![3]], 3), 1.0);
    assert_eq!(recall_at_k(&[vec![4, 2]], 2), 1.0);
}

#[test]
fn average_precision_hand_values() {
    let ap = average_precision(&[true, false, true]).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((ap - 0.833_333).abs() < 1e-6);
    assert_eq!(average_precision(&[true, true, false, false]).unwrap(), 1.0);
    assert!(matches!(average_precision(&[false, false]), Err(BggError::Usage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ap_matches_prefix_sum_oracle(flags in proptest::collection::vec(any::<bool>(), 1..40)) {
        prop_assume!(flags.iter().any(|&f| f));
        let ap = average_precision(&flags).unwrap();
        prop_assert!((ap - prefix_sum_ap(&flags)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap));
        let first_irrelevant = flags.iter().position(|&f| !f).unwrap_or(flags.len());
        let separated = flags[first_irrelevant..].iter().all(|&f| !f);
        prop_assert_eq!(ap == 1.0, separated);
    }

    #[test]
    fn recall_is_monotone_and_complete(
        ranks in proptest::collection::vec(proptest::collection::vec(1usize..30, 1..4), 1..20)
    ) {
        let mut prev = 0.0;
        for k in 1..=30 {
            let r = recall_at_k(&ranks, k);
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn topk_agrees_with_oracle(seed in 0u64..5000, k in 1usize..9) {
        let rows = random_descs(8, 5, seed);
        let ids: Vec<u32> = (0..8).map(|i| (i * 37 + seed as u32) % 101).collect();
        prop_assume!({ let mut s = ids.clone(); s.sort_unstable(); s.dedup(); s.len() == 8 });
        let index = RetrievalIndex::new(&rows, ids.clone(), ids.clone()).unwrap();
        let q = &random_descs(1, 5, seed + 1)[0];
        prop_assert_eq!(query_topk(&index, q, k).unwrap(), selection_rank(&rows, &ids, q)[..k].to_vec());
    }
}

/// Oracle double: one-hot of the location id, ignoring the pixels.
struct Cheat {
    calls: AtomicU64,
}

impl Describer for Cheat {
    fn describe_labeled(&self, _image: &Tensor, location: u32) -> bgg_core::Result<Descriptor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut v = vec![0.0; 128];
        v[location as usize % 128] = 1.0;
        Ok(unit(v))
    }
}

/// Descriptors drawn from a seed and the image bytes, with no access to
/// the location.
struct RandomDescriber {
    seed: u64,
}

impl Describer for RandomDescriber {
    fn describe_labeled(&self, image: &Tensor, _location: u32) -> bgg_core::Result<Descriptor> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for v in image.data() {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        let mut r = ChaCha8Rng::from_seed(digest.into());
        Ok(unit((0..32).map(|_| r.gen::<f64>() - 0.5).collect()))
    }
}

fn toy_locations(n: u32, k: usize) -> Vec<LoadedLocation> {
    let mut r = rng(77);
    (0..n)
        .map(|id| LoadedLocation {
            location_id: id,
            reference: Tensor::uniform([3, 8, 8], 1.0, &mut r),
            queries: (0..k).map(|_| Tensor::uniform([3, 8, 8], 1.0, &mut r)).collect(),
        })
        .collect()
}

#[test]
fn cheating_describer_scores_perfectly_in_both_directions() {
    let locs = toy_locations(16, 4);
    let cheat = Cheat {
        calls: AtomicU64::new(0),
    };
    let reports = evaluate_locations(&cheat, &locs, DirectionSel::Both).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].direction, Direction::QueryToReference);
    assert_eq!(reports[0].queries(), 64);
    assert_eq!(reports[1].queries(), 16);
    assert!(reports[1].ranks.iter().all(|r| r == &vec![1, 2, 3, 4]));
    for r in &reports {
        for k in RECALL_KS {
            assert_eq!(r.recall(k), 1.0);
        }
        assert_eq!(r.mean_ap, 1.0);
    }
    assert_eq!(cheat.calls.load(Ordering::Relaxed), 16 * 5);
    let csv = reports_csv(&reports);
    assert!(csv.starts_with("direction,k,value\n"));
    assert!(csv.contains("query_to_reference,1,1.000000"));
    assert!(csv.contains("reference_to_query,AP,1.000000"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn both_directions_share_one_descriptor_pass() {
    let dir = tempfile::tempdir().unwrap();
    let data = DataConfig {
        locations: 8,
        queries: 2,
        ..DataConfig::default()
    };
    let manifest = build_dataset(dir.path(), &data).unwrap();
    let model = BggModel::new(&ModelConfig::default(), 1).unwrap();
    let reports = evaluate(&model, &manifest, DirectionSel::Both).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(model.describe_calls(), 2 * (1 + 2));
    model.reset_describe_calls();
    evaluate(&model, &manifest, DirectionSel::ReferenceToQuery).unwrap();
    assert_eq!(model.describe_calls(), 2 * 3);
}

#[test]
fn direction_names_parse() {
    assert_eq!(DirectionSel::parse("q2r").unwrap(), DirectionSel::QueryToReference);
    assert_eq!(
        DirectionSel::parse("reference_to_query").unwrap(),
        DirectionSel::ReferenceToQuery
    );
    assert_eq!(DirectionSel::parse("both").unwrap().directions().len(), 2);
    assert!(matches!(DirectionSel::parse("sideways"), Err(BggError::Usage(_))));
    assert!(evaluate_locations(
        &Cheat {
            calls: AtomicU64::new(0)
        },
        &[],
        DirectionSel::Both
    )
    .is_err());
}

#[test]
fn run_queries_counts_multiple_relevant_items() {
    // Gallery: labels [0, 0, 1]; query equal to row 2 ranks it first.
    let rows = random_descs(3, 6, 9);
    let index = RetrievalIndex::new(&rows, vec![0, 1, 2], vec![0, 0, 1]).unwrap();
    let rep = run_queries(&index, &[rows[2].clone()], &[0], Direction::ReferenceToQuery).unwrap();
    assert_eq!(rep.ranks[0], vec![2, 3]);
    assert!((rep.mean_ap - (1.0 / 2.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(rep.recall(1), 0.0);
    assert_eq!(rep.recall(5), 1.0);
}

fn test_split() -> (tempfile::TempDir, Vec<LoadedLocation>) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(dir.path(), &DataConfig::default()).unwrap();
    let test = manifest.load_split(Split::Test).unwrap();
    assert_eq!(test.len(), 16);
    (dir, test)
}

#[test]
fn content_blind_descriptors_sit_at_chance() {
    let (_dir, test) = test_split();
    let seeds = 5;
    let mut r1 = 0.0;
    for seed in 0..seeds {
        let reps = evaluate_locations(&RandomDescriber { seed }, &test, DirectionSel::QueryToReference).unwrap();
        r1 += reps[0].recall(1);
    }
    let mean = r1 / seeds as f64;
    let p = 1.0 / 16.0;
    let sigma = (p * (1.0 - p) / (seeds as f64 * 128.0)).sqrt();
    assert!(
        (mean - p).abs() <= 3.0 * sigma,
        "mean R@1 {mean} vs chance {p} (3σ = {})",
        3.0 * sigma
    );
}

#[test]
fn random_weight_models_are_not_below_chance() {
    let (_dir, test) = test_split();
    let seeds = 5u64;
    let mut r1 = 0.0;
    for seed in 0..seeds {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                seed: 100 + seed,
                ..BackboneConfig::default()
            },
            ..ModelConfig::default()
        };
        let mut model = BggModel::new(&cfg, seed).unwrap();
        let mut r = rng(seed);
        for a in model.trainable.adapters.iter_mut().flatten() {
            a.w_up = Tensor::randn(a.w_up.shape().to_vec(), 0.25, &mut r).trainable();
        }
        let reps = evaluate_locations(&model, &test, DirectionSel::QueryToReference).unwrap();
        r1 += reps[0].recall(1);
    }
    let mean = r1 / seeds as f64;
    let p = 1.0 / 16.0;
    let sigma = (p * (1.0 - p) / (seeds as f64 * 128.0)).sqrt();
    println!("random-weight mean R@1 = {mean:.4}, chance = {p:.4}, sigma = {sigma:.4}");
    assert!(mean >= p - 3.0 * sigma);
}
