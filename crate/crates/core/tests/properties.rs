use std::collections::HashSet;

use proptest::prelude::*;
use vismem::analysis::{calibrate, hit_rate, CalibrateOptions};
use vismem::classify::{accuracy_by_k, EvalOptions};
use vismem::fixture::{generate, FixtureSpec};
use vismem::index::AnnIndex;
use vismem::prune::{estimate_reliability, hard_prune, reliability_factor, PruneConfig};
use vismem::taxonomy::{hierarchical_predict, TaxonomyTree, ROOT};
use vismem::{classify, evaluate, exact_search, Pack, QuerySet, Retriever, Scheme, VisualMemory, VoteConfig};

fn small(seed: u64, classes: usize, per_class: usize, noise: f64) -> (Pack, VisualMemory, QuerySet) {
    let fx = generate(&FixtureSpec {
        classes,
        per_class,
        dims: 12,
        spread: 0.3,
        noise,
        queries_per_class: 4,
        seed,
        ..FixtureSpec::default()
    })
    .unwrap();
    let memory = VisualMemory::build(&fx.memory).unwrap();
    let queries = QuerySet::from_pack(fx.queries.as_ref().unwrap()).unwrap();
    (fx.memory, memory, queries)
}

fn neighbor_ids(memory: &VisualMemory, queries: &QuerySet, k: usize) -> Vec<Vec<(u64, u64)>> {
    Retriever::Exact(memory)
        .search(queries, k)
        .unwrap()
        .iter()
        .map(|s| s.items.iter().map(|n| (n.id, n.distance.value().to_bits())).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn insert_after_remove_restores_results(seed in any::<u64>(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..40)) {
        let (_, memory, queries) = small(seed, 4, 30, 0.1);
        let ids: Vec<u64> = picks.iter().map(|i| memory.ids()[i.index(memory.len())]).collect::<HashSet<_>>().into_iter().collect();
        let entries: Vec<_> = ids.iter().map(|&id| memory.entry(id).unwrap()).collect();
        let mut m = memory.clone();
        m.remove(&ids).unwrap();
        m.insert(entries).unwrap();
        prop_assert_eq!(neighbor_ids(&m, &queries, 15), neighbor_ids(&memory, &queries, 15));
    }

    #[test]
    fn subsample_is_idempotent(seed in any::<u64>(), per_class in 1usize..40, s in any::<u64>()) {
        let (_, memory, _) = small(seed, 3, 25, 0.0);
        let once = memory.subsample(per_class, s).unwrap();
        let twice = once.subsample(per_class, s).unwrap();
        prop_assert_eq!(once.ids(), twice.ids());
    }

    #[test]
    fn removal_matches_rebuild(seed in any::<u64>(), stride in 2usize..7) {
        let (pack, memory, queries) = small(seed, 4, 30, 0.1);
        let removed: Vec<u64> = memory.ids().iter().copied().step_by(stride).collect();
        let mut after = memory.clone();
        after.remove(&removed).unwrap();

        let gone: HashSet<u64> = removed.iter().copied().collect();
        let mut rebuilt = pack.clone();
        rebuilt.vectors.clear();
        rebuilt.meta.clear();
        for (i, m) in pack.meta.iter().enumerate() {
            if !gone.contains(&m.id) {
                rebuilt.vectors.extend_from_slice(pack.row(i));
                rebuilt.meta.push(m.clone());
            }
        }
        rebuilt.manifest.count = rebuilt.meta.len() as u64;
        let rebuilt = VisualMemory::build(&rebuilt).unwrap();

        let a = Retriever::Exact(&after).search(&queries, 30).unwrap();
        let b = Retriever::Exact(&rebuilt).search(&queries, 30).unwrap();
        for scheme in Scheme::ALL {
            for k in [1, 5, 30] {
                for (x, y) in a.iter().zip(&b) {
                    let px = classify(x, &VoteConfig::new(scheme, k), None).unwrap();
                    let py = classify(y, &VoteConfig::new(scheme, k), None).unwrap();
                    prop_assert_eq!(after.labels().name(px.label), rebuilt.labels().name(py.label));
                }
            }
        }
    }

    #[test]
    fn search_is_ordered_and_deterministic(seed in any::<u64>(), k in 1usize..80) {
        let (_, memory, queries) = small(seed, 5, 20, 0.0);
        let first = Retriever::Exact(&memory).search(&queries, k).unwrap();
        for set in &first {
            prop_assert!(set.is_well_ordered());
            prop_assert_eq!(set.len(), k.min(memory.len()));
        }
        prop_assert_eq!(first, Retriever::Exact(&memory).search(&queries, k).unwrap());
    }

    #[test]
    fn ann_results_come_from_probed_partitions(seed in any::<u64>(), probes in 1usize..8) {
        let (_, memory, queries) = small(seed, 5, 40, 0.0);
        let index = AnnIndex::build(&memory, None, seed).unwrap();
        for q in 0..queries.len() {
            let allowed: HashSet<u64> = index
                .probed_partitions(queries.vector(q), probes)
                .into_iter()
                .flat_map(|p| index.members(p).to_vec())
                .collect();
            let v = vismem::EmbeddingVector::from_normalized(queries.vector(q).to_vec()).unwrap();
            let got = index.search(&memory, &v, 10, probes).unwrap();
            prop_assert!(got.ids().all(|id| allowed.contains(&id)));
            prop_assert!(got.is_well_ordered());
        }
    }

    #[test]
    fn evaluate_matches_independent_classify(seed in any::<u64>(), scheme in prop::sample::select(Scheme::ALL.to_vec())) {
        let (_, memory, queries) = small(seed, 4, 25, 0.15);
        let config = VoteConfig::new(scheme, 40);
        let curve = evaluate(Retriever::Exact(&memory), &queries, &config, EvalOptions::default()).unwrap();
        let truth = queries.label_ids(&memory);
        for k in [1, 2, 13, 40] {
            let correct = (0..queries.len())
                .filter(|&q| {
                    let v = vismem::EmbeddingVector::from_normalized(queries.vector(q).to_vec()).unwrap();
                    let set = exact_search(&memory, &v, k).unwrap();
                    Some(classify(&set, &config.with_k(k), Some(&memory)).unwrap().label) == truth[q]
                })
                .count();
            prop_assert_eq!(curve.at(k), correct as f64 / queries.len() as f64);
        }
    }

    #[test]
    fn gamma_bounded_and_non_increasing(v in 1u32..100_000, c in 0.01f64..10.0, d_frac in 0.01f64..1.0) {
        let d = d_frac * (c + 1.0);
        let g = reliability_factor(v, c, d);
        prop_assert!(g > 0.0 && g <= 1.0);
        prop_assert!(reliability_factor(v + 1, c, d) <= g);
        prop_assert_eq!(reliability_factor(0, c, d), 1.0);
    }

    #[test]
    fn estimation_is_deterministic_and_huge_threshold_is_identity(seed in any::<u64>()) {
        let (_, memory, _) = small(seed, 4, 20, 0.1);
        let config = PruneConfig { k_retrieve: 15, ..PruneConfig::default() };
        let a = estimate_reliability(&memory, &config).unwrap();
        let b = estimate_reliability(&memory, &config).unwrap();
        prop_assert_eq!(&a, &b);
        let mut m = memory.clone();
        let removed = hard_prune(&mut m, &a, u32::MAX).unwrap();
        prop_assert!(removed.is_empty());
        prop_assert_eq!(m.ids(), memory.ids());
    }

    #[test]
    fn hit_rate_bounds_every_scheme(seed in any::<u64>()) {
        let (_, memory, queries) = small(seed, 4, 30, 0.2);
        let retriever = Retriever::Exact(&memory);
        let hits = hit_rate(retriever, &queries, 50, false).unwrap();
        prop_assert!(hits.windows(2).all(|w| w[1] >= w[0]));
        let sets = retriever.search(&queries, 50).unwrap();
        let truth = queries.label_ids(&memory);
        for scheme in Scheme::ALL {
            let acc = accuracy_by_k(&sets, &truth, &VoteConfig::new(scheme, 50), 50, None).unwrap();
            prop_assert!(acc.iter().zip(&hits).all(|(a, h)| a <= h));
        }
    }

    #[test]
    fn calibration_bins_partition_queries(seed in any::<u64>(), width in 1u32..=100) {
        let (_, memory, queries) = small(seed, 4, 30, 0.2);
        let table = calibrate(Retriever::Exact(&memory), &queries, CalibrateOptions { bin_width: width, ..CalibrateOptions::default() }).unwrap();
        prop_assert_eq!(table.bins.iter().map(|b| b.count).sum::<usize>(), queries.len());
        prop_assert_eq!(table.bins[0].lo, 0);
        prop_assert_eq!(table.bins.last().unwrap().hi, 100);
        prop_assert!(table.bins.windows(2).all(|w| w[1].lo == w[0].hi + 1));
    }

    #[test]
    fn hierarchical_output_is_a_root_to_leaf_path(seed in any::<u64>()) {
        let fx = generate(&FixtureSpec {
            classes: 9,
            per_class: 6,
            dims: 16,
            spread: 0.1,
            taxonomy: Some((2, 3)),
            queries_per_class: 1,
            seed,
            ..FixtureSpec::default()
        })
        .unwrap();
        let memory = VisualMemory::build(&fx.memory).unwrap();
        let queries = QuerySet::from_pack(fx.queries.as_ref().unwrap()).unwrap();
        let tree = TaxonomyTree::parse(fx.taxonomy.as_deref().unwrap()).unwrap();
        for q in 0..queries.len() {
            let v = vismem::EmbeddingVector::from_normalized(queries.vector(q).to_vec()).unwrap();
            let path = hierarchical_predict(&v, &memory, &tree, 3).unwrap();
            prop_assert_eq!(path[0], ROOT);
            prop_assert!(tree.is_leaf(*path.last().unwrap()));
            prop_assert!(path.windows(2).all(|w| tree.parent(w[1]) == Some(w[0])));
            prop_assert_eq!(&path, &hierarchical_predict(&v, &memory, &tree, 3).unwrap());
        }
    }
}
