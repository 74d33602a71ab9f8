//! Property tests for the aggregation math, tree operations, and metrics.

use std::collections::BTreeMap;

use proptest::prelude::*;

use beamaggr::beamcore::{
    beam_combine, canonicalize_answer, marginal_aggregate, merge_votes, normalize_truncate, vote,
    Candidate, CandidateSet, WeightedDistribution,
};
use beamaggr::evalkit::token_f1;
use beamaggr::qtree::{mask_fill, parse_decomposition_map, post_order, DecompositionMap};
use beamaggr::strategies::extract_answer;

fn answer_strategy() -> impl Strategy<Value = String> {
    "[a-z]{1,6}( [a-z]{1,4})?"
}

fn table_strategy() -> impl Strategy<Value = Vec<(String, u32)>> {
    proptest::collection::btree_map(answer_strategy(), 1u32..=40, 1..=12)
        .prop_map(|m| m.into_iter().collect())
}

fn candidate_set(votes: &[(String, u32)], tau: f64, k: usize) -> CandidateSet {
    let samples: Vec<String> = votes
        .iter()
        .flat_map(|(a, f)| std::iter::repeat_n(a.clone(), *f as usize))
        .collect();
    normalize_truncate(&vote(&samples), tau, k).unwrap()
}

proptest! {
    #[test]
    fn vote_is_permutation_invariant(mut samples in proptest::collection::vec(answer_strategy(), 0..30)) {
        let forward = vote(&samples);
        samples.reverse();
        let backward = vote(&samples);
        let counts_a: Vec<(&str, u32)> = forward.counts().collect();
        let counts_b: Vec<(&str, u32)> = backward.counts().collect();
        prop_assert_eq!(counts_a, counts_b);
    }

    #[test]
    fn merge_votes_is_permutation_invariant(tables in proptest::collection::vec(
        proptest::collection::vec(answer_strategy(), 0..10), 1..5)) {
        let tables: Vec<_> = tables.iter().map(|samples| vote(samples)).collect();
        let mut reversed = tables.clone();
        reversed.reverse();
        prop_assert_eq!(merge_votes(&tables), merge_votes(&reversed));
    }

    #[test]
    fn removing_a_table_never_increases_mass(tables in proptest::collection::vec(
        proptest::collection::vec(answer_strategy(), 0..10), 2..5)) {
        let tables: Vec<_> = tables.iter().map(|samples| vote(samples)).collect();
        let all = merge_votes(&tables);
        let fewer = merge_votes(&tables[1..]);
        prop_assert!(fewer.total_votes() <= all.total_votes());
        for (answer, count) in fewer.counts() {
            prop_assert!(count <= all.count(answer));
        }
    }

    #[test]
    fn normalization_sums_to_one(votes in table_strategy(),
                                 tau in prop::sample::select(vec![0.5, 1.0, 3.0, 10.0]),
                                 k in 1usize..=4) {
        let set = candidate_set(&votes, tau, k);
        let sum: f64 = set.items().iter().map(|c| c.prob).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(set.len() <= k);
    }

    #[test]
    fn probability_ranking_equals_frequency_ranking(votes in table_strategy(), k in 1usize..=4) {
        let set = candidate_set(&votes, 3.0, k);
        let mut by_count: Vec<(String, u32)> = votes
            .iter()
            .map(|(a, f)| (canonicalize_answer(a), *f))
            .collect::<BTreeMap<_, _>>()
            .into_iter()
            .collect();
        by_count.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (candidate, (answer, _)) in set.items().iter().zip(&by_count) {
            prop_assert_eq!(&candidate.answer, answer);
        }
    }

    #[test]
    fn shifting_frequencies_preserves_ranking(votes in table_strategy(), shift in 1u32..=10) {
        let base = candidate_set(&votes, 3.0, usize::MAX);
        let shifted_votes: Vec<(String, u32)> =
            votes.iter().map(|(a, f)| (a.clone(), f + shift)).collect();
        let shifted = candidate_set(&shifted_votes, 3.0, usize::MAX);
        let order_a: Vec<&str> = base.items().iter().map(|c| c.answer.as_str()).collect();
        let order_b: Vec<&str> = shifted.items().iter().map(|c| c.answer.as_str()).collect();
        prop_assert_eq!(order_a, order_b);
    }

    #[test]
    fn full_beam_combination_mass_is_one(child_votes in proptest::collection::vec(table_strategy(), 1..=3)) {
        let sets: Vec<CandidateSet> =
            child_votes.iter().map(|votes| candidate_set(votes, 3.0, usize::MAX)).collect();
        let expected: usize = sets.iter().map(|s| s.len()).product();
        let combos = beam_combine(&sets, usize::MAX).unwrap();
        prop_assert_eq!(combos.len(), expected);
        let mass: f64 = combos.iter().map(|c| c.joint_prob).sum();
        prop_assert!((mass - 1.0).abs() <= 1e-9);
        for combo in &combos {
            let product: f64 = combo
                .canonical
                .iter()
                .zip(&sets)
                .map(|(answer, set)| {
                    set.items().iter().find(|c| &c.answer == answer).unwrap().prob
                })
                .product();
            prop_assert!((combo.joint_prob - product).abs() <= 1e-12 * product.max(1.0));
        }
    }

    #[test]
    fn marginal_is_permutation_invariant(branch_votes in proptest::collection::vec(table_strategy(), 1..=4),
                                         k in 1usize..=4) {
        let n = branch_votes.len() as f64;
        let branches: Vec<WeightedDistribution> = branch_votes
            .iter()
            .map(|votes| {
                WeightedDistribution::from_candidates(1.0 / n, &candidate_set(votes, 3.0, 3))
            })
            .collect();
        let mut reversed = branches.clone();
        reversed.reverse();
        let a = marginal_aggregate(&branches, k).unwrap();
        let b = marginal_aggregate(&reversed, k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn marginal_matches_brute_force_without_truncation(branch_votes in proptest::collection::vec(table_strategy(), 1..=4)) {
        let n = branch_votes.len() as f64;
        let sets: Vec<CandidateSet> =
            branch_votes.iter().map(|votes| candidate_set(votes, 3.0, usize::MAX)).collect();
        let branches: Vec<WeightedDistribution> =
            sets.iter().map(|set| WeightedDistribution::from_candidates(1.0 / n, set)).collect();
        let aggregated = marginal_aggregate(&branches, usize::MAX).unwrap();

        let mut expected: BTreeMap<String, f64> = BTreeMap::new();
        for set in &sets {
            for candidate in set.items() {
                *expected.entry(candidate.answer.clone()).or_insert(0.0) +=
                    candidate.prob / n;
            }
        }
        prop_assert_eq!(aggregated.len(), expected.len());
        for candidate in aggregated.items() {
            let want = expected[&candidate.answer];
            prop_assert!((candidate.prob - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn mask_fill_is_idempotent_without_hash_answers(
        answers in proptest::collection::vec("[a-zA-Z0-9 ]{1,10}", 1..=9)) {
        let template = (1..=answers.len())
            .map(|i| format!("part #{i}"))
            .collect::<Vec<_>>()
            .join(" and ");
        let once = mask_fill(&template, &answers).unwrap();
        let twice = mask_fill(&once, &answers).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn extract_answer_never_keeps_markers(completion in ".{0,120}") {
        if let Some(answer) = extract_answer(&completion) {
            prop_assert!(!answer.contains("**"));
            prop_assert!(!answer.is_empty());
        }
    }

    #[test]
    fn f1_symmetric_and_bounded(a in "[a-zA-Z0-9 ,.]{0,30}", b in "[a-zA-Z0-9 ,.]{0,30}") {
        let ab = token_f1(&a, &b);
        let ba = token_f1(&b, &a);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn f1_is_one_iff_multisets_match(tokens in proptest::collection::vec("[a-z]{1,5}", 1..6)) {
        let forward = tokens.join(" ");
        let mut shuffled = tokens.clone();
        shuffled.reverse();
        let backward = shuffled.join(" ");
        prop_assert_eq!(token_f1(&forward, &backward), 1.0);
        let extended = format!("{forward} extraword");
        prop_assert!(token_f1(&forward, &extended) < 1.0);
    }
}

/// Random sibling-chain mappings: each entry's later sub-questions may
/// reference earlier ones.
fn mapping_strategy() -> impl Strategy<Value = (String, DecompositionMap)> {
    (2usize..=4).prop_flat_map(|n_subs| {
        proptest::collection::vec(proptest::bool::ANY, n_subs).prop_map(move |use_ref| {
            let subs: Vec<String> = (0..n_subs)
                .map(|i| {
                    if i > 0 && use_ref[i] {
                        format!("sub {i} about #{}?", i)
                    } else {
                        format!("sub {i}?")
                    }
                })
                .collect();
            let root = "the root question?".to_string();
            let mut entries = BTreeMap::new();
            entries.insert(root.clone(), subs);
            (root, DecompositionMap { entries })
        })
    })
}

proptest! {
    #[test]
    fn post_order_visits_children_first((root, mapping) in mapping_strategy()) {
        let tree = parse_decomposition_map(&root, &mapping).unwrap();
        let order = post_order(&tree);
        prop_assert_eq!(order.len(), tree.len());
        prop_assert_eq!(order.last().unwrap(), &tree.root);
        let position: BTreeMap<&String, usize> =
            order.iter().enumerate().map(|(i, id)| (id, i)).collect();
        for (id, node) in &tree.nodes {
            for child in &node.children {
                prop_assert!(position[child] < position[id], "child after parent");
            }
        }
    }

    #[test]
    fn parse_accepts_own_serialization((root, mapping) in mapping_strategy()) {
        let tree = parse_decomposition_map(&root, &mapping).unwrap();
        let reparsed = parse_decomposition_map(&root, &tree.to_mapping()).unwrap();
        prop_assert_eq!(&tree, &reparsed);
        let violations = beamaggr::qtree::validate(&tree);
        prop_assert!(violations.is_empty());
    }
}

#[test]
fn candidate_set_rejects_broken_invariants() {
    let candidate = |answer: &str, prob: f64| Candidate {
        answer: answer.into(),
        surface: answer.into(),
        prob,
    };
    assert!(CandidateSet::new(vec![candidate("a", 0.5)], 2).is_err()); // sum != 1
    assert!(CandidateSet::new(vec![candidate("a", 0.4), candidate("b", 0.6)], 2).is_err()); // order
    assert!(CandidateSet::new(vec![candidate("a", 1.0)], 0).is_err()); // capacity
    assert!(CandidateSet::new(
        vec![
            candidate("a", 0.5),
            candidate("b", 0.3),
            candidate("c", 0.2)
        ],
        2
    )
    .is_err()); // over capacity
    assert!(CandidateSet::new(vec![candidate("a", 0.6), candidate("b", 0.4)], 2).is_ok());
}
