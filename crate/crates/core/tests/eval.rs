mod common;

use std::collections::BTreeSet;

use pathmoe_core::eval::{evaluate, rank_filtered, MetricsReport};
use pathmoe_core::model::init_params;
use pathmoe_core::{CoreError, EntityId, KnowledgeGraph, ModelConfig, QuerySplit, Triple};
use proptest::prelude::*;

#[test]
fn rank_examples() {
    let none = BTreeSet::new();
    assert_eq!(rank_filtered(&[0.1, 0.9, 0.3], 1, &none), 1.0);
    assert_eq!(rank_filtered(&[0.5, 0.5, 0.1], 0, &none), 1.5);
    let known: BTreeSet<EntityId> = [0].into();
    assert_eq!(rank_filtered(&[0.9, 0.5, 0.1], 1, &known), 1.0);
    assert_eq!(rank_filtered(&[0.9, 0.5, 0.1], 2, &none), 3.0);
}

#[test]
fn metric_examples() {
    let m = MetricsReport::from_ranks(&[1.0, 2.0]).unwrap();
    assert_eq!((m.mrr, m.hit1, m.hit3, m.hit10), (0.75, 0.5, 1.0, 1.0));
    let m = MetricsReport::from_ranks(&[4.0, 11.0, 1.0, 1.5]).unwrap();
    assert_eq!(m.hit3, 0.5);
    assert_eq!(m.hit10, 0.75);
    assert!(matches!(
        MetricsReport::from_ranks(&[]),
        Err(CoreError::EmptySplit)
    ));
}

/// Position of the answer in a stable descending sort of the unfiltered
/// competitors, averaged over the tied block.
fn sorted_position_rank(psi: &[f64], answer: usize, filter: &BTreeSet<EntityId>) -> f64 {
    let mut pool: Vec<usize> = (0..psi.len())
        .filter(|&e| e == answer || !filter.contains(&(e as EntityId)))
        .collect();
    pool.sort_by(|&a, &b| psi[b].partial_cmp(&psi[a]).unwrap());
    let first = pool.iter().position(|&e| psi[e] == psi[answer]).unwrap();
    let last = pool.iter().rposition(|&e| psi[e] == psi[answer]).unwrap();
    // Positions are 1-based; the answer's own slot does not count as a tie.
    let tied_others = (last - first) as f64;
    1.0 + first as f64 + 0.5 * tied_others
}

fn scores_and_filter() -> impl Strategy<Value = (Vec<f64>, usize, BTreeSet<EntityId>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((-5i32..6).prop_map(f64::from), n),
            0..n,
            prop::collection::btree_set(0..n as EntityId, 0..n),
        )
    })
}

fn toy_split() -> (KnowledgeGraph, QuerySplit) {
    let train: Vec<Triple> = (0..9)
        .map(|e| Triple::new(e, e % 2, e + 1))
        .chain([Triple::new(0, 1, 5), Triple::new(3, 0, 7)])
        .collect();
    let test = vec![Triple::new(2, 0, 4), Triple::new(6, 1, 9)];
    (
        KnowledgeGraph::augmented(10, 2, train.clone()).unwrap(),
        QuerySplit::from_triples(2, &train, &[], &test),
    )
}

#[test]
fn model_ranks_match_the_sorting_oracle() {
    let (graph, split) = toy_split();
    let config = ModelConfig {
        dim: 4,
        attn_dim: 3,
        layers: 3,
        min_length: 1,
        k1: 2,
        ..ModelConfig::default()
    };
    for seed in 0..5 {
        let params = init_params(&config, 2, seed).unwrap();
        let (report, ranked) =
            evaluate(&params, &config, &graph, &split, &split.test, false).unwrap();
        for r in &ranked {
            let (psi, _) =
                pathmoe_core::forward::score_query(&params, &config, &graph, &r.query, false)
                    .unwrap();
            let want = sorted_position_rank(
                &psi,
                r.query.answer as usize,
                split.filter_mask(r.query.entity, r.query.relation),
            );
            assert_eq!(r.rank, want);
        }
        let mrr = ranked.iter().map(|r| 1.0 / r.rank).sum::<f64>() / ranked.len() as f64;
        assert!((report.mrr - mrr).abs() < 1e-15);
        let again = evaluate(&params, &config, &graph, &split, &split.test, false).unwrap();
        assert_eq!(again.0, report);
        assert_eq!(again.1, ranked);
    }
}

#[test]
fn empty_query_list_is_an_error() {
    let (graph, split) = toy_split();
    let config = ModelConfig {
        dim: 4,
        attn_dim: 3,
        layers: 2,
        min_length: 1,
        k1: 1,
        ..ModelConfig::default()
    };
    let params = init_params(&config, 2, 0).unwrap();
    assert!(matches!(
        evaluate(&params, &config, &graph, &split, &[], false),
        Err(CoreError::EmptySplit)
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rank_matches_sorting_oracle((psi, answer, filter) in scores_and_filter()) {
        let got = rank_filtered(&psi, answer as EntityId, &filter);
        prop_assert_eq!(got, sorted_position_rank(&psi, answer, &filter));
        prop_assert!(got >= 1.0 && got <= psi.len() as f64);
    }

    #[test]
    fn strictly_increasing_maps_keep_ranks((psi, answer, filter) in scores_and_filter()) {
        let base = rank_filtered(&psi, answer as EntityId, &filter);
        for f in [|x: f64| 2.0 * x + 1.0, |x: f64| x * x * x, f64::exp] {
            let mapped: Vec<f64> = psi.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(rank_filtered(&mapped, answer as EntityId, &filter), base);
        }
    }

    #[test]
    fn filtering_never_raises_a_rank((psi, answer, filter) in scores_and_filter()) {
        let none = BTreeSet::new();
        prop_assert!(rank_filtered(&psi, answer as EntityId, &filter) <= rank_filtered(&psi, answer as EntityId, &none));
    }
}
