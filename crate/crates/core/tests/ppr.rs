mod common;

use nalgebra::{DMatrix, DVector};
use pathmoe_autodiff::Tape;
use pathmoe_core::forward::{forward_query, ForwardOptions};
use pathmoe_core::model::{init_params, ModelVars};
use pathmoe_core::ppr::{batch_scores, build_subgraph, compute_ppr, GraphView, PprCache};
use pathmoe_core::{KnowledgeGraph, ModelConfig, Query, Triple};
use proptest::prelude::*;

/// `π = (1 − α) e_s (I − αP)⁻¹` by a dense solve, with dangling rows
/// spread uniformly.
fn dense_ppr(graph: &KnowledgeGraph, source: usize, alpha: f64) -> Vec<f64> {
    let n = graph.n_entities();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for u in 0..n {
        let out = graph.out_edges(u as u32);
        if out.is_empty() {
            for v in 0..n {
                p[(u, v)] = 1.0 / n as f64;
            }
        }
        for &id in out {
            p[(u, graph.edge(id).tail as usize)] += 1.0 / out.len() as f64;
        }
    }
    let a = (DMatrix::<f64>::identity(n, n) - p * alpha).transpose();
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[source] = 1.0 - alpha;
    a.lu()
        .solve(&rhs)
        .expect("I - αP is invertible")
        .iter()
        .copied()
        .collect()
}

/// Random graph without inverse edges, so dangling nodes occur.
fn directed_graph(seed: u64, n: usize, m: usize) -> KnowledgeGraph {
    let mut rng = pathmoe_autodiff::SeededRng::new(seed);
    let facts = (0..m)
        .map(|_| Triple::new(rng.below(n) as u32, 0, rng.below(n) as u32))
        .collect();
    KnowledgeGraph::from_facts(n, 1, facts).unwrap()
}

#[test]
fn closed_forms() {
    let two = KnowledgeGraph::augmented(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
    let r = compute_ppr(&two, 1, 0.5, 10_000, 1e-15).unwrap();
    assert!((r.scores[1] - 1.0 / 1.5).abs() < 1e-10);
    assert!((r.scores[0] - 0.5 / 1.5).abs() < 1e-10);
    let lone = KnowledgeGraph::augmented(3, 1, vec![Triple::new(1, 0, 1)]).unwrap();
    let r = compute_ppr(&lone, 1, 0.85, 100, 1e-12).unwrap();
    assert_eq!(r.scores, vec![0.0, 1.0, 0.0]);
    assert!(compute_ppr(&lone, 1, 1.0, 10, 1e-9).is_err());
    assert!(compute_ppr(&lone, 3, 0.5, 10, 1e-9).is_err());
}

#[test]
fn batch_score_examples() {
    let g =
        KnowledgeGraph::augmented(4, 1, vec![Triple::new(0, 0, 1), Triple::new(2, 0, 3)]).unwrap();
    let mut cache = PprCache::new(0.85);
    let single = batch_scores(&mut cache, &g, &[0]).unwrap();
    assert!((single[0] - 1.0 / 1.85).abs() < 1e-8 && single[2] == 0.0 && single[3] == 0.0);
    let doubled = batch_scores(&mut cache, &g, &[0, 0]).unwrap();
    for (a, b) in single.iter().zip(&doubled) {
        assert_eq!(2.0 * a, *b);
    }
    let both = batch_scores(&mut cache, &g, &[0, 2]).unwrap();
    assert!((both.iter().sum::<f64>() - 2.0).abs() < 1e-6);
    assert_eq!(both[0], single[0]);
    assert_eq!(cache.len(), 2);
}

#[test]
fn subgraph_keeps_best_scored() {
    let g =
        KnowledgeGraph::augmented(5, 1, (1..5).map(|t| Triple::new(0, 0, t)).collect()).unwrap();
    let scores = [0.4, 0.3, 0.05, 0.2, 0.05];
    let sub = build_subgraph(&g, &scores, 3, &[0]).unwrap();
    let kept = [0u32, 1, 3];
    assert!(sub
        .edges()
        .iter()
        .all(|t| kept.contains(&t.head) && kept.contains(&t.tail)));
    assert_eq!(sub.num_edges(), 4);
    assert_eq!(sub.n_entities(), 5);
    // A low-scoring query entity is always kept.
    let forced = build_subgraph(&g, &scores, 2, &[4]).unwrap();
    assert!(forced
        .edges()
        .iter()
        .all(|t| [0, 4].contains(&t.head) && [0, 4].contains(&t.tail)));
    assert_eq!(forced.num_edges(), 2);
}

#[test]
fn cache_round_trip() {
    let g = directed_graph(3, 20, 40);
    let mut cache = PprCache::new(0.7);
    batch_scores(&mut cache, &g, &[0, 5, 19]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ppr.bin");
    cache.save(&path).unwrap();
    let back = PprCache::load(&path).unwrap();
    assert_eq!(back.alpha, 0.7);
    for s in [0, 5, 19] {
        assert_eq!(back.get(s), cache.get(s));
    }
    std::fs::write(&path, b"junk").unwrap();
    assert!(matches!(
        PprCache::load(&path),
        Err(pathmoe_core::CoreError::Format(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn power_iteration_matches_dense_solve(seed in any::<u64>(), n in 1usize..100, density in 0.0f64..3.0, alpha in 0.05f64..0.95) {
        let g = directed_graph(seed, n, (n as f64 * density) as usize);
        let s = (seed % n as u64) as usize;
        let r = compute_ppr(&g, s as u32, alpha, 100_000, 1e-14).unwrap();
        prop_assert!(r.converged);
        let want = dense_ppr(&g, s, alpha);
        let l1: f64 = r.scores.iter().zip(&want).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(l1 <= 1e-8, "L1 {l1}");
        prop_assert!((r.scores.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(r.scores.iter().all(|&x| x >= 0.0));
        // Each residual is a sum over n entries, so rounding adds up to
        // about n ulps on top of the contraction.
        let floor = 4.0 * n as f64 * f64::EPSILON;
        for w in r.residuals.windows(2) {
            prop_assert!(w[1] <= alpha * w[0] + floor, "{} > {alpha} * {}", w[1], w[0]);
        }
    }

    #[test]
    fn subgraph_edges_stay_inside(seed in any::<u64>(), n in 2usize..50, m in 0usize..120, budget_seed in any::<usize>()) {
        let g = common::random_graph(seed, n, 2, m);
        let src = (seed % n as u64) as u32;
        let mut cache = PprCache::new(0.85);
        let scores = batch_scores(&mut cache, &g, &[src]).unwrap();
        let budget = 1 + budget_seed % n;
        let sub = build_subgraph(&g, &scores, budget, &[src]).unwrap();
        let mut kept: Vec<u32> = sub.edges().iter().flat_map(|t| [t.head, t.tail]).collect();
        kept.sort_unstable();
        kept.dedup();
        prop_assert!(kept.len() <= budget);
        for t in sub.edges() {
            prop_assert!(g.edges().contains(t));
        }
        // Every original edge between kept entities survives.
        let inside = |e: u32| kept.contains(&e) || e == src;
        let expected = g.edges().iter().filter(|t| inside(t.head) && inside(t.tail)).count();
        prop_assert!(sub.num_edges() <= expected);
    }

    #[test]
    fn full_budget_view_scores_like_the_full_graph(seed in any::<u64>(), n in 1usize..30, m in 0usize..60) {
        let g = common::random_graph(seed, n, 2, m);
        let config = ModelConfig { dim: 4, attn_dim: 3, layers: 3, min_length: 1, k1: 2, ..ModelConfig::default() };
        let store = init_params(&config, 2, seed).unwrap();
        let q = Query { entity: (seed % n as u64) as u32, relation: 1, answer: 0 };
        let psi = |graph: &KnowledgeGraph| {
            let mut t = Tape::new();
            let vars = ModelVars::bind(&mut t, &store, &config).unwrap();
            let out = forward_query(&mut t, &vars, &config, graph, &q, &ForwardOptions::inference(), None).unwrap();
            t.value(out.psi).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        let mut view = GraphView::with_ppr(&g, PprCache::new(0.85), n);
        let viewed = view.for_sources(&[q.entity]).unwrap();
        prop_assert_eq!(psi(&viewed), psi(&g));
    }
}
