mod common;

use pathmoe_autodiff::{Tape, Tensor};
use pathmoe_core::config::{Expert, SamplingSchedule};
use pathmoe_core::forward::{forward_query, ForwardOptions};
use pathmoe_core::model::{init_params, ModelVars};
use pathmoe_core::propagation::{init_state, LayerState};
use pathmoe_core::pruning::{
    build_prune_context, phi_attention, phi_scoring, phi_semantic, prune_gate, rescore, schedule_k,
    select_entities,
};
use pathmoe_core::{ModelConfig, Query};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        dim: 2,
        attn_dim: 2,
        layers: 2,
        min_length: 1,
        k1: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn expert_scores_by_hand() {
    let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.5]]).unwrap();
    assert_eq!(phi_scoring(&h, &[2.0, 1.0]), vec![4.0, -1.0, 6.5]);
    assert_eq!(
        phi_attention(&[0.1, 0.7, 0.3, 0.2], &[2, 0, 2, 2], 4),
        vec![0.7, f64::NEG_INFINITY, 0.3, f64::NEG_INFINITY]
    );
    let s = phi_semantic(&h, &[0.0, 1.0]).unwrap();
    assert!((s[0] - 2.0 / 5f64.sqrt()).abs() < 1e-12);
    assert_eq!(s[1], -1.0);
}

fn gate_with(scores: [f64; 3], k2: usize) -> (Vec<usize>, Vec<f64>) {
    let config = small_config();
    let mut store = init_params(&config, 1, 0).unwrap();
    let rows = vec![scores[0], 0.0, scores[1], 0.0, scores[2], 0.0];
    store
        .set(
            "layer1.prune_experts",
            Tensor::new(vec![3, 2], rows).unwrap(),
        )
        .unwrap();
    let mut t = Tape::new();
    let vars = ModelVars::bind(&mut t, &store, &config).unwrap();
    let ctx = t.constant(Tensor::vector(vec![1.0, 0.0]));
    let g = prune_gate(&mut t, vars.layer(1), ctx, k2, 1.0, None).unwrap();
    (g.selected.clone(), g.weight_values(&t).to_vec())
}

#[test]
fn gate_selects_attention_and_semantic() {
    let (sel, w) = gate_with([1.0, 5.0, 2.0], 2);
    let experts: Vec<Expert> = sel.iter().map(|&i| Expert::ALL[i]).collect();
    assert_eq!(experts, vec![Expert::Att, Expert::Sem]);
    let e3 = 3f64.exp();
    assert!((w[0] - e3 / (e3 + 1.0)).abs() < 1e-12);
    assert!((w[0] - 0.953).abs() < 5e-4 && (w[1] - 0.047).abs() < 5e-4);
}

#[test]
fn gate_ties_and_full_selection() {
    assert_eq!(gate_with([2.0, 2.0, 2.0], 2).0, vec![0, 1]);
    let (sel, w) = gate_with([0.0, 1.0, -1.0], 3);
    assert_eq!(sel.len(), 3);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn budget_schedule_examples() {
    let s = SamplingSchedule {
        k_start: 20,
        k_high: 100,
        k_low: 40,
        inflection: 4.0,
        steepness: 1.0,
    };
    assert_eq!(schedule_k(2, &s), 60);
    assert_eq!(schedule_k(6, &s), 70);
    let steep = SamplingSchedule {
        steepness: 50.0,
        ..s.clone()
    };
    assert_eq!(schedule_k(50, &steep), 40);
    assert_eq!(schedule_k(3, &steep), 100);
}

#[test]
fn union_of_two_experts() {
    let scores = [
        Some(vec![0.9, 0.1, 0.5, 0.3, 0.2]),
        Some(vec![0.0, 0.8, 0.1, 0.7, 0.2]),
        None,
    ];
    let r = select_entities(&scores, &[Expert::Sco, Expert::Att], 2, 5, &[]).unwrap();
    assert_eq!(r.per_expert[0].1, vec![0, 2]);
    assert_eq!(r.per_expert[1].1, vec![1, 3]);
    assert_eq!(r.union, vec![0, 1, 2, 3]);
    assert_eq!(r.retained, vec![0, 1, 2, 3]);

    let kept = select_entities(&scores, &[Expert::Sco], 1, 5, &[4]).unwrap();
    assert_eq!(kept.union, vec![0]);
    assert_eq!(kept.retained, vec![0, 4]);

    let all = select_entities(&[None, None, None], &[Expert::Sem], 5, 5, &[]).unwrap();
    assert_eq!(all.retained, vec![0, 1, 2, 3, 4]);
    assert!(select_entities(&[None, None, None], &[Expert::Sem], 2, 5, &[]).is_err());
}

#[test]
fn unit_mass_rescore_is_identity() {
    let mut t = Tape::new();
    let s = t.constant(Tensor::vector(vec![0.5, -2.0, 3.25]));
    let r = select_entities(&[None, None, None], &[Expert::Sco], 3, 3, &[]).unwrap();
    let one = t.scalar(1.0);
    let out = rescore(&mut t, s, &r, one).unwrap();
    assert_eq!(t.value(out).data(), &[0.5, -2.0, 3.25]);
    let half = t.scalar(0.5);
    let part = select_entities(
        &[Some(vec![1.0, 0.0, 2.0]), None, None],
        &[Expert::Sco],
        1,
        3,
        &[],
    )
    .unwrap();
    let out = rescore(&mut t, s, &part, half).unwrap();
    assert_eq!(t.value(out).data(), &[1.625]);
}

#[test]
fn prune_context_by_hand() {
    let config = small_config();
    let mut store = init_params(&config, 2, 0).unwrap();
    store
        .set(
            "prune_ctx.w1",
            Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
    store
        .set("prune_ctx.b1", Tensor::vector(vec![0.1, -0.2]))
        .unwrap();
    store
        .set(
            "prune_ctx.w2",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
        )
        .unwrap();
    store
        .set("prune_ctx.b2", Tensor::vector(vec![0.5, 0.0]))
        .unwrap();
    store
        .set(
            "query_rel",
            Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.2, 0.6, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
    let mut t = Tape::new();
    let vars = ModelVars::bind(&mut t, &store, &config).unwrap();
    let hidden = t.constant(Tensor::new(vec![2, 2], vec![0.3, -0.4, 1.0, 0.0]).unwrap());
    let state = LayerState {
        frontier: vec![0, 1],
        hidden,
        ..init_state(&mut t, 0, 1, 2)
    };
    // Hidden rows (1.0, 0) and (1.7, 0), mean (1.35, 0).
    let c = build_prune_context(&mut t, &vars, &state, 1).unwrap();
    let got = t.value(c).data();
    assert!((got[0] - 1.85).abs() < 1e-12 && got[1] == 0.0, "{got:?}");

    for n in ["prune_ctx.w1", "prune_ctx.w2"] {
        store
            .set(
                n,
                Tensor::zeros(&[2, if n.ends_with("w1") { 4 } else { 2 }]),
            )
            .unwrap();
    }
    let mut t = Tape::new();
    let vars = ModelVars::bind(&mut t, &store, &config).unwrap();
    let s0 = init_state(&mut t, 0, 1, 2);
    let c = build_prune_context(&mut t, &vars, &s0, 1).unwrap();
    assert_eq!(t.value(c).data(), &[0.5, 0.0]);
}

/// Row `i` is in an expert's top `k` when fewer than `k` rows outrank it.
fn outranked_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| scores[i] != f64::NEG_INFINITY)
        .filter(|&i| {
            let better = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            better < k
        })
        .collect()
}

fn expert_subset() -> impl Strategy<Value = Vec<Expert>> {
    (1u8..8).prop_map(|mask| {
        Expert::ALL
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &e)| e)
            .collect()
    })
}

fn expert_scores(n: usize) -> impl Strategy<Value = [Option<Vec<f64>>; 3]> {
    // Small integers make ties common.
    let one = prop::collection::vec((-4i32..5).prop_map(f64::from), n);
    (one.clone(), one.clone(), one).prop_map(|(a, b, c)| [Some(a), Some(b), Some(c)])
}

fn config_for(prune: bool, layers: usize, k_low: usize, k_high: usize) -> ModelConfig {
    ModelConfig {
        dim: 4,
        attn_dim: 3,
        layers,
        min_length: 1,
        k1: 1,
        k2: 2,
        enable_prune: prune,
        enable_length_moe: false,
        early_stop: false,
        schedule: SamplingSchedule {
            k_start: k_low,
            k_high,
            k_low,
            inflection: 2.0,
            steepness: 2.0,
        },
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn union_matches_the_counting_oracle(
        (n, scores) in (1usize..30).prop_flat_map(|n| (Just(n), expert_scores(n))),
        experts in expert_subset(),
        k in 1usize..35,
    ) {
        let r = select_entities(&scores, &experts, k, n, &[]).unwrap();
        let mut want = std::collections::BTreeSet::new();
        for &e in &experts {
            let rows = if k >= n { (0..n).collect() } else { outranked_oracle(scores[e.index()].as_ref().unwrap(), k) };
            want.extend(rows);
        }
        prop_assert_eq!(r.union, want.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn union_size_bounds(
        (n, scores) in (1usize..30).prop_flat_map(|n| (Just(n), expert_scores(n))),
        experts in expert_subset(),
        k in 1usize..35,
    ) {
        let r = select_entities(&scores, &experts, k, n, &[]).unwrap();
        prop_assert!(r.union.len() <= experts.len() * k);
        prop_assert!(r.union.len() >= k.min(n));
        prop_assert!(r.union.len() <= n);
    }

    #[test]
    fn more_experts_never_shrink_the_union(
        (n, scores) in (1usize..30).prop_flat_map(|n| (Just(n), expert_scores(n))),
        small in expert_subset(),
        extra in expert_subset(),
        k in 1usize..35,
    ) {
        let mut big = small.clone();
        for e in extra {
            if !big.contains(&e) { big.push(e); }
        }
        let a = select_entities(&scores, &small, k, n, &[]).unwrap();
        let b = select_entities(&scores, &big, k, n, &[]).unwrap();
        prop_assert!(a.union.iter().all(|r| b.union.contains(r)));
        let bigger = select_entities(&scores, &small, k + 1, n, &[]).unwrap();
        prop_assert!(a.union.iter().all(|r| bigger.union.contains(r)));
    }

    #[test]
    fn schedule_rises_then_falls(ks in 1usize..100, extra in 0usize..200, kl_frac in 0.0f64..1.0, infl in 1.0f64..8.0, a in 0.1f64..10.0) {
        let kh = ks + extra;
        let kl = ((kh as f64) * kl_frac).round().max(1.0) as usize;
        let s = SamplingSchedule { k_start: ks, k_high: kh, k_low: kl, inflection: infl, steepness: a };
        let ks_seq: Vec<usize> = (1..=20).map(|l| schedule_k(l, &s)).collect();
        let lo = ks.min(kl).max(1);
        prop_assert!(ks_seq.iter().all(|&k| k >= lo && k <= kh));
        for l in 1..20usize {
            let (x, y) = (ks_seq[l - 1], ks_seq[l]);
            if ((l + 1) as f64) < infl { prop_assert!(y >= x); }
            if (l as f64) >= infl { prop_assert!(y <= x); }
        }
    }

    #[test]
    fn pruning_never_adds_messages(seed in any::<u64>(), n in 2usize..40, m in 1usize..100, k in 1usize..6) {
        let g = common::random_graph(seed, n, 2, m);
        let q = Query { entity: (seed % n as u64) as u32, relation: 0, answer: 0 };
        let opts = ForwardOptions { bypass_layer_gate: true, ..ForwardOptions::inference() };
        let run = |cfg: &ModelConfig| {
            let store = init_params(cfg, 2, seed).unwrap();
            let mut t = Tape::new();
            let vars = ModelVars::bind(&mut t, &store, cfg).unwrap();
            forward_query(&mut t, &vars, cfg, &g, &q, &opts, None).unwrap().trace
        };
        let pruned = run(&config_for(true, 3, k, k));
        let plain = run(&config_for(false, 3, k, k));
        prop_assert!(pruned.messages <= plain.messages);
        let dropped = pruned.layers[..pruned.layers.len() - 1].iter().zip(&plain.layers).any(|(p, f)| p.retained < f.retained);
        if dropped {
            prop_assert!(pruned.messages < plain.messages);
        }
    }

    #[test]
    fn unpruned_limit_matches_plain_propagation(seed in any::<u64>(), n in 1usize..30, m in 0usize..60, layers in 1usize..5) {
        let g = common::random_graph(seed, n, 3, m);
        let cfg = ModelConfig { k2: 3, ..config_for(true, layers, 1000, 1000) };
        let store = init_params(&cfg, 3, seed).unwrap();
        let q = Query { entity: (seed % n as u64) as u32, relation: 2, answer: 0 };
        let opts = ForwardOptions { bypass_layer_gate: true, ..ForwardOptions::inference() };
        let mut t = Tape::new();
        let vars = ModelVars::bind(&mut t, &store, &cfg).unwrap();
        let out = forward_query(&mut t, &vars, &cfg, &g, &q, &opts, None).unwrap();
        let want = common::reference::last_layer_scores(&store, &cfg, &g, &q);
        let got: Vec<u64> = t.value(out.psi).data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(got, want.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}
