//! A direct dense implementation of unpruned message passing and last-layer
//! scoring, written against plain vectors. Floating-point operations are
//! performed in the same order as the tape kernels so results can be
//! compared bit for bit.

use std::collections::BTreeMap;

use pathmoe_autodiff::{sigmoid, ParamStore};
use pathmoe_core::{KnowledgeGraph, ModelConfig, Query};

fn row(store: &ParamStore, name: &str, i: usize) -> Vec<f64> {
    let t = store.get(name).unwrap();
    let w = t.shape()[1];
    t.data()[i * w..(i + 1) * w].to_vec()
}

fn dot_block(w: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in w.iter().zip(x) {
        acc += a * b;
    }
    acc
}

/// Representations after `layers` steps from the query entity, keyed by
/// entity, plus the number of messages sent.
pub fn propagate(
    store: &ParamStore,
    config: &ModelConfig,
    graph: &KnowledgeGraph,
    query: &Query,
    layers: usize,
) -> (BTreeMap<u32, Vec<f64>>, usize) {
    let d = config.dim;
    let da = config.attn_dim;
    let self_loop = graph.self_loop_relation();
    let mut h: BTreeMap<u32, Vec<f64>> = BTreeMap::from([(query.entity, vec![0.0; d])]);
    let mut messages = 0;
    for l in 1..=layers {
        let relname = format!("layer{l}.rel");
        let w_att = store.get(&format!("layer{l}.attn_w")).unwrap();
        let v = store.get(&format!("layer{l}.attn_v")).unwrap().data();
        let w_row = |i: usize, block: usize| {
            &w_att.data()[i * 3 * d + block * d..i * 3 * d + (block + 1) * d]
        };
        let q_emb = row(store, &relname, query.relation as usize);
        let a_q: Vec<f64> = (0..da).map(|i| dot_block(w_row(i, 2), &q_emb)).collect();
        let mut next: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (&x, hx) in &h {
            let a_h: Vec<f64> = (0..da).map(|i| dot_block(w_row(i, 0), hx)).collect();
            let mut out: Vec<(u32, u32)> = vec![(self_loop, x)];
            out.extend(
                graph
                    .out_edges(x)
                    .iter()
                    .map(|&id| graph.edge(id))
                    .map(|t| (t.rel, t.tail)),
            );
            for (r, y) in out {
                let w_r = row(store, &relname, r as usize);
                let mut logit = 0.0;
                for i in 0..da {
                    let a_r = dot_block(w_row(i, 1), &w_r);
                    let pre = (a_h[i] + a_r) + a_q[i];
                    logit += v[i] * pre.max(0.0);
                }
                let alpha = sigmoid(logit);
                let acc = next.entry(y).or_insert_with(|| vec![0.0; d]);
                for j in 0..d {
                    acc[j] += alpha * (hx[j] + w_r[j]);
                }
                messages += 1;
            }
        }
        h = next;
    }
    (h, messages)
}

/// `Ψ(e) = h^L(e) · w^L` for reached entities, zero elsewhere.
pub fn last_layer_scores(
    store: &ParamStore,
    config: &ModelConfig,
    graph: &KnowledgeGraph,
    query: &Query,
) -> Vec<f64> {
    let (h, _) = propagate(store, config, graph, query, config.layers);
    let w = store
        .get(&format!("layer{}.score", config.layers))
        .unwrap()
        .data();
    let mut psi = vec![0.0; graph.n_entities()];
    for (e, he) in h {
        psi[e as usize] = dot_block(he.as_slice(), w);
    }
    psi
}
