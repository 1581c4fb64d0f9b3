#![allow(dead_code)]

pub mod reference;

use std::collections::{BTreeSet, VecDeque};
use std::path::PathBuf;

use pathmoe_autodiff::SeededRng;
use pathmoe_core::{EntityId, KnowledgeGraph, Triple};

pub fn workspace_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

/// `m` random facts over `n` entities and `r` relations, augmented with
/// inverses.
pub fn random_graph(seed: u64, n: usize, r: usize, m: usize) -> KnowledgeGraph {
    let mut rng = SeededRng::new(seed);
    let facts = (0..m)
        .map(|_| {
            Triple::new(
                rng.below(n) as u32,
                rng.below(r) as u32,
                rng.below(n) as u32,
            )
        })
        .collect();
    KnowledgeGraph::augmented(n, r, facts).unwrap()
}

/// Entities at most `hops` edges from `source`, by breadth-first search over
/// the raw edge list.
pub fn within_hops(graph: &KnowledgeGraph, source: EntityId, hops: usize) -> BTreeSet<EntityId> {
    let mut dist = vec![usize::MAX; graph.n_entities()];
    dist[source as usize] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(x) = queue.pop_front() {
        let d = dist[x as usize];
        if d == hops {
            continue;
        }
        for t in graph.edges().iter().filter(|t| t.head == x) {
            if dist[t.tail as usize] == usize::MAX {
                dist[t.tail as usize] = d + 1;
                queue.push_back(t.tail);
            }
        }
    }
    (0..graph.n_entities() as EntityId)
        .filter(|&e| dist[e as usize] != usize::MAX)
        .collect()
}
