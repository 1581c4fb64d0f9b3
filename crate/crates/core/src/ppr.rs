//! Personalized PageRank pre-pruning.
//!
//! `π = (1 − α) e_s + α π P`, where `P` row-normalises edge multiplicities
//! and a node without out-edges spreads its mass uniformly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::kg::{EntityId, KnowledgeGraph};

pub const SCORE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PprResult {
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// L1 change per iteration.
    pub residuals: Vec<f64>,
}

/// Power iteration from `e_source` until the L1 change drops below `tol`.
pub fn compute_ppr(
    graph: &KnowledgeGraph,
    source: EntityId,
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<PprResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoreError::Config(format!(
            "damping {alpha} must lie in (0, 1)"
        )));
    }
    let n = graph.n_entities();
    if source as usize >= n {
        return Err(CoreError::Invalid(format!(
            "source {source} outside {n} entities"
        )));
    }
    let out_deg: Vec<usize> = (0..n as EntityId)
        .map(|e| graph.out_edges(e).len())
        .collect();
    let mut pi = vec![0.0; n];
    pi[source as usize] = 1.0;
    let mut next = vec![0.0; n];
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        next.iter_mut().for_each(|x| *x = 0.0);
        let mut dangling = 0.0;
        for u in 0..n {
            if pi[u] == 0.0 {
                continue;
            }
            if out_deg[u] == 0 {
                dangling += pi[u];
                continue;
            }
            let share = alpha * pi[u] / out_deg[u] as f64;
            for &id in graph.out_edges(u as EntityId) {
                next[graph.edge(id).tail as usize] += share;
            }
        }
        let spread = alpha * dangling / n as f64;
        if spread != 0.0 {
            next.iter_mut().for_each(|x| *x += spread);
        }
        next[source as usize] += 1.0 - alpha;
        let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        residuals.push(diff);
        if diff < tol {
            converged = true;
            break;
        }
    }
    Ok(PprResult {
        iterations: residuals.len(),
        scores: pi,
        converged,
        residuals,
    })
}

/// Lazily filled per-source sparse vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PprCache {
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
    vectors: BTreeMap<EntityId, Vec<(EntityId, f64)>>,
}

impl PprCache {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            max_iters: 1000,
            tol: 1e-10,
            vectors: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, source: EntityId) -> bool {
        self.vectors.contains_key(&source)
    }

    pub fn get(&self, source: EntityId) -> Option<&[(EntityId, f64)]> {
        self.vectors.get(&source).map(Vec::as_slice)
    }

    /// Computes and stores the vector of `source` if it is missing.
    pub fn ensure(
        &mut self,
        graph: &KnowledgeGraph,
        source: EntityId,
    ) -> Result<&[(EntityId, f64)]> {
        if !self.vectors.contains_key(&source) {
            let r = compute_ppr(graph, source, self.alpha, self.max_iters, self.tol)?;
            let sparse = r
                .scores
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= SCORE_FLOOR)
                .map(|(e, &s)| (e as EntityId, s))
                .collect();
            self.vectors.insert(source, sparse);
        }
        Ok(&self.vectors[&source])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(b"PMOEPPR1");
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&(self.vectors.len() as u32).to_le_bytes());
        for (src, v) in &self.vectors {
            out.extend_from_slice(&src.to_le_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for (e, s) in v {
                out.extend_from_slice(&e.to_le_bytes());
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&out).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CoreError::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(8)? != b"PMOEPPR1" {
            return Err(CoreError::Format("not a PPR cache file".into()));
        }
        let alpha = r.f64()?;
        let mut cache = PprCache::new(alpha);
        for _ in 0..r.u32()? {
            let src = r.u32()?;
            let count = r.u32()? as usize;
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push((r.u32()?, r.f64()?));
            }
            cache.vectors.insert(src, v);
        }
        Ok(cache)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// `score(v) = Σ_sources π_source(v)`, computing missing sources on demand.
pub fn batch_scores(
    cache: &mut PprCache,
    graph: &KnowledgeGraph,
    sources: &[EntityId],
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; graph.n_entities()];
    for &s in sources {
        for &(e, v) in cache.ensure(graph, s)? {
            out[e as usize] += v;
        }
    }
    Ok(out)
}

/// Keeps the sources plus the best-scoring entities (ties to the smaller
/// id) up to `budget`, and every edge between kept entities.
pub fn build_subgraph(
    graph: &KnowledgeGraph,
    scores: &[f64],
    budget: usize,
    sources: &[EntityId],
) -> Result<KnowledgeGraph> {
    let n = graph.n_entities();
    if budget >= n {
        return Ok(graph.clone());
    }
    let mut keep = vec![false; n];
    let mut count = 0;
    for &s in sources {
        if !keep[s as usize] {
            keep[s as usize] = true;
            count += 1;
        }
    }
    if count > budget {
        return Err(CoreError::Config(format!(
            "PPR budget {budget} is below the {count} query entities"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for e in order {
        if count >= budget {
            break;
        }
        if !keep[e] {
            keep[e] = true;
            count += 1;
        }
    }
    Ok(graph.induced(&keep))
}

/// The graph queries run on: the full graph, or a PPR-selected view per
/// batch of queries.
pub struct GraphView<'a> {
    base: &'a KnowledgeGraph,
    ppr: Option<(PprCache, usize)>,
}

impl<'a> GraphView<'a> {
    pub fn full(base: &'a KnowledgeGraph) -> Self {
        Self { base, ppr: None }
    }

    pub fn with_ppr(base: &'a KnowledgeGraph, cache: PprCache, budget: usize) -> Self {
        Self {
            base,
            ppr: Some((cache, budget)),
        }
    }

    pub fn base(&self) -> &'a KnowledgeGraph {
        self.base
    }

    pub fn cache(&self) -> Option<&PprCache> {
        self.ppr.as_ref().map(|(c, _)| c)
    }

    /// The graph for a batch whose query entities are `sources`.
    pub fn for_sources(
        &mut self,
        sources: &[EntityId],
    ) -> Result<std::borrow::Cow<'a, KnowledgeGraph>> {
        match &mut self.ppr {
            None => Ok(std::borrow::Cow::Borrowed(self.base)),
            Some((cache, budget)) => {
                let scores = batch_scores(cache, self.base, sources)?;
                Ok(std::borrow::Cow::Owned(build_subgraph(
                    self.base, &scores, *budget, sources,
                )?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    #[test]
    fn two_cycle_closed_form() {
        let g = KnowledgeGraph::augmented(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let r = compute_ppr(&g, 0, 0.85, 10_000, 1e-15).unwrap();
        assert!((r.scores[0] - 1.0 / 1.85).abs() < 1e-10);
        assert!((r.scores[1] - 0.85 / 1.85).abs() < 1e-10);
    }

    #[test]
    fn lone_node_keeps_all_mass() {
        let g = KnowledgeGraph::augmented(1, 1, vec![Triple::new(0, 0, 0)]).unwrap();
        let r = compute_ppr(&g, 0, 0.85, 100, 1e-12).unwrap();
        assert_eq!(r.scores, vec![1.0]);
    }

    #[test]
    fn star_subgraph() {
        let facts = vec![
            Triple::new(0, 0, 1),
            Triple::new(0, 0, 2),
            Triple::new(0, 0, 3),
        ];
        let g = KnowledgeGraph::augmented(4, 1, facts).unwrap();
        let scores = [0.5, 0.1, 0.3, 0.1];
        let sub = build_subgraph(&g, &scores, 2, &[0]).unwrap();
        assert_eq!(sub.num_edges(), 2);
        assert!(sub
            .edges()
            .iter()
            .all(|t| t.head != 1 && t.tail != 1 && t.head != 3 && t.tail != 3));
        let low = build_subgraph(&g, &scores, 2, &[3]).unwrap();
        assert!(low
            .edges()
            .iter()
            .all(|t| [0, 3].contains(&t.head) && [0, 3].contains(&t.tail)));
        assert_eq!(build_subgraph(&g, &scores, 4, &[0]).unwrap(), g);
        assert!(build_subgraph(&g, &scores, 1, &[1, 2]).is_err());
    }
}
