//! Filtered ranking metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use pathmoe_autodiff::ParamStore;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::forward::score_query;
use crate::kg::{EntityId, KnowledgeGraph, Query, QuerySplit, Vocabulary};
use crate::ppr::GraphView;

/// `1 + #{competitors scoring higher} + 0.5 · #{competitors tied}`, where
/// competitors are all entities except the answer and its other known
/// answers.
pub fn rank_filtered(psi: &[f64], answer: EntityId, filter: &BTreeSet<EntityId>) -> f64 {
    let target = psi[answer as usize];
    let mut higher = 0usize;
    let mut ties = 0usize;
    for (e, &s) in psi.iter().enumerate() {
        let e = e as EntityId;
        if e == answer || filter.contains(&e) {
            continue;
        }
        if s > target {
            higher += 1;
        } else if s == target {
            ties += 1;
        }
    }
    1.0 + higher as f64 + 0.5 * ties as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    pub n_queries: usize,
    pub mean_messages: f64,
    pub mean_stop_layer: f64,
    pub early_stop_rate: f64,
    pub mean_retained: f64,
}

impl MetricsReport {
    /// Metrics from ranks alone; telemetry fields stay zero.
    pub fn from_ranks(ranks: &[f64]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(CoreError::EmptySplit);
        }
        let n = ranks.len() as f64;
        let frac = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hit1: frac(1.0),
            hit3: frac(3.0),
            hit10: frac(10.0),
            n_queries: ranks.len(),
            ..Default::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub query: Query,
    pub rank: f64,
    pub messages: usize,
    pub stop_layer: usize,
}

/// Runs every query in inference mode on the full graph and ranks its answer.
pub fn evaluate(
    params: &ParamStore,
    config: &ModelConfig,
    graph: &KnowledgeGraph,
    split: &QuerySplit,
    queries: &[Query],
    force_gate_open: bool,
) -> Result<(MetricsReport, Vec<RankedQuery>)> {
    evaluate_on(
        params,
        config,
        &mut GraphView::full(graph),
        split,
        queries,
        1,
        force_gate_open,
    )
}

/// Like [`evaluate`], building one graph view per `batch_size` queries.
pub fn evaluate_on(
    params: &ParamStore,
    config: &ModelConfig,
    view: &mut GraphView,
    split: &QuerySplit,
    queries: &[Query],
    batch_size: usize,
    force_gate_open: bool,
) -> Result<(MetricsReport, Vec<RankedQuery>)> {
    if queries.is_empty() {
        return Err(CoreError::EmptySplit);
    }
    let mut ranked = Vec::with_capacity(queries.len());
    let mut retained = 0.0;
    let mut early = 0usize;
    for chunk in queries.chunks(batch_size.max(1)) {
        let sources: Vec<EntityId> = chunk.iter().map(|q| q.entity).collect();
        let graph = view.for_sources(&sources)?;
        for q in chunk {
            let (psi, trace) = score_query(params, config, &graph, q, force_gate_open)?;
            let rank = rank_filtered(&psi, q.answer, split.filter_mask(q.entity, q.relation));
            retained += trace.layers.last().map_or(0, |l| l.retained) as f64;
            early += trace.stopped_early as usize;
            ranked.push(RankedQuery {
                query: *q,
                rank,
                messages: trace.messages,
                stop_layer: trace.stop_layer,
            });
        }
    }
    let ranks: Vec<f64> = ranked.iter().map(|r| r.rank).collect();
    let mut report = MetricsReport::from_ranks(&ranks)?;
    let n = queries.len() as f64;
    report.mean_messages = ranked.iter().map(|r| r.messages as f64).sum::<f64>() / n;
    report.mean_stop_layer = ranked.iter().map(|r| r.stop_layer as f64).sum::<f64>() / n;
    report.early_stop_rate = early as f64 / n;
    report.mean_retained = retained / n;
    Ok((report, ranked))
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("metrics serialize");
    std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
}

/// Entity, relation and answer of `q` as names when a vocabulary is given
/// and as ids otherwise. Inverse relations get a `^-1` suffix.
pub fn query_names(
    q: &Query,
    vocab: Option<&Vocabulary>,
    n_relations_base: usize,
) -> (String, String, String) {
    match vocab {
        Some(v) => {
            let base = q.relation as usize % n_relations_base.max(1);
            let name = v.relation_name(base as u32).unwrap_or("?");
            let rel = if (q.relation as usize) < n_relations_base {
                name.to_string()
            } else {
                format!("{name}^-1")
            };
            (
                v.entity_name(q.entity).unwrap_or("?").to_string(),
                rel,
                v.entity_name(q.answer).unwrap_or("?").to_string(),
            )
        }
        None => (
            q.entity.to_string(),
            q.relation.to_string(),
            q.answer.to_string(),
        ),
    }
}

/// One row per query: names when a vocabulary is given, ids otherwise.
pub fn write_ranks(
    path: &Path,
    ranked: &[RankedQuery],
    vocab: Option<&Vocabulary>,
    n_relations_base: usize,
) -> Result<()> {
    let mut out = String::from("entity\trelation\tanswer\trank\tmessages\tstop_layer\n");
    for r in ranked {
        let q = &r.query;
        let (e, rel, a) = query_names(q, vocab, n_relations_base);
        let _ = writeln!(
            out,
            "{e}\t{rel}\t{a}\t{}\t{}\t{}",
            r.rank, r.messages, r.stop_layer
        );
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path, e))
}
