//! Query-conditioned message passing over the growing frontier.
//!
//! A message along edge `(x, r, y)` is `α · (h(x) + w_r)` and messages are
//! summed per tail. Every frontier entity also sends a message to itself
//! over the self-loop relation.

use pathmoe_autodiff::{population_std, EdgeIndex, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::kg::{EntityId, KnowledgeGraph, Query, RelationId, Triple};
use crate::model::LayerVars;

/// Frontier and representations of one query after `layer` steps.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub layer: usize,
    pub entity: EntityId,
    pub relation: RelationId,
    /// Sorted entity ids; row `i` of `hidden` belongs to `frontier[i]`.
    pub frontier: Vec<EntityId>,
    /// `[frontier.len(), d]`.
    pub hidden: Var,
    /// Messages processed so far, self-loops included.
    pub messages: usize,
}

impl LayerState {
    pub fn row_of(&self, e: EntityId) -> Option<usize> {
        self.frontier.binary_search(&e).ok()
    }
}

/// Layer 0: the query entity alone with a zero representation.
pub fn init_state(
    tape: &mut Tape,
    entity: EntityId,
    relation: RelationId,
    dim: usize,
) -> LayerState {
    let hidden = tape.constant(Tensor::zeros(&[1, dim]));
    LayerState {
        layer: 0,
        entity,
        relation,
        frontier: vec![entity],
        hidden,
        messages: 0,
    }
}

/// Edges leaving a frontier, in processing order: for each frontier row
/// ascending, the self-loop first and then the out-edges in edge-id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerEdges {
    pub src_row: Vec<usize>,
    pub rel: Vec<usize>,
    pub dst_row: Vec<usize>,
    /// Sorted tails; `dst_row` indexes into this list.
    pub candidates: Vec<EntityId>,
}

impl LayerEdges {
    pub fn len(&self) -> usize {
        self.src_row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_row.is_empty()
    }

    fn index(&self) -> EdgeIndex {
        EdgeIndex {
            src: self.src_row.clone(),
            rel: self.rel.clone(),
            dst: self.dst_row.clone(),
            out_rows: self.candidates.len(),
        }
    }
}

/// Training facts a query must not read: the query's own triple in either
/// direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    forward: Triple,
    backward: Triple,
}

impl EdgeMask {
    pub fn for_query(graph: &KnowledgeGraph, q: &Query) -> Self {
        Self {
            forward: Triple::new(q.entity, q.relation, q.answer),
            backward: Triple::new(q.answer, graph.inverse_relation(q.relation), q.entity),
        }
    }

    fn blocks(&self, t: &Triple) -> bool {
        *t == self.forward || *t == self.backward
    }
}

/// Collects the edges leaving `frontier` plus one self-loop per frontier
/// entity.
pub fn expand_frontier(
    graph: &KnowledgeGraph,
    frontier: &[EntityId],
    mask: Option<&EdgeMask>,
) -> LayerEdges {
    let self_loop = graph.self_loop_relation() as usize;
    let mut src_row = Vec::new();
    let mut rel = Vec::new();
    let mut dst_entity: Vec<EntityId> = Vec::new();
    for (i, &x) in frontier.iter().enumerate() {
        src_row.push(i);
        rel.push(self_loop);
        dst_entity.push(x);
        for &id in graph.out_edges(x) {
            let t = graph.edge(id);
            if mask.is_some_and(|m| m.blocks(&t)) {
                continue;
            }
            src_row.push(i);
            rel.push(t.rel as usize);
            dst_entity.push(t.tail);
        }
    }
    let mut row_of = vec![u32::MAX; graph.n_entities()];
    let mut candidates: Vec<EntityId> = Vec::new();
    for &e in &dst_entity {
        if row_of[e as usize] == u32::MAX {
            row_of[e as usize] = 0;
            candidates.push(e);
        }
    }
    candidates.sort_unstable();
    for (i, &e) in candidates.iter().enumerate() {
        row_of[e as usize] = i as u32;
    }
    let dst_row = dst_entity
        .iter()
        .map(|&e| row_of[e as usize] as usize)
        .collect();
    LayerEdges {
        src_row,
        rel,
        dst_row,
        candidates,
    }
}

/// `α = σ(vᵀ relu(W_h h(x) + W_r w_r + W_q w_{r_q}))` for every edge.
pub fn attention(
    tape: &mut Tape,
    vars: &LayerVars,
    hidden: Var,
    edges: &LayerEdges,
    relation: RelationId,
) -> Result<Var> {
    let a_h = tape.matmul_nt(hidden, vars.attn_h)?;
    let per_src = tape.gather_rows(a_h, edges.src_row.clone())?;
    let per_rel = tape.gather_rows(vars.attn_rel, edges.rel.clone())?;
    let pre = tape.add(per_src, per_rel)?;
    let q = tape.gather_rows(vars.attn_query, vec![relation as usize])?;
    let width = tape.value(q).len();
    let q = tape.reshape(q, &[width])?;
    let pre = tape.add_row(pre, q)?;
    let act = tape.relu(pre);
    let logits = tape.matvec(act, vars.attn_v)?;
    Ok(tape.sigmoid(logits))
}

/// Output of one propagation step over all candidates (before pruning).
#[derive(Clone, Debug)]
pub struct Propagated {
    pub state: LayerState,
    pub edges: LayerEdges,
    pub alpha: Var,
}

/// One message-passing step. `gate`, when given, is a one-element tensor
/// that scales the aggregated representations.
pub fn propagate_layer(
    tape: &mut Tape,
    graph: &KnowledgeGraph,
    state: &LayerState,
    vars: &LayerVars,
    gate: Option<Var>,
    mask: Option<&EdgeMask>,
) -> Result<Propagated> {
    let edges = expand_frontier(graph, &state.frontier, mask);
    let dim = tape.value(state.hidden).row_width();
    if edges.is_empty() {
        let hidden = tape.constant(Tensor::zeros(&[0, dim]));
        let alpha = tape.constant(Tensor::vector(Vec::new()));
        let next = LayerState {
            layer: state.layer + 1,
            frontier: Vec::new(),
            hidden,
            ..state.clone()
        };
        return Ok(Propagated {
            state: next,
            edges,
            alpha,
        });
    }
    let alpha = attention(tape, vars, state.hidden, &edges, state.relation)?;
    let mut hidden = tape.edge_message_sum(state.hidden, vars.rel, alpha, edges.index())?;
    if let Some(g) = gate {
        hidden = tape.mul_scalar(hidden, g)?;
    }
    let next = LayerState {
        layer: state.layer + 1,
        entity: state.entity,
        relation: state.relation,
        frontier: edges.candidates.clone(),
        hidden,
        messages: state.messages + edges.len(),
    };
    Ok(Propagated {
        state: next,
        edges,
        alpha,
    })
}

/// Mean, population standard deviation and coefficient of variation of
/// every element of `H`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    pub mean: f64,
    pub std: f64,
    /// `None` when `|mean| <= 1e-12`.
    pub cv: Option<f64>,
}

pub fn layer_stats(hidden: &Tensor) -> Result<LayerStats> {
    if hidden.is_empty() {
        return Err(CoreError::Invalid(
            "layer statistics of an empty frontier".into(),
        ));
    }
    let mean = hidden.data().iter().sum::<f64>() / hidden.len() as f64;
    let std = population_std(hidden.data());
    let cv = (mean.abs() > 1e-12).then(|| std / mean);
    Ok(LayerStats { mean, std, cv })
}

/// `s = H · w` for every frontier row.
pub fn score_layer(tape: &mut Tape, state: &LayerState, w: Var) -> Result<Var> {
    Ok(tape.matvec(state.hidden, w)?)
}
