//! The per-query reasoning pass.
//!
//! Layer by layer: propagate, apply the soft layer gate, pick path lengths
//! at `L_min`, score, prune, add the layer's scores to Ψ if its length was
//! selected, then test the stop rule (inference). Layers past the longest
//! selected length cannot change Ψ and are skipped.
//!
//! At inference the soft gate is evaluated without noise and still scales
//! the hidden rows of every layer that the stop rule lets through. Training
//! only ever sees gated rows, so an unscaled layer at inference would feed
//! the scoring vectors inputs far outside what they were fitted on.

use pathmoe_autodiff::{SeededRng, Tape, Tensor, Var};
use serde::Serialize;

use crate::config::{Expert, ModelConfig};
use crate::error::Result;
use crate::gate::GateOutput;
use crate::kg::{KnowledgeGraph, Query};
use crate::length::{
    binary_gate_infer, binary_gate_train, build_query_context, combine_scores, length_gate,
    LengthScores,
};
use crate::model::ModelVars;
use crate::propagation::{
    init_state, layer_stats, propagate_layer, score_layer, EdgeMask, LayerState,
};
use crate::pruning::{
    build_prune_context, phi_attention, phi_semantic, prune_gate, rescore, schedule_k,
    select_entities, PruneResult,
};

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub training: bool,
    /// No stop rule at inference: every selected length runs. The soft
    /// gate still scales the hidden rows.
    pub force_gate_open: bool,
    /// No layer gate at all, in training or inference.
    pub bypass_layer_gate: bool,
    /// Hide the query's own fact from the graph.
    pub mask_query_edge: bool,
    /// One logistic draw per layer (index `ℓ - 1`) for the soft gate.
    pub layer_noise: &'a [f64],
}

impl ForwardOptions<'_> {
    pub fn inference() -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub edges: usize,
    pub candidates: usize,
    pub retained: usize,
    pub budget: Option<usize>,
    pub experts: Vec<Expert>,
    pub gate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct QueryTrace {
    pub messages: usize,
    /// Last layer computed.
    pub stop_layer: usize,
    pub stopped_early: bool,
    pub selected_lengths: Vec<usize>,
    pub length_weights: Vec<f64>,
    pub query_entity_missing: bool,
    pub layers: Vec<LayerTrace>,
}

pub struct QueryOutput {
    /// Ψ over every entity, `[n_entities]`.
    pub psi: Var,
    pub length_gate: Option<GateOutput>,
    /// Per-length probability of selection, training only.
    pub load: Option<Var>,
    /// Dense pruning-gate weights, one `[3]` vector per pruned layer.
    pub prune_gates: Vec<Var>,
    pub trace: QueryTrace,
}

fn normals(rng: &mut Option<&mut SeededRng>, n: usize) -> Option<Vec<f64>> {
    rng.as_mut().map(|r| (0..n).map(|_| r.normal()).collect())
}

struct Pruned {
    result: PruneResult,
    mass: Var,
    dense: Var,
    experts: Vec<Expert>,
    budget: usize,
}

#[allow(clippy::too_many_arguments)]
fn prune_layer(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    layer: usize,
    prev: &LayerState,
    next: &LayerState,
    alpha: Var,
    dst_row: &[usize],
    scores: Var,
    rng: &mut Option<&mut SeededRng>,
) -> Result<Pruned> {
    let lv = *vars.layer(layer);
    let (experts, mass, dense) = match config.single_expert {
        Some(e) => {
            let mut one_hot = vec![0.0; 3];
            one_hot[e.index()] = 1.0;
            (
                vec![e],
                tape.scalar(1.0),
                tape.constant(Tensor::vector(one_hot)),
            )
        }
        None => {
            let ctx = build_prune_context(tape, vars, prev, prev.relation)?;
            let noise = normals(rng, 3);
            let g = prune_gate(tape, &lv, ctx, config.k2, config.tau, noise.as_deref())?;
            (
                g.selected.iter().map(|&i| Expert::ALL[i]).collect(),
                g.mass,
                g.dense,
            )
        }
    };
    let n = next.frontier.len();
    let budget = schedule_k(layer, &config.schedule);
    let mut per_expert: [Option<Vec<f64>>; 3] = [None, None, None];
    if budget < n {
        for &e in &experts {
            per_expert[e.index()] = Some(match e {
                Expert::Sco => tape.value(scores).data().to_vec(),
                Expert::Att => phi_attention(tape.value(alpha).data(), dst_row, n),
                Expert::Sem => {
                    let rel = tape.value(lv.rel).row(prev.relation as usize).to_vec();
                    phi_semantic(tape.value(next.hidden), &rel)?
                }
            });
        }
    }
    let keep: Vec<usize> = prev
        .frontier
        .iter()
        .filter_map(|&e| next.row_of(e))
        .collect();
    let result = select_entities(&per_expert, &experts, budget, n, &keep)?;
    Ok(Pruned {
        result,
        mass,
        dense,
        experts,
        budget,
    })
}

/// Runs one query through the model on `tape`. `rng` supplies gate noise
/// and is only read in training.
pub fn forward_query(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    graph: &KnowledgeGraph,
    query: &Query,
    opts: &ForwardOptions,
    mut rng: Option<&mut SeededRng>,
) -> Result<QueryOutput> {
    if !opts.training {
        rng = None;
    }
    let big_l = config.layers;
    let mask = opts
        .mask_query_edge
        .then(|| EdgeMask::for_query(graph, query));
    let mut state = init_state(tape, query.entity, query.relation, config.dim);
    let mut trace = QueryTrace::default();
    let mut parts: Vec<LengthScores> = Vec::new();
    let mut prune_gates = Vec::new();
    let mut len_gate: Option<GateOutput> = None;
    let mut load = None;
    // Selected lengths with the index of their weight in the gate output.
    let mut lengths: Option<Vec<(usize, Option<usize>)>> =
        (!config.enable_length_moe).then(|| vec![(big_l, None)]);

    for l in 1..=big_l {
        let lv = *vars.layer(l);
        let mut prop = propagate_layer(tape, graph, &state, &lv, None, mask.as_ref())?;
        let mut layer_trace = LayerTrace {
            layer: l,
            edges: prop.edges.len(),
            candidates: prop.edges.candidates.len(),
            gate: 1.0,
            ..Default::default()
        };
        if prop.state.frontier.is_empty() {
            trace.layers.push(layer_trace);
            trace.stop_layer = l;
            break;
        }
        if !opts.bypass_layer_gate && 2 * l >= big_l {
            let mean = tape.mean(prop.state.hidden);
            let std = tape.std(prop.state.hidden);
            let noise = match opts.training {
                true => opts.layer_noise.get(l - 1).copied().unwrap_or(0.0),
                false => 0.0,
            };
            let g = binary_gate_train(tape, &vars.stop_gate, mean, std, config.tau_gumbel, noise)?;
            layer_trace.gate = tape.scalar_value(g);
            prop.state.hidden = tape.mul_scalar(prop.state.hidden, g)?;
        }
        let full = prop.state;

        if l == config.min_length && lengths.is_none() {
            let (ctx, missing) = build_query_context(tape, vars, &full, query.relation)?;
            trace.query_entity_missing = missing;
            let noise = normals(&mut rng, config.n_lengths());
            let g = length_gate(tape, vars, ctx, config.k1, config.tau, noise.as_deref())?;
            if opts.training {
                load = Some(crate::gate::load_probability(tape, &g, config.k1)?);
            }
            trace.length_weights = g.weight_values(tape).to_vec();
            lengths = Some(
                g.selected
                    .iter()
                    .enumerate()
                    .map(|(pos, &i)| (config.min_length + i, Some(pos)))
                    .collect(),
            );
            len_gate = Some(g);
        }

        let scores = score_layer(tape, &full, lv.score)?;
        let (next, kept_scores) = if config.enable_prune {
            let p = prune_layer(
                tape,
                vars,
                config,
                l,
                &state,
                &full,
                prop.alpha,
                &prop.edges.dst_row,
                scores,
                &mut rng,
            )?;
            let s = rescore(tape, scores, &p.result, p.mass)?;
            let hidden = tape.gather_rows(full.hidden, p.result.retained.clone())?;
            let frontier = p
                .result
                .retained
                .iter()
                .map(|&r| full.frontier[r])
                .collect();
            prune_gates.push(p.dense);
            layer_trace.budget = Some(p.budget);
            layer_trace.experts = p.experts;
            (
                LayerState {
                    frontier,
                    hidden,
                    ..full.clone()
                },
                s,
            )
        } else {
            (full.clone(), scores)
        };
        layer_trace.retained = next.frontier.len();
        trace.layers.push(layer_trace);
        trace.messages = next.messages;
        trace.stop_layer = l;

        let chosen = lengths
            .as_ref()
            .and_then(|ls| ls.iter().find(|(len, _)| *len == l).copied());
        if let Some((_, pos)) = chosen {
            let weight = match (pos, &len_gate) {
                (Some(pos), Some(g)) => Some(tape.gather_rows(g.weights, vec![pos])?),
                _ => None,
            };
            parts.push(LengthScores {
                scores: kept_scores,
                entities: next.frontier.clone(),
                weight,
            });
            if !opts.training
                && config.early_stop
                && !opts.force_gate_open
                && !opts.bypass_layer_gate
            {
                let stats = layer_stats(tape.value(full.hidden))?;
                if !binary_gate_infer(stats.cv, l, big_l, config.cv_threshold) && l < big_l {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
        state = next;
        if let Some(ls) = &lengths {
            if ls.iter().all(|(len, _)| *len <= l) {
                break;
            }
        }
    }

    if let Some(ls) = &lengths {
        trace.selected_lengths = ls.iter().map(|(len, _)| *len).collect();
    }
    let psi = combine_scores(tape, &parts, graph.n_entities())?;
    Ok(QueryOutput {
        psi,
        length_gate: len_gate,
        load,
        prune_gates,
        trace,
    })
}

/// Inference scores for one query on a fresh tape.
pub fn score_query(
    store: &pathmoe_autodiff::ParamStore,
    config: &ModelConfig,
    graph: &KnowledgeGraph,
    query: &Query,
    force_gate_open: bool,
) -> Result<(Vec<f64>, QueryTrace)> {
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, store, config)?;
    let opts = ForwardOptions {
        force_gate_open,
        ..ForwardOptions::inference()
    };
    let out = forward_query(&mut tape, &vars, config, graph, query, &opts, None)?;
    Ok((tape.value(out.psi).data().to_vec(), out.trace))
}
