//! Whole-model gradient check on a small seeded graph.

use std::collections::BTreeMap;

use pathmoe_autodiff::{grad_check, GradCheckOptions, ParamStore, SeededRng, Tensor};

use crate::config::{ModelConfig, SamplingSchedule};
use crate::error::Result;
use crate::kg::{KnowledgeGraph, Query, Triple};
use crate::model::init_params;
use crate::trainer::Objective;

pub const TOY_ENTITIES: usize = 8;
pub const TOY_RELATIONS: usize = 3;

/// A small configuration that exercises every component: three lengths
/// with two selected, a budget below the frontier size, and the soft
/// layer gate on the later layers.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        dim: 4,
        attn_dim: 3,
        layers: 3,
        min_length: 1,
        k1: 2,
        k2: 2,
        gate_hidden: 4,
        schedule: SamplingSchedule {
            k_start: 2,
            k_high: 3,
            k_low: 2,
            inflection: 2.0,
            steepness: 2.0,
        },
        ..ModelConfig::default()
    }
}

/// A connected random graph on [`TOY_ENTITIES`] entities: a chain through
/// every entity plus a few random facts.
pub fn toy_graph(seed: u64) -> Result<(KnowledgeGraph, Vec<Query>)> {
    let mut rng = SeededRng::new(seed).derive("toy-graph");
    let n = TOY_ENTITIES as u32;
    let mut facts: Vec<Triple> = (0..n - 1)
        .map(|e| Triple::new(e, rng.below(TOY_RELATIONS) as u32, e + 1))
        .collect();
    for _ in 0..6 {
        let h = rng.below(TOY_ENTITIES) as u32;
        let t = rng.below(TOY_ENTITIES) as u32;
        facts.push(Triple::new(h, rng.below(TOY_RELATIONS) as u32, t));
    }
    let queries = facts
        .iter()
        .take(3)
        .map(|t| Query {
            entity: t.head,
            relation: t.rel,
            answer: t.tail,
        })
        .collect();
    Ok((
        KnowledgeGraph::augmented(TOY_ENTITIES, TOY_RELATIONS, facts)?,
        queries,
    ))
}

/// Maps a parameter name to the component it belongs to.
pub fn component_of(name: &str) -> &'static str {
    let field = name.split_once('.').map_or(name, |(head, tail)| {
        if head.starts_with("layer") {
            tail
        } else {
            head
        }
    });
    match field {
        f if f.starts_with("prune") => "pruning-experts",
        f if f.starts_with("len") || f.starts_with("stop_gate") || f == "query_rel" => {
            "length-experts"
        }
        _ => "propagation-engine",
    }
}

#[derive(Clone, Debug, Default)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    /// Parameter name, element index and draw of the worst element.
    pub worst: Option<(String, usize, usize)>,
    pub per_component: BTreeMap<&'static str, f64>,
    pub elements_checked: usize,
    /// Parameter name, element index and draw of elements whose stencil
    /// crossed a non-differentiable point.
    pub kinks: Vec<(String, usize, usize)>,
    pub draws: usize,
}

impl ModelGradReport {
    /// Largest accepted fraction of elements skipped as kinks.
    pub const MAX_KINK_FRACTION: f64 = 0.01;

    pub fn kink_fraction(&self) -> f64 {
        self.kinks.len() as f64 / self.elements_checked.max(1) as f64
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && self.kink_fraction() <= Self::MAX_KINK_FRACTION
    }
}

/// Flips the sign of every attention-weight gradient.
pub fn flip_attention_gradients(grads: &mut BTreeMap<String, Tensor>) {
    for (name, g) in grads.iter_mut() {
        if name.ends_with(".attn_w") {
            g.data_mut().iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Runs the finite-difference check for `draws` parameter draws. The
/// training loss is made deterministic by rebuilding its noise stream from
/// the same seed on every evaluation.
pub fn model_grad_check(
    seed: u64,
    draws: usize,
    opts: &GradCheckOptions,
) -> Result<ModelGradReport> {
    let config = toy_config();
    let (graph, batch) = toy_graph(seed)?;
    let mut report = ModelGradReport {
        draws,
        ..Default::default()
    };
    for draw in 0..draws {
        let draw_seed = seed.wrapping_mul(1_000_003).wrapping_add(draw as u64);
        let params: ParamStore = init_params(&config, TOY_RELATIONS, draw_seed)?;
        let objective = Objective {
            model: &config,
            lambda1: 0.1,
            lambda2: 0.1,
            graph: &graph,
        };
        let loss = |tape: &mut pathmoe_autodiff::Tape, p: &ParamStore| {
            let mut rng = SeededRng::new(draw_seed).derive("noise");
            objective
                .build(tape, p, &batch, &mut rng)
                .map(|(total, _)| total)
                .map_err(|e| pathmoe_autodiff::AutodiffError::InvalidArgument(e.to_string()))
        };
        let r = grad_check(loss, &params, opts)?;
        report.elements_checked += r.elements_checked;
        report
            .kinks
            .extend(r.kinks.into_iter().map(|(n, k)| (n, k, draw)));
        for (name, err) in &r.per_tensor {
            let slot = report
                .per_component
                .entry(component_of(name))
                .or_insert(0.0);
            *slot = slot.max(*err);
        }
        if report.worst.is_none() || r.max_rel_error > report.max_rel_error {
            report.max_rel_error = r.max_rel_error;
            report.worst = r.worst.map(|(n, k)| (n, k, draw));
        }
    }
    Ok(report)
}
