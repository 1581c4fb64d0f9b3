//! Mini-batch training: one tape per batch, one optimizer step per batch.

use std::path::Path;
use std::time::Instant;

use pathmoe_autodiff::{ParamStore, SeededRng, Tape, Var};
use serde::Serialize;

use crate::config::{ModelConfig, RunConfig};
use crate::error::{CoreError, Result};
use crate::eval::MetricsReport;
use crate::forward::{forward_query, ForwardOptions};
use crate::kg::{EntityId, KnowledgeGraph, Query};
use crate::loss::{
    compose_on_tape, cv_squared_value, importance_loss, load_loss, task_loss, LossBreakdown,
};
use crate::model::ModelVars;
use crate::optim::{clip_grad_norm, Adam};
use crate::ppr::GraphView;

#[derive(Clone, Debug, Default, Serialize)]
pub struct BatchOutcome {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Summed dense length-gate weights over the batch.
    pub length_importance: Vec<f64>,
    /// Summed dense pruning-gate weights over the batch.
    pub prune_importance: Vec<f64>,
    pub importance_all_zero: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub batches: usize,
    pub queries: usize,
    pub seconds: f64,
    pub mean_grad_norm: f64,
    /// CV of the per-length importance summed over the epoch.
    pub length_importance_cv: f64,
    /// CV of the per-expert pruning importance summed over the epoch.
    pub prune_importance_cv: f64,
    pub truncated: bool,
    pub valid: Option<MetricsReport>,
}

fn add_into(acc: &mut Vec<f64>, v: &[f64]) {
    if acc.is_empty() {
        acc.resize(v.len(), 0.0);
    }
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// The training objective for one batch.
pub struct Objective<'g> {
    pub model: &'g ModelConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub graph: &'g KnowledgeGraph,
}

impl Objective<'_> {
    /// Records the batch loss on `tape`. All noise comes from `rng`, so a
    /// fresh generator with the same seed reproduces the same function.
    pub fn build(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        batch: &[Query],
        rng: &mut SeededRng,
    ) -> Result<(Var, BatchOutcome)> {
        let cfg = self.model;
        let layer_noise: Vec<f64> = (0..cfg.layers).map(|_| rng.gumbel_pair()).collect();
        let opts = ForwardOptions {
            training: true,
            force_gate_open: false,
            bypass_layer_gate: false,
            mask_query_edge: true,
            layer_noise: &layer_noise,
        };
        let vars = ModelVars::bind(tape, params, cfg)?;
        let mut task_terms = Vec::with_capacity(batch.len());
        let mut len_dense = Vec::new();
        let mut loads = Vec::new();
        let mut prune_dense = Vec::new();
        for q in batch {
            let out = forward_query(tape, &vars, cfg, self.graph, q, &opts, Some(&mut *rng))?;
            task_terms.push(task_loss(tape, out.psi, q.answer as usize)?);
            if let Some(g) = &out.length_gate {
                len_dense.push(g.dense);
            }
            if let Some(p) = out.load {
                loads.push(p);
            }
            prune_dense.extend(out.prune_gates);
        }
        let stacked = tape.stack(&task_terms)?;
        let summed = tape.sum(stacked);
        let task = tape.scale(summed, 1.0 / batch.len() as f64);
        let (l_len, zero_len) = importance_loss(tape, &len_dense)?;
        let (l_prune, zero_prune) = importance_loss(tape, &prune_dense)?;
        let l_load = load_loss(tape, &loads)?;
        let total = compose_on_tape(
            tape,
            task,
            l_len,
            l_prune,
            l_load,
            self.lambda1,
            self.lambda2,
        )?;

        let mut outcome = BatchOutcome {
            loss: LossBreakdown::compose(
                tape.scalar_value(task),
                tape.scalar_value(l_len),
                tape.scalar_value(l_prune),
                tape.scalar_value(l_load),
                self.lambda1,
                self.lambda2,
            ),
            importance_all_zero: zero_len || zero_prune,
            ..Default::default()
        };
        outcome.loss.total = tape.scalar_value(total);
        for &v in &len_dense {
            add_into(&mut outcome.length_importance, tape.value(v).data());
        }
        for &v in &prune_dense {
            add_into(&mut outcome.prune_importance, tape.value(v).data());
        }
        Ok((total, outcome))
    }
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub params: ParamStore,
    pub view: GraphView<'a>,
    optimizer: Adam,
    averaged: Option<ParamStore>,
    steps: u64,
    rng: SeededRng,
    epochs_done: usize,
    deadline: Option<Instant>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, params: ParamStore, view: GraphView<'a>) -> Result<Self> {
        config.validate()?;
        crate::model::check_shapes(&params, &config.model, view.base().n_relations_base())?;
        let rng = SeededRng::new(config.train.seed).derive("train");
        let optimizer = Adam::new(config.train.lr);
        let averaged = (config.train.average_decay > 0.0).then(|| params.clone());
        Ok(Self {
            config,
            params,
            view,
            optimizer,
            averaged,
            steps: 0,
            rng,
            epochs_done: 0,
            deadline: None,
        })
    }

    /// Stops epochs early once `deadline` passes.
    pub fn set_deadline(&mut self, deadline: Option<Instant>) {
        self.deadline = deadline;
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// The parameters to evaluate: the moving average when enabled,
    /// otherwise the raw parameters.
    pub fn eval_params(&self) -> &ParamStore {
        self.averaged.as_ref().unwrap_or(&self.params)
    }

    /// Decay after `steps` updates, warmed up as `(1 + t) / (10 + t)` so the
    /// initial parameters fade out quickly.
    pub fn average_weight(decay: f64, steps: u64) -> f64 {
        let t = steps as f64;
        decay.min((1.0 + t) / (10.0 + t))
    }

    fn update_average(&mut self) {
        let Some(avg) = self.averaged.as_mut() else {
            return;
        };
        self.steps += 1;
        let d = Self::average_weight(self.config.train.average_decay, self.steps);
        for (name, p) in self.params.iter() {
            let a = avg.get_mut(name).expect("average mirrors the parameters");
            for (x, &y) in a.data_mut().iter_mut().zip(p.data()) {
                *x = d * *x + (1.0 - d) * y;
            }
        }
    }

    /// Builds the batch loss on a fresh tape and returns it with the tape.
    pub fn batch_loss(&mut self, batch: &[Query]) -> Result<(Tape, Var, BatchOutcome)> {
        let sources: Vec<EntityId> = batch.iter().map(|q| q.entity).collect();
        let graph = self.view.for_sources(&sources)?;
        let mut tape = Tape::new();
        let objective = Objective {
            model: &self.config.model,
            lambda1: self.config.train.lambda1,
            lambda2: self.config.train.lambda2,
            graph: &graph,
        };
        let (total, outcome) = objective.build(&mut tape, &self.params, batch, &mut self.rng)?;
        Ok((tape, total, outcome))
    }

    /// Forward, backward and one optimizer step on `batch`.
    pub fn train_batch(
        &mut self,
        batch: &[Query],
        epoch: usize,
        index: usize,
    ) -> Result<BatchOutcome> {
        let (tape, total, mut outcome) = self.batch_loss(batch)?;
        let value = outcome.loss.total;
        if !value.is_finite() {
            return Err(CoreError::Divergence {
                epoch,
                batch: index,
                value,
            });
        }
        let mut grads = tape.backward(total, &self.params)?;
        drop(tape);
        outcome.grad_norm = clip_grad_norm(&mut grads, self.config.train.max_grad_norm);
        if !outcome.grad_norm.is_finite() {
            return Err(CoreError::Divergence {
                epoch,
                batch: index,
                value: outcome.grad_norm,
            });
        }
        self.optimizer.step(&mut self.params, &grads)?;
        self.update_average();
        Ok(outcome)
    }

    /// One pass over `queries` in a seeded shuffled order.
    pub fn train_epoch(&mut self, queries: &[Query]) -> Result<EpochReport> {
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..queries.len()).collect();
        self.rng.shuffle(&mut order);
        let mut report = EpochReport {
            epoch,
            ..Default::default()
        };
        let mut len_imp = Vec::new();
        let mut prune_imp = Vec::new();
        let mut grad_sum = 0.0;
        for (index, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            if self.deadline.is_some_and(|d| Instant::now() >= d) {
                report.truncated = true;
                break;
            }
            let batch: Vec<Query> = chunk.iter().map(|&i| queries[i]).collect();
            let out = self.train_batch(&batch, epoch, index)?;
            report.loss.add_assign(&out.loss.scaled(batch.len() as f64));
            report.batches += 1;
            report.queries += batch.len();
            grad_sum += out.grad_norm;
            add_into(&mut len_imp, &out.length_importance);
            add_into(&mut prune_imp, &out.prune_importance);
        }
        if report.queries > 0 {
            report.loss = report.loss.scaled(1.0 / report.queries as f64);
            report.mean_grad_norm = grad_sum / report.batches as f64;
        }
        if !len_imp.is_empty() {
            report.length_importance_cv = cv_squared_value(&len_imp).sqrt();
        }
        if !prune_imp.is_empty() {
            report.prune_importance_cv = cv_squared_value(&prune_imp).sqrt();
        }
        report.seconds = start.elapsed().as_secs_f64();
        self.epochs_done = epoch;
        Ok(report)
    }
}

/// Appends one JSON object per line.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoreError::io(path, e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| CoreError::io(path, e))
}
