//! Task and balance losses.

#[cfg(test)]
use pathmoe_autodiff::Tensor;
use pathmoe_autodiff::{Tape, Var};
use serde::Serialize;

use crate::error::{CoreError, Result};

/// `−Ψ(answer) + log Σ_e exp Ψ(e)` for one query.
pub fn task_loss(tape: &mut Tape, psi: Var, answer: usize) -> Result<Var> {
    let n = tape.value(psi).len();
    if answer >= n {
        return Err(CoreError::Invalid(format!(
            "answer {answer} outside {n} entities"
        )));
    }
    let lse = tape.logsumexp(psi);
    let target = tape.gather_rows(psi, vec![answer])?;
    let target = tape.reshape(target, &[])?;
    Ok(tape.sub(lse, target)?)
}

/// Squared coefficient of variation (population std over mean). An
/// all-zero vector yields a constant 0 and sets the flag.
pub fn cv_squared(tape: &mut Tape, v: Var) -> (Var, bool) {
    let mean = tape.mean(v);
    if tape.scalar_value(mean) == 0.0 {
        return (tape.scalar(0.0), true);
    }
    let std = tape.std(v);
    let cv = tape.div(std, mean).expect("scalars");
    (tape.mul(cv, cv).expect("scalars"), false)
}

fn sum_vectors(tape: &mut Tape, vectors: &[Var]) -> Result<Var> {
    let mut acc = vectors[0];
    for &v in &vectors[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// `CV(Σ_batch gates)²` over dense gate vectors. Returns 0 for an empty
/// batch; the flag reports an all-zero importance vector.
pub fn importance_loss(tape: &mut Tape, dense_gates: &[Var]) -> Result<(Var, bool)> {
    if dense_gates.is_empty() {
        return Ok((tape.scalar(0.0), false));
    }
    if tape.value(dense_gates[0]).len() < 2 {
        return Err(CoreError::Invalid(
            "importance needs at least two experts".into(),
        ));
    }
    let total = sum_vectors(tape, dense_gates)?;
    Ok(cv_squared(tape, total))
}

/// `CV(Σ_batch P(·, ℓ))²` over per-query selection probabilities.
pub fn load_loss(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    if probs.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    if tape.value(probs[0]).len() < 2 {
        return Err(CoreError::Invalid(
            "load balancing needs at least two lengths".into(),
        ));
    }
    let total = sum_vectors(tape, probs)?;
    Ok(cv_squared(tape, total).0)
}

/// Plain-number squared CV, for telemetry.
pub fn cv_squared_value(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let sd = pathmoe_autodiff::population_std(v);
    (sd / mean).powi(2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub importance_length: f64,
    pub importance_prune: f64,
    pub load: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `task + λ₁(ℒ_l + ℒ_p) + λ₂·load`.
    pub fn compose(
        task: f64,
        importance_length: f64,
        importance_prune: f64,
        load: f64,
        lambda1: f64,
        lambda2: f64,
    ) -> Self {
        Self {
            task,
            importance_length,
            importance_prune,
            load,
            total: task + lambda1 * (importance_length + importance_prune) + lambda2 * load,
        }
    }

    pub fn add_assign(&mut self, o: &LossBreakdown) {
        self.task += o.task;
        self.importance_length += o.importance_length;
        self.importance_prune += o.importance_prune;
        self.load += o.load;
        self.total += o.total;
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            task: self.task * c,
            importance_length: self.importance_length * c,
            importance_prune: self.importance_prune * c,
            load: self.load * c,
            total: self.total * c,
        }
    }
}

/// The same composition as [`LossBreakdown::compose`], on the tape.
pub fn compose_on_tape(
    tape: &mut Tape,
    task: Var,
    l_len: Var,
    l_prune: Var,
    load: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let balance = tape.add(l_len, l_prune)?;
    let balance = tape.scale(balance, lambda1);
    let load = tape.scale(load, lambda2);
    let t = tape.add(task, balance)?;
    Ok(tape.add(t, load)?)
}
