//! Length experts: the query context, the gate over path lengths, the
//! weighted score combination and the per-layer continue/stop gate.

use pathmoe_autodiff::{Tape, Tensor, Var};

use crate::error::Result;
use crate::gate::{noisy_top_k, GateOutput};
use crate::kg::{EntityId, RelationId};
use crate::model::{Mlp, ModelVars};
use crate::propagation::LayerState;

/// Added to the mean square before taking the root in [`rms_normalize`].
pub const RMS_EPS: f64 = 1e-6;

/// `x / sqrt(mean(x²) + ε)`.
pub fn rms_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ms = tape.mean(sq);
    let ms = tape.add_const(ms, RMS_EPS);
    let log_ms = tape.log(ms);
    let log_inv = tape.scale(log_ms, -0.5);
    let inv = tape.exp(log_inv);
    Ok(tape.mul_scalar(x, inv)?)
}

/// `c_q = rms(MLP(h(e_q) ∥ query_rel[r_q]))`. The flag is set when the query
/// entity has no row in `state`, in which case its half is zero.
///
/// Hidden states are sums over incoming edges and grow quickly with depth on
/// dense graphs. Without the normalisation the context grows with them during
/// training, the gate logits reach tens, and the softmax over lengths
/// saturates to a single length where the balance terms no longer have a
/// gradient.
pub fn build_query_context(
    tape: &mut Tape,
    vars: &ModelVars,
    state: &LayerState,
    relation: RelationId,
) -> Result<(Var, bool)> {
    let dim = tape.value(vars.query_rel).row_width();
    let (own, missing) = match state.row_of(state.entity) {
        Some(row) => {
            let r = tape.gather_rows(state.hidden, vec![row])?;
            (tape.reshape(r, &[dim])?, false)
        }
        None => (tape.constant(Tensor::zeros(&[dim])), true),
    };
    let q = tape.gather_rows(vars.query_rel, vec![relation as usize])?;
    let q = tape.reshape(q, &[dim])?;
    let x = tape.concat(&[own, q])?;
    let c = vars.len_ctx.apply_vec(tape, x)?;
    Ok((rms_normalize(tape, c)?, missing))
}

/// Noisy top-`k1` gate over the lengths `L_min..=L`; index `i` stands for
/// length `L_min + i`. Ties go to the shorter length.
pub fn length_gate(
    tape: &mut Tape,
    vars: &ModelVars,
    context: Var,
    k1: usize,
    tau: f64,
    noise: Option<&[f64]>,
) -> Result<GateOutput> {
    noisy_top_k(
        tape,
        vars.len_experts,
        vars.len_noise,
        context,
        k1,
        tau,
        noise,
    )
}

/// Scores of one selected length, over the entities it retained.
#[derive(Clone, Debug)]
pub struct LengthScores {
    pub scores: Var,
    pub entities: Vec<EntityId>,
    /// One-element gate weight; `None` means weight 1.
    pub weight: Option<Var>,
}

/// `Ψ(e) = Σ_ℓ g(ℓ) · s_ℓ(e)` over all entities; entities missing at a
/// length contribute 0 there.
pub fn combine_scores(tape: &mut Tape, parts: &[LengthScores], n_entities: usize) -> Result<Var> {
    let mut psi: Option<Var> = None;
    for p in parts {
        let idx = p.entities.iter().map(|&e| e as usize).collect();
        let mut s = tape.scatter_add_rows(p.scores, idx, n_entities)?;
        if let Some(w) = p.weight {
            s = tape.mul_scalar(s, w)?;
        }
        psi = Some(match psi {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(psi.unwrap_or_else(|| tape.constant(Tensor::zeros(&[n_entities]))))
}

/// Soft layer gate `σ((MLP([μ, σ]) + noise) / τ_g)` as a one-element tensor.
/// `noise` is a logistic draw (difference of two Gumbels).
pub fn binary_gate_train(
    tape: &mut Tape,
    mlp: &Mlp,
    mean: Var,
    std: Var,
    tau_gumbel: f64,
    noise: f64,
) -> Result<Var> {
    let x = tape.stack(&[mean, std])?;
    let out = mlp.apply_vec(tape, x)?;
    let noisy = tape.add_const(out, noise);
    let scaled = tape.scale(noisy, 1.0 / tau_gumbel);
    Ok(tape.sigmoid(scaled))
}

/// Hard rule at inference: `false` (stop) iff `|CV| > T` and `ℓ >= L/2`.
/// An undefined CV never stops.
pub fn binary_gate_infer(cv: Option<f64>, layer: usize, max_layers: usize, threshold: f64) -> bool {
    match cv {
        Some(cv) => !(cv.abs() > threshold && 2 * layer >= max_layers),
        None => true,
    }
}
