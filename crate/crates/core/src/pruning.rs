//! Pruning experts: three per-entity rankings, their gate, union-of-top-K
//! retention, rescoring and the per-layer budget schedule.

use std::collections::BTreeSet;

use pathmoe_autodiff::{dot, norm, sigmoid, Tape, Tensor, Var};

use crate::config::{Expert, SamplingSchedule};
use crate::error::{CoreError, Result};
use crate::gate::{noisy_top_k, GateOutput};
use crate::kg::RelationId;
use crate::model::{LayerVars, ModelVars};
use crate::propagation::LayerState;

/// `wᵀ h` per row.
pub fn phi_scoring(hidden: &Tensor, w: &[f64]) -> Vec<f64> {
    (0..hidden.rows()).map(|i| dot(hidden.row(i), w)).collect()
}

/// Largest attention over each candidate's incoming edges; `-inf` for a
/// candidate with none.
pub fn phi_attention(alpha: &[f64], dst_row: &[usize], n_candidates: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; n_candidates];
    for (&a, &d) in alpha.iter().zip(dst_row) {
        if a > out[d] {
            out[d] = a;
        }
    }
    out
}

/// Cosine between each row and the query-relation embedding; a zero row
/// scores 0.
pub fn phi_semantic(hidden: &Tensor, w: &[f64]) -> Result<Vec<f64>> {
    let wn = norm(w);
    if wn == 0.0 {
        return Err(CoreError::Invalid(
            "semantic expert needs a non-zero query-relation embedding".into(),
        ));
    }
    Ok((0..hidden.rows())
        .map(|i| {
            let row = hidden.row(i);
            let rn = norm(row);
            if rn == 0.0 {
                0.0
            } else {
                dot(row, w) / (rn * wn)
            }
        })
        .collect())
}

/// Mean over frontier rows of `MLP(h(e) ∥ query_rel[r_q])`.
pub fn build_prune_context(
    tape: &mut Tape,
    vars: &ModelVars,
    prev: &LayerState,
    relation: RelationId,
) -> Result<Var> {
    let n = prev.frontier.len();
    let q = tape.gather_rows(vars.query_rel, vec![relation as usize; n])?;
    let x = tape.concat(&[prev.hidden, q])?;
    let h = vars.prune_ctx.hidden_rows(tape, x)?;
    let pooled = tape.mean_rows(h)?;
    vars.prune_ctx.output_vec(tape, pooled)
}

/// Noisy top-`k2` gate over (Sco, Att, Sem).
pub fn prune_gate(
    tape: &mut Tape,
    layer: &LayerVars,
    context: Var,
    k2: usize,
    tau: f64,
    noise: Option<&[f64]>,
) -> Result<GateOutput> {
    noisy_top_k(
        tape,
        layer.prune_experts,
        layer.prune_noise,
        context,
        k2,
        tau,
        noise,
    )
}

/// Retention budget `K^ℓ`: rises from `K_start` to `K_high` before the
/// inflection layer and falls towards `K_low` after it.
pub fn schedule_k(layer: usize, s: &SamplingSchedule) -> usize {
    let l = layer as f64;
    let (ks, kh, kl) = (s.k_start as f64, s.k_high as f64, s.k_low as f64);
    let k = if l < s.inflection {
        ks + (kh - ks) * sigmoid(s.steepness * (l - s.inflection / 2.0))
    } else {
        kl + (kh - kl) * (1.0 - sigmoid(s.steepness * (l - 1.5 * s.inflection)))
    };
    (k.round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneResult {
    /// Rows kept by each selected expert.
    pub per_expert: Vec<(Expert, Vec<usize>)>,
    /// Union of the per-expert sets.
    pub union: Vec<usize>,
    /// `union` plus the rows that must stay, sorted.
    pub retained: Vec<usize>,
}

/// Top `k` rows by score, ties to the smaller row, skipping `-inf`.
pub fn top_k_rows(scores: &[f64], k: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] != f64::NEG_INFINITY)
        .collect();
    rows.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    rows.truncate(k);
    rows.sort_unstable();
    rows
}

/// Union of each selected expert's top `k` rows plus `keep`. `scores` is
/// indexed by [`Expert::index`] and every selected expert must have a
/// score per candidate. With `k >= n_candidates` everything is retained.
pub fn select_entities(
    scores: &[Option<Vec<f64>>; 3],
    selected: &[Expert],
    k: usize,
    n_candidates: usize,
    keep: &[usize],
) -> Result<PruneResult> {
    let mut per_expert = Vec::with_capacity(selected.len());
    let mut union = BTreeSet::new();
    for &e in selected {
        let rows = if k >= n_candidates {
            (0..n_candidates).collect()
        } else {
            let s = scores[e.index()].as_ref().ok_or_else(|| {
                CoreError::Invalid(format!("no scores for selected expert {}", e.name()))
            })?;
            if s.len() != n_candidates {
                return Err(CoreError::Invalid(format!(
                    "expert {} scored {} of {n_candidates} candidates",
                    e.name(),
                    s.len()
                )));
            }
            top_k_rows(s, k)
        };
        union.extend(rows.iter().copied());
        per_expert.push((e, rows));
    }
    let union: Vec<usize> = union.into_iter().collect();
    let mut retained: BTreeSet<usize> = union.iter().copied().collect();
    retained.extend(keep.iter().copied());
    Ok(PruneResult {
        per_expert,
        union,
        retained: retained.into_iter().collect(),
    })
}

/// `s′ = mass · s` on the retained rows; dropped rows are simply absent.
pub fn rescore(tape: &mut Tape, scores: Var, result: &PruneResult, mass: Var) -> Result<Var> {
    let kept = tape.gather_rows(scores, result.retained.clone())?;
    Ok(tape.mul_scalar(kept, mass)?)
}
