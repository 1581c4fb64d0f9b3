//! Noisy top-k expert gating shared by the length and pruning experts.

use pathmoe_autodiff::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// Indices of the `k` largest scores, ties going to the smaller index,
/// returned in ascending index order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Selected experts and their weights.
#[derive(Clone, Debug)]
pub struct GateOutput {
    /// Ascending expert indices.
    pub selected: Vec<usize>,
    /// Softmax weights aligned with `selected`.
    pub weights: Var,
    /// Weights scattered into a length-`n` vector, zero for unselected experts.
    pub dense: Var,
    /// Sum of the selected weights, computed as `total / total`.
    pub mass: Var,
    /// Gate scores after noise; equal to the clean scores without noise.
    pub noisy: Vec<f64>,
    /// The tape node holding `noisy`.
    pub scores: Var,
    /// `E · c`, one per expert.
    pub clean: Var,
    /// `softplus(W_n · c)`, one per expert.
    pub noise_scale: Var,
}

impl GateOutput {
    pub fn weight_values<'a>(&self, tape: &'a Tape) -> &'a [f64] {
        tape.value(self.weights).data()
    }
}

/// Temperature softmax over `scores[selected]`, returning the weights and
/// their sum as separate tape nodes.
pub fn select_softmax(
    tape: &mut Tape,
    scores: Var,
    selected: &[usize],
    tau: f64,
) -> Result<(Var, Var)> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(CoreError::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let picked = tape.gather_rows(scores, selected.to_vec())?;
    let m = tape
        .value(picked)
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_const(picked, -m);
    let scaled = tape.scale(shifted, 1.0 / tau);
    let e = tape.exp(scaled);
    let total = tape.sum(e);
    let weights = tape.div_scalar(e, total)?;
    let mass = tape.div(total, total)?;
    Ok((weights, mass))
}

/// `Q(c) = E c + ε ⊙ softplus(W_n c)`, top-`k` selection and softmax
/// weights. `noise` holds one standard-normal draw per expert; `None`
/// disables the noise term.
pub fn noisy_top_k(
    tape: &mut Tape,
    experts: Var,
    noise_proj: Var,
    context: Var,
    k: usize,
    tau: f64,
    noise: Option<&[f64]>,
) -> Result<GateOutput> {
    let clean = tape.matvec(experts, context)?;
    let n = tape.value(clean).len();
    if k == 0 || k > n {
        return Err(CoreError::Config(format!(
            "gate k={k} must lie in [1, {n}]"
        )));
    }
    let raw_noise = tape.matvec(noise_proj, context)?;
    let noise_scale = tape.softplus(raw_noise);
    let scores = match noise {
        Some(eps) => {
            if eps.len() != n {
                return Err(CoreError::Invalid(format!(
                    "{} noise draws for {n} experts",
                    eps.len()
                )));
            }
            let eps = tape.constant(Tensor::vector(eps.to_vec()));
            let jitter = tape.mul(eps, noise_scale)?;
            tape.add(clean, jitter)?
        }
        None => clean,
    };
    let noisy = tape.value(scores).data().to_vec();
    let selected = top_k(&noisy, k);
    let (weights, mass) = select_softmax(tape, scores, &selected, tau)?;
    let dense = tape.scatter_add_rows(weights, selected.clone(), n)?;
    Ok(GateOutput {
        selected,
        weights,
        dense,
        mass,
        noisy,
        scores,
        clean,
        noise_scale,
    })
}

/// Probability that each expert stays in the top `k` when its own noise is
/// redrawn: `Φ((clean_i − kth_excluding_i) / softplus(W_n c)_i)`, where
/// `kth_excluding_i` is the `k`-th largest noisy score among the other
/// experts; it stays on the tape so gradients reach it. All ones when every expert is always selected.
pub fn load_probability(tape: &mut Tape, gate: &GateOutput, k: usize) -> Result<Var> {
    let n = gate.noisy.len();
    if k >= n {
        return Ok(tape.constant(Tensor::filled(&[n], 1.0)));
    }
    let kth: Vec<usize> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| gate.noisy[b].total_cmp(&gate.noisy[a]).then(a.cmp(&b)));
            others[k - 1]
        })
        .collect();
    let thr = tape.gather_rows(gate.scores, kth)?;
    let margin = tape.sub(gate.clean, thr)?;
    let z = tape.div(margin, gate.noise_scale)?;
    Ok(tape.normal_cdf(z))
}
