//! Parameter layout and per-tape bindings.
//!
//! Names: `layer{l}.{rel,attn_w,attn_v,score,prune_experts,prune_noise}` for
//! `l = 1..=L`; `query_rel`; `len_ctx.*` and `prune_ctx.*` (two-layer
//! MLPs from `2d` to `d`); `len_gate.{experts,noise}`; `stop_gate.*`
//! (`2 -> hidden -> 1`).

use pathmoe_autodiff::{ParamStore, SeededRng, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};

/// Expected name and shape of every trainable tensor.
pub fn param_shapes(config: &ModelConfig, n_relations_base: usize) -> Vec<(String, Vec<usize>)> {
    let d = config.dim;
    let da = config.attn_dim;
    let h = config.gate_hidden;
    let mut out = Vec::new();
    for l in 1..=config.layers {
        out.push((format!("layer{l}.rel"), vec![2 * n_relations_base + 1, d]));
        out.push((format!("layer{l}.attn_w"), vec![da, 3 * d]));
        out.push((format!("layer{l}.attn_v"), vec![da]));
        out.push((format!("layer{l}.score"), vec![d]));
        out.push((format!("layer{l}.prune_experts"), vec![3, d]));
        out.push((format!("layer{l}.prune_noise"), vec![3, d]));
    }
    out.push(("query_rel".into(), vec![2 * n_relations_base, d]));
    for ctx in ["len_ctx", "prune_ctx"] {
        out.push((format!("{ctx}.w1"), vec![d, 2 * d]));
        out.push((format!("{ctx}.b1"), vec![d]));
        out.push((format!("{ctx}.w2"), vec![d, d]));
        out.push((format!("{ctx}.b2"), vec![d]));
    }
    out.push(("len_gate.experts".into(), vec![config.n_lengths(), d]));
    out.push(("len_gate.noise".into(), vec![config.n_lengths(), d]));
    out.push(("stop_gate.w1".into(), vec![h, 2]));
    out.push(("stop_gate.b1".into(), vec![h]));
    out.push(("stop_gate.w2".into(), vec![1, h]));
    out.push(("stop_gate.b2".into(), vec![1]));
    out
}

/// Initial bias of the stop gate's output unit, so training starts with
/// the layer gate mostly open.
pub const STOP_GATE_BIAS: f64 = 3.0;

/// Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at 0.
pub fn init_params(config: &ModelConfig, n_relations_base: usize, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = SeededRng::new(seed).derive("init");
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(config, n_relations_base) {
        let is_bias = name.ends_with(".b1") || name.ends_with(".b2");
        if is_bias {
            let fill = if name == "stop_gate.b2" {
                STOP_GATE_BIAS
            } else {
                0.0
            };
            store.insert(name, Tensor::filled(&shape, fill))?;
        } else {
            store.insert_uniform(name, &shape, &mut rng)?;
        }
    }
    Ok(store)
}

/// Names whose stored shape differs from the expected layout, plus missing
/// and unexpected names.
pub fn shape_mismatches(
    store: &ParamStore,
    config: &ModelConfig,
    n_relations_base: usize,
) -> Vec<String> {
    let expected = param_shapes(config, n_relations_base);
    let mut bad = Vec::new();
    for (name, shape) in &expected {
        match store.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => bad.push(format!(
                "{name} (stored {:?}, expected {:?})",
                t.shape(),
                shape
            )),
            None => bad.push(format!("{name} (missing)")),
        }
    }
    for name in store.names() {
        if !expected.iter().any(|(n, _)| n == name) {
            bad.push(format!("{name} (unexpected)"));
        }
    }
    bad
}

pub fn check_shapes(
    store: &ParamStore,
    config: &ModelConfig,
    n_relations_base: usize,
) -> Result<()> {
    let bad = shape_mismatches(store, config, n_relations_base);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CoreError::ShapeMismatch(bad))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: tape.param(store, &format!("{prefix}.w1"))?,
            b1: tape.param(store, &format!("{prefix}.b1"))?,
            w2: tape.param(store, &format!("{prefix}.w2"))?,
            b2: tape.param(store, &format!("{prefix}.b2"))?,
        })
    }

    /// `w2 · relu(w1 · x + b1) + b2` for a rank-1 `x`.
    pub fn apply_vec(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matvec(self.w1, x)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.relu(h);
        let o = tape.matvec(self.w2, h)?;
        Ok(tape.add(o, self.b2)?)
    }

    /// Hidden activations `relu(x · w1ᵀ + b1)` for a rank-2 `x`.
    pub fn hidden_rows(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul_nt(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        Ok(tape.relu(h))
    }

    /// The output layer applied to a rank-1 hidden vector.
    pub fn output_vec(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let o = tape.matvec(self.w2, h)?;
        Ok(tape.add(o, self.b2)?)
    }
}

/// One layer's tensors on a tape, with the relation and query blocks of the
/// attention projection precomputed for every relation id.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub rel: Var,
    pub attn_v: Var,
    pub score: Var,
    /// Hidden-state block of the attention matrix, `[d_a, d]`.
    pub attn_h: Var,
    /// `rel · W_rᵀ`, `[2R + 1, d_a]`.
    pub attn_rel: Var,
    /// `rel · W_qᵀ`, `[2R + 1, d_a]`.
    pub attn_query: Var,
    pub prune_experts: Var,
    pub prune_noise: Var,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    layers: Vec<LayerVars>,
    pub query_rel: Var,
    pub len_ctx: Mlp,
    pub prune_ctx: Mlp,
    pub len_experts: Var,
    pub len_noise: Var,
    pub stop_gate: Mlp,
}

impl ModelVars {
    /// Tensors of layer `l`, counting from 1.
    pub fn layer(&self, l: usize) -> &LayerVars {
        &self.layers[l - 1]
    }

    /// Registers every parameter on `tape`. Call once per tape.
    pub fn bind(tape: &mut Tape, store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let d = config.dim;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            let rel = tape.param(store, &p("rel"))?;
            let attn_w = tape.param(store, &p("attn_w"))?;
            let attn_h = tape.slice_last(attn_w, 0, d)?;
            let w_r = tape.slice_last(attn_w, d, d)?;
            let w_q = tape.slice_last(attn_w, 2 * d, d)?;
            let attn_rel = tape.matmul_nt(rel, w_r)?;
            let attn_query = tape.matmul_nt(rel, w_q)?;
            layers.push(LayerVars {
                rel,
                attn_v: tape.param(store, &p("attn_v"))?,
                score: tape.param(store, &p("score"))?,
                attn_h,
                attn_rel,
                attn_query,
                prune_experts: tape.param(store, &p("prune_experts"))?,
                prune_noise: tape.param(store, &p("prune_noise"))?,
            });
        }
        Ok(Self {
            layers,
            query_rel: tape.param(store, "query_rel")?,
            len_ctx: Mlp::bind(tape, store, "len_ctx")?,
            prune_ctx: Mlp::bind(tape, store, "prune_ctx")?,
            len_experts: tape.param(store, "len_gate.experts")?,
            len_noise: tape.param(store, "len_gate.noise")?,
            stop_gate: Mlp::bind(tape, store, "stop_gate")?,
        })
    }
}
