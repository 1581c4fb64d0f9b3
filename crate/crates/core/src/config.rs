//! Run configuration and its flat `key=value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{CoreError, Result};

/// The three pruning experts, in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Expert {
    Sco,
    Att,
    Sem,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Sco, Expert::Att, Expert::Sem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Expert::Sco => "Sco",
            Expert::Att => "Att",
            Expert::Sem => "Sem",
        }
    }
}

impl FromStr for Expert {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sco" | "score" | "scoring" => Ok(Expert::Sco),
            "att" | "attention" => Ok(Expert::Att),
            "sem" | "semantic" => Ok(Expert::Sem),
            _ => Err(CoreError::Config(format!(
                "unknown pruning expert `{s}` (Sco, Att, Sem)"
            ))),
        }
    }
}

/// Sigmoid-shaped per-layer retention budget.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSchedule {
    pub k_start: usize,
    pub k_high: usize,
    pub k_low: usize,
    pub inflection: f64,
    pub steepness: f64,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        Self {
            k_start: 60,
            k_high: 200,
            k_low: 100,
            inflection: 3.0,
            steepness: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub attn_dim: usize,
    /// Maximum path length `L`.
    pub layers: usize,
    /// Shortest path length with an expert, `L_min`.
    pub min_length: usize,
    pub k1: usize,
    pub k2: usize,
    pub tau: f64,
    pub tau_gumbel: f64,
    pub cv_threshold: f64,
    pub gate_hidden: usize,
    pub schedule: SamplingSchedule,
    pub enable_prune: bool,
    pub enable_length_moe: bool,
    /// Hard stop rule at inference.
    pub early_stop: bool,
    /// Forces the pruning gate to one fixed expert.
    pub single_expert: Option<Expert>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            attn_dim: 5,
            layers: 4,
            min_length: 2,
            k1: 2,
            k2: 2,
            tau: 1.0,
            tau_gumbel: 1.0,
            cv_threshold: 100.0,
            gate_hidden: 16,
            schedule: SamplingSchedule::default(),
            enable_prune: true,
            enable_length_moe: true,
            early_stop: true,
            single_expert: None,
        }
    }
}

impl ModelConfig {
    pub fn n_lengths(&self) -> usize {
        self.layers + 1 - self.min_length
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.dim == 0 || self.attn_dim == 0 || self.gate_hidden == 0 {
            return bad("dim, attn_dim and gate_hidden must be positive".into());
        }
        if self.min_length == 0 || self.min_length > self.layers {
            return bad(format!(
                "need 1 <= L_min <= L, got L_min={} L={}",
                self.min_length, self.layers
            ));
        }
        if self.k1 == 0 || self.k1 > self.n_lengths() {
            return bad(format!(
                "k1={} must lie in [1, {}]",
                self.k1,
                self.n_lengths()
            ));
        }
        if !(1..=3).contains(&self.k2) {
            return bad(format!("k2={} must lie in [1, 3]", self.k2));
        }
        if [self.tau, self.tau_gumbel]
            .iter()
            .any(|x| x.is_nan() || *x <= 0.0)
        {
            return bad("tau and tau_gumbel must be positive".into());
        }
        let s = &self.schedule;
        if s.k_low > s.k_high || s.k_start > s.k_high {
            return bad(format!(
                "schedule needs K_low <= K_high and K_start <= K_high, got {}/{}/{}",
                s.k_start, s.k_high, s.k_low
            ));
        }
        if s.inflection.is_nan() || s.inflection <= 0.0 {
            return bad("inflection_layer must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    /// Decay of the moving average of the parameters that validation,
    /// checkpoints and test use; 0 evaluates the raw parameters.
    pub average_decay: f64,
    /// Wall-clock budget in seconds; 0 means unlimited.
    pub time_budget: f64,
    /// Validate on at most this many queries per epoch; 0 means all.
    pub valid_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-3,
            lambda2: 1e-4,
            lr: 5e-3,
            epochs: 10,
            batch_size: 16,
            seed: 1,
            max_grad_norm: 10.0,
            average_decay: 0.9995,
            time_budget: 0.0,
            valid_limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub enable_ppr: bool,
    pub ppr_alpha: f64,
    pub ppr_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data/umls"),
            out_dir: PathBuf::from("runs/latest"),
            enable_ppr: false,
            ppr_alpha: 0.85,
            ppr_budget: 1000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoreError::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(CoreError::Config(format!(
            "cannot parse `{value}` as a boolean for key `{key}`"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "dim" | "d" => m.dim = parse(key, value)?,
            "attn_dim" => m.attn_dim = parse(key, value)?,
            "L" | "layers" => m.layers = parse(key, value)?,
            "L_min" | "min_length" => m.min_length = parse(key, value)?,
            "k1" => m.k1 = parse(key, value)?,
            "k2" => m.k2 = parse(key, value)?,
            "tau" => m.tau = parse(key, value)?,
            "tau_gumbel" => m.tau_gumbel = parse(key, value)?,
            "cv_threshold_T" | "cv_threshold" => m.cv_threshold = parse(key, value)?,
            "gate_hidden" => m.gate_hidden = parse(key, value)?,
            "K_start" => m.schedule.k_start = parse(key, value)?,
            "K_high" => m.schedule.k_high = parse(key, value)?,
            "K_low" => m.schedule.k_low = parse(key, value)?,
            "inflection_layer" => m.schedule.inflection = parse(key, value)?,
            "steepness_a" => m.schedule.steepness = parse(key, value)?,
            "enable_prune" => m.enable_prune = parse_bool(key, value)?,
            "enable_length_moe" => m.enable_length_moe = parse_bool(key, value)?,
            "early_stop" => m.early_stop = parse_bool(key, value)?,
            "single_expert" => {
                m.single_expert = match value {
                    "" | "none" => None,
                    v => Some(v.parse()?),
                }
            }
            "lambda1" => t.lambda1 = parse(key, value)?,
            "lambda2" => t.lambda2 = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "max_grad_norm" => t.max_grad_norm = parse(key, value)?,
            "average_decay" => t.average_decay = parse(key, value)?,
            "time_budget" => t.time_budget = parse(key, value)?,
            "valid_limit" => t.valid_limit = parse(key, value)?,
            "data" => self.data_dir = PathBuf::from(value),
            "out" => self.out_dir = PathBuf::from(value),
            "enable_ppr" => self.enable_ppr = parse_bool(key, value)?,
            "ppr_alpha" => self.ppr_alpha = parse(key, value)?,
            "ppr_budget" => self.ppr_budget = parse(key, value)?,
            _ => {
                return Err(CoreError::Config(format!(
                    "unknown configuration key `{key}`"
                )))
            }
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected key=value, got `{raw}`", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CoreError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if [t.lr, t.lambda1, t.lambda2]
            .iter()
            .any(|x| x.is_nan() || *x < 0.0)
        {
            return Err(CoreError::Config(
                "lr, lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.average_decay) {
            return Err(CoreError::Config(format!(
                "average_decay={} must lie in [0, 1)",
                t.average_decay
            )));
        }
        if !(self.ppr_alpha > 0.0 && self.ppr_alpha < 1.0) {
            return Err(CoreError::Config(format!(
                "ppr_alpha={} must lie in (0, 1)",
                self.ppr_alpha
            )));
        }
        Ok(())
    }

    /// Canonical `key=value` rendering; `apply_text` on it reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &m.schedule;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("dim", m.dim.to_string());
        kv("attn_dim", m.attn_dim.to_string());
        kv("L", m.layers.to_string());
        kv("L_min", m.min_length.to_string());
        kv("k1", m.k1.to_string());
        kv("k2", m.k2.to_string());
        kv("tau", format!("{:?}", m.tau));
        kv("tau_gumbel", format!("{:?}", m.tau_gumbel));
        kv("cv_threshold_T", format!("{:?}", m.cv_threshold));
        kv("gate_hidden", m.gate_hidden.to_string());
        kv("K_start", s.k_start.to_string());
        kv("K_high", s.k_high.to_string());
        kv("K_low", s.k_low.to_string());
        kv("inflection_layer", format!("{:?}", s.inflection));
        kv("steepness_a", format!("{:?}", s.steepness));
        kv("enable_prune", m.enable_prune.to_string());
        kv("enable_length_moe", m.enable_length_moe.to_string());
        kv("early_stop", m.early_stop.to_string());
        kv(
            "single_expert",
            m.single_expert
                .map_or("none".into(), |e| e.name().to_string()),
        );
        kv("lambda1", format!("{:?}", t.lambda1));
        kv("lambda2", format!("{:?}", t.lambda2));
        kv("lr", format!("{:?}", t.lr));
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("max_grad_norm", format!("{:?}", t.max_grad_norm));
        kv("average_decay", format!("{:?}", t.average_decay));
        kv("time_budget", format!("{:?}", t.time_budget));
        kv("valid_limit", t.valid_limit.to_string());
        kv("data", self.data_dir.display().to_string());
        kv("out", self.out_dir.display().to_string());
        kv("enable_ppr", self.enable_ppr.to_string());
        kv("ppr_alpha", format!("{:?}", self.ppr_alpha));
        kv("ppr_budget", self.ppr_budget.to_string());
        out
    }
}
