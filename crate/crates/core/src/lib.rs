//! Knowledge-graph link prediction by query-conditioned path reasoning.
//!
//! Each query `(e_q, r_q, ?)` grows a frontier from `e_q` one hop per layer,
//! computing attention-weighted path representations for every reached
//! entity. A gate over path lengths mixes per-layer scores into the final
//! ranking, and a gate over three pruning rankings keeps the frontier small.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod forward;
pub mod gate;
pub mod kg;
pub mod length;
pub mod loss;
pub mod model;
pub mod optim;
pub mod ppr;
pub mod propagation;
pub mod pruning;
pub mod trainer;
pub mod verify;

pub use config::{Expert, ModelConfig, RunConfig, SamplingSchedule, TrainConfig};
pub use error::{CoreError, Result};
pub use kg::{
    load_dataset, Dataset, EntityId, KnowledgeGraph, LoadOptions, Query, QuerySplit, RelationId,
    Triple, Vocabulary,
};
