//! Desk-scale layered residual network with frozen weights, a planted
//! low-rank teacher, LoRA adapters with exact reverse-mode gradients, and the
//! per-layer profiling and fine-tuning loops that feed the layer card.

mod batch;
mod model;
mod net;
mod profile;
mod train;

pub use batch::Batch;
pub use model::{generate, Nonlinearity, ToyModel, ToyModelSpec, TEACHER_RANK};
pub use net::{
    forward, forward_capture, grad_adapters, layer_costs, loss, teacher_forward, AdapterGrad, Adapters, Capture,
    LowRank, Work,
};
pub use profile::{
    layer_feature_stats, profile_layers, profile_layers_with, profiles_from_csv, profiles_to_csv, GradAggregation, LayerProfile,
    ProfileConfig,
};
pub use train::{finetune, step_work, FinetuneConfig, FinetuneOutcome};
