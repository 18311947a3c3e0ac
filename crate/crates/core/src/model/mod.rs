//! Toy decoder-only transformer, dense or mixture-of-experts.

pub mod backward;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod moe;
pub mod sampling;
pub mod substitute;
pub mod weights;

pub use backward::{lm_loss, lm_loss_and_grad, LmExample};
pub use checkpoint::{load_checkpoint, save_checkpoint, weights_digest};
pub use config::{ModelConfig, MoeConfig};
pub use forward::{
    expert_assignments, forward, forward_steered, next_token_logits, ActivationTap, ForwardOutput,
    PositionPolicy, ResidualSteer, StreamPoint,
};
pub use moe::moe_block_forward;
pub use sampling::{greedy_completions, sample_completion, sample_completion_steered, SamplingConfig};
pub use substitute::{extract_submodule, substitute_weights, FfnPart, Submodule};
pub use weights::{DenseFfn, FeedForward, InitScales, LayerWeights, TransformerWeights};
