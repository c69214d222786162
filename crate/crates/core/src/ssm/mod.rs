//! The scalar-gated state-space language model.

mod checkpoint;
mod config;
mod dual;
mod loss;
mod params;
mod scan;
mod state;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Precision};
pub use dual::{
    decay_mask, decay_masks, decomposed_output, ssd_attention_form, unrolled_output, DecompositionResult,
    LayerDecomposition, MAX_DUAL_LEN,
};
pub use loss::{
    loss_and_param_gradients, loss_and_state_gradient, param_gradients, sequence_loss, state_gradient, LossReport,
};
pub use params::{LayerParams, ModelParams, ParamTensors, INITIAL_DECAY_BIAS};
pub use scan::{forward_scan, ScanOutput};
pub use state::StateStack;
