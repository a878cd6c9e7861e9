//! The frozen base transformer, low-rank adapters attached to its query and
//! value projections, and the merged forward pass
//! `y = W₀x + Σ_k (alpha/r)·B_k A_k x` at each adapted site.

mod adapter;
mod base;
pub mod checkpoint;
mod decode;
mod forward;

pub use adapter::{
    init_adapter, AdapterModule, AdapterSet, AdapterStack, InitSnapshot, LoraConfig, Projection, Site,
};
pub use base::{BaseModel, LayerWeights, ModelConfig};
pub use checkpoint::{load_adapters, load_adapters_for, load_base, save_adapters, save_base};
pub use decode::{argmax, greedy_decode, greedy_decode_batch, greedy_with};
pub use forward::{
    batch_loss, forward, forward_batch, full_sequence, loss, prompt_sequence, site_inputs, tokens, Batch,
};
pub(crate) use forward::{bind_adapters, bind_base, forward_on_tape};
