//! Precomputed per-document states: the retrieval index.

mod format;
mod index;

pub use format::{load_index, read_index, save_index, write_index, INDEX_MAGIC, INDEX_VERSION};
pub use index::{
    layer_subsample, middle_layers, precompute_states, topk_inner_product, DocumentRecord, DocumentStateRecord,
    LayerMask, StateIndex,
};
