//! Transformer encoder-decoder for scene graphs: configuration, parameters,
//! forward pass and checkpointing.

mod forward;
mod params;

pub use forward::{softmax_row, ForwardGraph, ForwardOutput, Mode, RtnModel};
pub use params::{
    expected_scalar_count, load_checkpoint, relation_input_width, save_checkpoint, AttnIds,
    Checkpoint, DecLayerIds, EncLayerIds, FfnIds, ModelConfig, NormIds, RelationHeadIds,
    RtnParams, LAYER_NORM_EPS, LEAKY_SLOPE,
};
