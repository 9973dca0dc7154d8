//! The Vision Transformer: configuration, named parameters and forward pass.

mod config;
mod model;
mod params;

pub use config::ViTConfig;
pub use model::{
    attention_graph, attention_head, class_repr_graph, class_representation, embed, embed_graph,
    encode, encode_graph, encoder_block, encoder_block_graph, forward, forward_one, logits_graph,
    mlp_graph, msa_graph, multi_head_self_attention, patchify, LN_EPS,
};
pub use params::{
    count_parameters, is_head, layer_param, layout, Init, ModelParams, Param, ParamSpec,
    HEAD_BIAS, HEAD_WEIGHT, INIT_STD,
};
