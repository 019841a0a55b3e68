//! Transformer building blocks shared by the audio encoder, the donor
//! decoder, the Q-Former and the teacher LM.

mod layers;
mod params;

pub use layers::{
    build_stack, run_stack, sinusoidal_positions, AttentionBlock, CrossBlock, FeedForward, LayerSpec, Linear, Norm,
    TransformerLayer, EMBED_INIT_STD, LN_EPS,
};
pub use params::{Binding, ParamId, ParamStore};

#[cfg(test)]
mod tests;
