//! Attention primitives and the layers the encoders are assembled from.

mod functional;
mod layers;
mod positional;

pub use functional::{
    additive_attention_pool, dropout_gate, multi_head_attention, residual_layer_norm,
    scaled_dot_attention,
};
pub use layers::{
    AdditivePool, FeedForward, Linear, MultiHeadAttention, ResidualNorm, TransformerLayer,
};
pub use positional::sinusoidal_pe;

/// Joins a parameter-name prefix and a local name with a dot.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
