//! Deterministic toy stand-ins for a ViT encoder and a decoder-only LM.

mod block;
mod encoder;
mod geometry;
mod lm;
mod weights;

pub use block::{rms_norm, rms_norm_row};
pub use encoder::{encode_patches, encoder_layer_forward, forward_encoder};
pub use geometry::ModelGeometry;
pub use lm::{argmax_token, lm_layer_forward, lm_layer_forward_masked, output_logits};
pub use weights::{BlockWeights, ToyConfig, ToyWeights};
