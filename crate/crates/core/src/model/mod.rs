//! Decoder-only transformer with optional sparse mixture-of-experts
//! feed-forward layers.

pub mod config;
pub mod generate;
pub mod moe;
pub mod params;
pub mod transformer;
pub mod upcycle;

pub use config::{FfnStyle, ModelConfig};
pub use generate::{generate, Decoding, GenerateOptions, Generation};
pub use moe::{gate, gate_from_logits, sparse_moe, top_k, MoeOutput, RoutingTrace};
pub use params::{Param, ParamId, ParamStore};
pub use transformer::{is_moe_param, Architecture, ForwardOptions, ForwardOutput, Transformer};
pub use upcycle::{count_parameters, ffn_params, upcycle_from_dense};
