use super::config::{FfnStyle, ModelConfig};
use super::transformer::{Architecture, Transformer};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Builds an `E`-expert, top-`k` model from a trained dense model. Every
/// expert of layer `l` is a copy of the dense FFN of layer `l`, all other
/// weights are copied and frozen, and routers are drawn from N(0, 0.02)
/// with `router_seed`.
pub fn upcycle_from_dense<T: Float>(
    dense: &Transformer<T>,
    total_experts: usize,
    active_experts: usize,
    router_seed: u64,
) -> Result<Transformer<T>> {
    if dense.is_moe() {
        return Err(Error::Config(
            "upcycle source is already a mixture-of-experts model".into(),
        ));
    }
    let config = dense.config().clone().with_experts(total_experts, active_experts);
    let mut moe = Transformer::<T>::build(config, Architecture::Moe, router_seed)?;

    for p in dense.params().iter() {
        if let Some(dst) = moe.params_mut().by_name_mut(&p.name) {
            dst.tensor = p.tensor.clone();
        }
    }
    for (l, names) in dense.parts_for_upcycle() {
        for e in 0..total_experts {
            let targets = moe.expert_param_names(l, e).expect("moe layer");
            for (src, dst) in names.iter().zip(&targets) {
                let t = dense.params().by_name(src).expect("dense ffn").tensor.clone();
                moe.params_mut().by_name_mut(dst).expect("expert").tensor = t;
            }
        }
    }
    moe.freeze_non_moe();
    Ok(moe)
}

/// Parameters of one feed-forward network (one expert).
pub fn ffn_params(config: &ModelConfig) -> usize {
    let (d, ff) = (config.d_model, config.d_ff);
    match config.ffn_style {
        FfnStyle::GatedThreeMatrix => 3 * d * ff,
        FfnStyle::TwoMatrix => 2 * d * ff + ff + d,
    }
}

/// `(total, activated)` parameter counts of the mixture-of-experts model
/// described by `config`. Activated counts every non-expert parameter,
/// `k` experts per layer and the routers.
pub fn count_parameters(config: &ModelConfig) -> (u64, u64) {
    let c = config;
    let d = c.d_model as u64;
    let kv = (c.n_kv_heads * c.head_dim()) as u64;
    let attn = 2 * d * d + 2 * d * kv;
    let norms = 2 * 2 * d;
    let router = d * c.total_experts as u64;
    let expert = ffn_params(c) as u64;
    let embed = (c.vocab_size as u64 + c.max_seq_len as u64) * d;
    let head = if c.tie_embeddings { 0 } else { c.vocab_size as u64 * d };
    let shared = embed + head + 2 * d + c.n_layers as u64 * (attn + norms + router);
    let layers = c.n_layers as u64;
    (
        shared + layers * c.total_experts as u64 * expert,
        shared + layers * c.active_experts as u64 * expert,
    )
}
