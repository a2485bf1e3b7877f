//! Top-k gating and sparse expert dispatch.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{softmax_in_place, Float, Graph, Tensor, Var};

/// Routing decision for one token at one MoE layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layer: usize,
    /// Index of the sequence within the forward batch.
    pub sequence: usize,
    pub position: usize,
    /// Selected experts, highest logit first.
    pub selected: Vec<usize>,
    /// Gate weight of each selected expert; sums to one.
    pub gates: Vec<f64>,
    /// Router logits over all experts, before masking.
    pub logits: Vec<f64>,
    /// Top-1 expert.
    pub argmax: usize,
}

/// Indices of the `k` largest values, descending. Equal values keep
/// ascending index order, so the lower expert index wins a tie.
pub fn top_k<T: Float>(logits: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top-k with k={k} over {} experts", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "router logits" });
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    idx.truncate(k);
    Ok(idx)
}

/// Selects the top-k experts for a logit vector and returns their softmax
/// weights, normalized over the selected logits only. Unselected experts
/// carry weight zero.
pub fn gate_from_logits<T: Float>(logits: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let idx = top_k(logits, k)?;
    let mut w: Vec<T> = idx.iter().map(|&i| logits[i]).collect();
    softmax_in_place(&mut w);
    Ok((idx, w))
}

/// Gate for a single token: logits `x . W_v` with `router` of shape
/// `[d_model x E]`.
pub fn gate<T: Float>(x: &[T], router: &Tensor<T>, k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let (d, e) = router.dims2();
    if router.shape().len() != 2 || x.len() != d {
        return Err(shape_err(
            "gate",
            format!("token of width {} against router {:?}", x.len(), router.shape()),
        ));
    }
    let mut logits = vec![T::zero(); e];
    for (i, &xv) in x.iter().enumerate() {
        for (l, &w) in logits.iter_mut().zip(&router.data()[i * e..(i + 1) * e]) {
            *l += xv * w;
        }
    }
    gate_from_logits(&logits, k)
}

/// Output of [`sparse_moe`].
pub struct MoeOutput<T> {
    pub output: Var,
    /// Mean full-softmax routing probability per expert (`[E]`, in graph).
    pub mean_prob: Var,
    /// Fraction of tokens whose top-1 expert is each expert.
    pub dispatch: Vec<f64>,
    /// Token-expert evaluations performed; always `k * tokens`.
    pub expert_evals: usize,
    /// `[tokens x k]` selected experts.
    pub selected: Vec<usize>,
    /// `[tokens x k]` gate weights.
    pub gates: Vec<T>,
}

/// Sparse mixture-of-experts combination.
///
/// For every row of `x`, picks the top-`k` columns of `router_logits`
/// (`[tokens x E]`), weights them by a softmax over the selected logits and
/// sums `gate * expert(x)` over the selected experts only. `expert(g, e, xs)`
/// evaluates expert `e` on a gathered `[n x d]` block of rows.
pub fn sparse_moe<T, F>(
    graph: &mut Graph<T>,
    x: Var,
    router_logits: Var,
    k: usize,
    mut expert: F,
) -> Result<MoeOutput<T>>
where
    T: Float,
    F: FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
{
    let shape = graph.shape(router_logits).to_vec();
    if shape.len() != 2 {
        return Err(shape_err("sparse_moe", format!("router logits {shape:?}")));
    }
    let (tokens, n_experts) = (shape[0], shape[1]);
    let x_shape = graph.shape(x).to_vec();
    if x_shape.len() != 2 || x_shape[0] != tokens {
        return Err(shape_err(
            "sparse_moe",
            format!("input {x_shape:?} for {tokens} routed tokens"),
        ));
    }

    let mut selected = Vec::with_capacity(tokens * k);
    for row in graph.value(router_logits).data().chunks(n_experts) {
        selected.extend(top_k(row, k)?);
    }
    let selected_logits = graph.select_cols(router_logits, &selected, k)?;
    let gates = graph.softmax(selected_logits)?;
    let probs = graph.softmax(router_logits)?;
    let mean_prob = graph.mean_rows(probs)?;

    let mut dispatch = vec![0.0; n_experts];
    for t in 0..tokens {
        dispatch[selected[t * k]] += 1.0;
    }
    for f in &mut dispatch {
        *f /= tokens as f64;
    }

    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    for t in 0..tokens {
        for s in 0..k {
            let e = selected[t * k + s];
            rows[e].push(t);
            slots[e].push(t * k + s);
        }
    }

    let mut out = graph.constant(Tensor::zeros(x_shape));
    let mut evals = 0;
    for e in 0..n_experts {
        if rows[e].is_empty() {
            continue;
        }
        let xe = graph.gather_rows(x, &rows[e])?;
        let ye = expert(graph, e, xe)?;
        let ge = graph.gather_elems(gates, &slots[e])?;
        let weighted = graph.mul_rows(ye, ge)?;
        out = graph.scatter_add_rows(out, weighted, &rows[e])?;
        evals += rows[e].len();
    }
    let gate_values = graph.value(gates).data().to_vec();
    Ok(MoeOutput {
        output: out,
        mean_prob,
        dispatch,
        expert_evals: evals,
        selected,
        gates: gate_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_split_evenly_lower_index_first() {
        let (idx, w) = gate_from_logits(&[0.3f64, 0.3], 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn top_two_of_four() {
        let (idx, w) = gate_from_logits(&[1.0f64, 2.0, 3.0, 0.0], 2).unwrap();
        assert_eq!(idx, vec![2, 1]);
        // e^3 / (e^3 + e^2) and its complement
        let hi = 3f64.exp() / (3f64.exp() + 2f64.exp());
        assert!((w[0] - hi).abs() < 1e-15);
        assert!((w[0] - 0.73106).abs() < 1e-4);
        assert!((w[1] - 0.26894).abs() < 1e-4);
    }

    #[test]
    fn top_one_is_argmax_with_unit_weight() {
        let (idx, w) = gate_from_logits(&[0.1f32, -2.0, 0.7, 0.69], 1).unwrap();
        assert_eq!(idx, vec![2]);
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn tie_break_prefers_lower_index() {
        assert_eq!(top_k(&[1.0f64, 5.0, 5.0, 5.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn rejects_bad_k_and_nonfinite() {
        assert!(top_k(&[1.0f64, 2.0], 3).is_err());
        assert!(top_k(&[1.0f64, 2.0], 0).is_err());
        assert!(matches!(top_k(&[1.0f64, f64::NAN], 1), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn single_token_gate_uses_router_product() {
        // x = [1, 2], W_v = [[1, 0, 0], [0, 1, 2]] -> logits [1, 2, 4]
        let router = Tensor::from_f64(vec![2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 2.0]).unwrap();
        let (idx, w) = gate(&[1.0f64, 2.0], &router, 2).unwrap();
        assert_eq!(idx, vec![2, 1]);
        assert!((w[0] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn rigged_router_mixes_scalar_experts() {
        // Experts f0(x) = x and f1(x) = 2x, gate weights forced to (0.25, 0.75)
        // through constant logits (0, ln 3): output is 1.75 x.
        let mut g = Graph::<f64>::new();
        let xs = [0.5, -2.0, 3.0];
        let x = g.constant(Tensor::from_f64(vec![3, 1], &xs).unwrap());
        let l3 = 3f64.ln();
        let logits = g.constant(Tensor::from_f64(vec![3, 2], &[0.0, l3, 0.0, l3, 0.0, l3]).unwrap());
        let out = sparse_moe(&mut g, x, logits, 2, |g, e, xe| match e {
            0 => Ok(xe),
            _ => g.scale(xe, 2.0),
        })
        .unwrap();
        for (y, x) in g.value(out.output).data().iter().zip(xs) {
            assert!((y - 1.75 * x).abs() < 1e-12);
        }
        assert_eq!(out.expert_evals, 6);
        assert_eq!(out.dispatch, vec![0.0, 1.0]);
    }
}
