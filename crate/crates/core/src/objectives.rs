//! Training objectives: next-token adaptation loss, the two-span task loss,
//! the expert load-balance loss and their combination.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Default balance coefficient.
pub const DEFAULT_ALPHA: f64 = 0.01;

/// Routing statistics of one MoE layer over one forward pass.
#[derive(Clone, Debug)]
pub struct BalanceStats {
    pub layer: usize,
    /// F: fraction of tokens whose top-1 expert is each expert.
    pub dispatch: Vec<f64>,
    /// P: mean full-softmax routing probability per expert.
    pub mean_prob: Vec<f64>,
    pub tokens: usize,
    /// P as a graph node, when the stats came from a forward pass.
    pub prob_var: Option<Var>,
}

impl BalanceStats {
    pub fn n_experts(&self) -> usize {
        self.dispatch.len()
    }

    /// `E * sum_i F_i P_i`
    pub fn loss_value(&self) -> f64 {
        let e = self.n_experts() as f64;
        e * self
            .dispatch
            .iter()
            .zip(&self.mean_prob)
            .map(|(f, p)| f * p)
            .sum::<f64>()
    }
}

/// Per-layer balance loss from plain vectors.
pub fn balance_value(dispatch: &[f64], mean_prob: &[f64]) -> f64 {
    dispatch.len() as f64 * dispatch.iter().zip(mean_prob).map(|(f, p)| f * p).sum::<f64>()
}

/// Sum over layers of `E * sum_i F_i P_i`. Gradient reaches the routers
/// through P only; F is a constant. Stats without a graph node contribute a
/// constant term.
pub fn balance_loss<T: Float>(graph: &mut Graph<T>, stats: &[BalanceStats]) -> Result<Var> {
    if stats.is_empty() {
        return Err(Error::EmptyMask("balance statistics"));
    }
    let mut total: Option<Var> = None;
    for s in stats {
        let e = s.n_experts();
        if s.mean_prob.len() != e || e == 0 {
            return Err(shape_err(
                "balance_loss",
                format!(
                    "layer {}: {} dispatch vs {} probabilities",
                    s.layer,
                    e,
                    s.mean_prob.len()
                ),
            ));
        }
        let p = match s.prob_var {
            Some(v) => v,
            None => graph.constant(Tensor::from_f64(vec![e], &s.mean_prob)?),
        };
        let f = graph.constant(Tensor::from_f64(vec![e], &s.dispatch)?);
        let fp = graph.mul(f, p)?;
        let dot = graph.sum(fp)?;
        let layer = graph.scale(dot, T::lit(e as f64))?;
        total = Some(match total {
            Some(t) => graph.add(t, layer)?,
            None => layer,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `task + alpha * balance`
pub fn combined_loss<T: Float>(graph: &mut Graph<T>, task: Var, balance: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha {alpha} must be a non-negative number")));
    }
    let b = graph.scale(balance, T::lit(alpha))?;
    graph.add(task, b)
}

/// Masked mean next-token NLL. `logits` rows align with `targets`; rows with
/// `mask == false` are excluded.
pub fn adapt_loss<T: Float>(graph: &mut Graph<T>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    adapt_loss_with_count(graph, logits, targets, mask, count)
}

/// As [`adapt_loss`] but divided by `count` instead of this call's own
/// unmasked count, so that micro-batch losses add up to the full-batch mean.
pub fn adapt_loss_with_count<T: Float>(
    graph: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    count: usize,
) -> Result<Var> {
    if count == 0 {
        return Err(Error::EmptyMask("adaptation loss"));
    }
    if mask.len() != targets.len() {
        return Err(shape_err(
            "adapt_loss",
            format!("{} mask entries for {} targets", mask.len(), targets.len()),
        ));
    }
    let w = T::lit(1.0 / count as f64);
    let weights: Vec<T> = mask.iter().map(|&m| if m { w } else { T::zero() }).collect();
    graph.cross_entropy(logits, targets, &weights)
}

/// Role of a target position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanTag {
    Prompt,
    /// The label line.
    Detection,
    /// The explanation text.
    Explanation,
    Padding,
}

/// One packed sequence whose every token carries a span tag. Position `i`
/// is predicted from positions `< i`, so the first tag is never a target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLabeledSequence {
    pub tokens: Vec<usize>,
    pub tags: Vec<SpanTag>,
}

impl SpanLabeledSequence {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.tags.len() {
            return Err(shape_err(
                "span sequence",
                format!("{} tokens, {} tags", self.tokens.len(), self.tags.len()),
            ));
        }
        if self.tokens.len() < 2 {
            return Err(shape_err("span sequence", "needs at least two tokens"));
        }
        Ok(())
    }

    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn target_tags(&self) -> &[SpanTag] {
        &self.tags[1..]
    }

    pub fn count(&self, tag: SpanTag) -> usize {
        self.target_tags().iter().filter(|&&t| t == tag).count()
    }
}

/// Sequences packed into one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLabeledBatch {
    pub sequences: Vec<SpanLabeledSequence>,
}

impl SpanLabeledBatch {
    pub fn new(sequences: Vec<SpanLabeledSequence>) -> Result<Self> {
        for s in &sequences {
            s.validate()?;
        }
        Ok(Self { sequences })
    }

    pub fn inputs(&self) -> Vec<&[usize]> {
        self.sequences.iter().map(|s| s.inputs()).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.sequences
            .iter()
            .flat_map(|s| s.targets().iter().copied())
            .collect()
    }

    pub fn target_tags(&self) -> Vec<SpanTag> {
        self.sequences
            .iter()
            .flat_map(|s| s.target_tags().iter().copied())
            .collect()
    }

    pub fn count(&self, tag: SpanTag) -> usize {
        self.sequences.iter().map(|s| s.count(tag)).sum()
    }

    /// Mask selecting non-prompt, non-padding targets.
    pub fn target_mask(&self) -> Vec<bool> {
        self.target_tags()
            .iter()
            .map(|t| matches!(t, SpanTag::Detection | SpanTag::Explanation))
            .collect()
    }
}

/// Span token counts used to normalize the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanCounts {
    pub detection: usize,
    pub explanation: usize,
}

impl SpanCounts {
    pub fn of(batch: &SpanLabeledBatch) -> Self {
        Self {
            detection: batch.count(SpanTag::Detection),
            explanation: batch.count(SpanTag::Explanation),
        }
    }
}

/// `(mean NLL over explanation tokens + mean NLL over detection tokens) / 2`.
/// `logits` are the packed logits of `batch.inputs()`.
pub fn task_loss<T: Float>(graph: &mut Graph<T>, logits: Var, batch: &SpanLabeledBatch) -> Result<Var> {
    task_loss_with_counts(graph, logits, batch, SpanCounts::of(batch))
}

/// As [`task_loss`] with span means taken over externally supplied counts,
/// for gradient accumulation across micro-batches.
pub fn task_loss_with_counts<T: Float>(
    graph: &mut Graph<T>,
    logits: Var,
    batch: &SpanLabeledBatch,
    counts: SpanCounts,
) -> Result<Var> {
    if counts.detection == 0 {
        return Err(Error::MissingSpan("detection"));
    }
    if counts.explanation == 0 {
        return Err(Error::MissingSpan("explanation"));
    }
    let targets = batch.targets();
    let wd = T::lit(0.5 / counts.detection as f64);
    let we = T::lit(0.5 / counts.explanation as f64);
    let weights: Vec<T> = batch
        .target_tags()
        .iter()
        .map(|t| match t {
            SpanTag::Detection => wd,
            SpanTag::Explanation => we,
            _ => T::zero(),
        })
        .collect();
    graph.cross_entropy(logits, &targets, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(f: &[f64], p: &[f64]) -> BalanceStats {
        BalanceStats {
            layer: 0,
            dispatch: f.to_vec(),
            mean_prob: p.to_vec(),
            tokens: 1,
            prob_var: None,
        }
    }

    #[test]
    fn uniform_balance_is_one() {
        for e in [2usize, 4, 8, 16] {
            let u = vec![1.0 / e as f64; e];
            assert!((balance_value(&u, &u) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_balance() {
        let mut g = Graph::<f64>::new();
        let v = balance_loss(&mut g, &[stats(&[1.0, 0.0], &[0.9, 0.1])]).unwrap();
        assert_eq!(g.value(v).item().unwrap(), 1.8);
    }

    #[test]
    fn layers_are_summed() {
        let mut g = Graph::<f64>::new();
        let u = [0.25; 4];
        let v = balance_loss(&mut g, &[stats(&u, &u), stats(&u, &u), stats(&[1.0, 0.0], &[0.9, 0.1])]).unwrap();
        assert!((g.value(v).item().unwrap() - 3.8).abs() < 1e-12);
        assert!(balance_loss(&mut g, &[]).is_err());
    }

    #[test]
    fn balance_gradient_flows_into_p_only() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64(vec![3], &[0.5, 0.3, 0.2]).unwrap());
        let mut s = stats(&[0.5, 0.5, 0.0], &[0.5, 0.3, 0.2]);
        s.prob_var = Some(p);
        let l = balance_loss(&mut g, &[s]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.5, 1.5, 0.0]);
    }

    #[test]
    fn combined_arithmetic() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(1.8));
        let c = combined_loss(&mut g, t, b, 0.01).unwrap();
        assert!((g.value(c).item().unwrap() - 0.518).abs() < 1e-12);
        let c0 = combined_loss(&mut g, t, b, 0.0).unwrap();
        assert_eq!(g.value(c0).item().unwrap(), 0.5);
        assert!(combined_loss(&mut g, t, b, -1.0).is_err());
    }

    fn log_prob_logits(probs: &[[f64; 3]]) -> Tensor<f64> {
        let data: Vec<f64> = probs.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        Tensor::from_f64(vec![probs.len(), 3], &data).unwrap()
    }

    #[test]
    fn adapt_loss_hand_table() {
        // Target probabilities 0.5, 0.25, 0.125 on three rows.
        let mut g = Graph::<f64>::new();
        let z = g.constant(log_prob_logits(&[
            [0.5, 0.25, 0.25],
            [0.25, 0.25, 0.5],
            [0.125, 0.5, 0.375],
        ]));
        let l = adapt_loss(&mut g, z, &[0, 1, 0], &[true; 3]).unwrap();
        let want = -(0.5f64.ln() + 0.25f64.ln() + 0.125f64.ln()) / 3.0;
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
        assert!((want - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn adapt_loss_uniform_and_perfect() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![4, 7]));
        let l = adapt_loss(&mut g, z, &[0, 3, 6, 2], &[true, true, false, true]).unwrap();
        assert!((g.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-12);
        let z = g.constant(Tensor::from_f64(vec![1, 2], &[0.0, -1e4]).unwrap());
        let l = adapt_loss(&mut g, z, &[0], &[true]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        assert!(matches!(
            adapt_loss(&mut g, z, &[0], &[false]),
            Err(Error::EmptyMask(_))
        ));
    }

    fn seq(tags: &[SpanTag]) -> SpanLabeledSequence {
        SpanLabeledSequence {
            tokens: (0..tags.len()).map(|i| i % 3).collect(),
            tags: tags.to_vec(),
        }
    }

    #[test]
    fn task_loss_averages_spans() {
        use SpanTag::*;
        // Targets: tokens 1, 2, 0, 1 with tags Det, Expl, Expl, Padding.
        let batch = SpanLabeledBatch::new(vec![seq(&[Prompt, Detection, Explanation, Explanation, Padding])]).unwrap();
        let rows = [[0.2, 0.6, 0.2], [0.1, 0.1, 0.8], [0.5, 0.25, 0.25], [0.3, 0.3, 0.4]];
        let mut g = Graph::<f64>::new();
        let z = g.constant(log_prob_logits(&rows));
        let l = task_loss(&mut g, z, &batch).unwrap();
        let a = -0.6f64.ln();
        let b = -(0.8f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((g.value(l).item().unwrap() - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn task_loss_requires_both_spans() {
        use SpanTag::*;
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![2, 3]));
        let only_det = SpanLabeledBatch::new(vec![seq(&[Prompt, Detection, Detection])]).unwrap();
        assert!(matches!(
            task_loss(&mut g, z, &only_det),
            Err(Error::MissingSpan("explanation"))
        ));
        let only_expl = SpanLabeledBatch::new(vec![seq(&[Prompt, Explanation, Prompt])]).unwrap();
        assert!(matches!(
            task_loss(&mut g, z, &only_expl),
            Err(Error::MissingSpan("detection"))
        ));
    }

    #[test]
    fn degenerate_spans_match_adapt_loss() {
        // Each span covers the same token set when the sequence is repeated
        // with swapped tags.
        use SpanTag::*;
        let a = seq(&[Prompt, Detection, Detection, Detection]);
        let b = seq(&[Prompt, Explanation, Explanation, Explanation]);
        let batch = SpanLabeledBatch::new(vec![a, b]).unwrap();
        let rows = [[0.2, 0.6, 0.2], [0.1, 0.1, 0.8], [0.5, 0.25, 0.25]];
        let both: Vec<[f64; 3]> = rows.iter().chain(rows.iter()).copied().collect();
        let mut g = Graph::<f64>::new();
        let z = g.constant(log_prob_logits(&both));
        let t = task_loss(&mut g, z, &batch).unwrap();
        let z1 = g.constant(log_prob_logits(&rows));
        let targets = batch.sequences[0].targets().to_vec();
        let a = adapt_loss(&mut g, z1, &targets, &[true; 3]).unwrap();
        assert!((g.value(t).item().unwrap() - g.value(a).item().unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn equal_f_and_p_never_below_one(raw in proptest::collection::vec(1e-6f64..1.0, 2..12)) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            prop_assert!(balance_value(&p, &p) >= 1.0 - 1e-9);
        }

        #[test]
        fn permutation_invariant(raw in proptest::collection::vec(0.0f64..1.0, 4), rot in 0usize..4) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let f = [0.1, 0.2, 0.3, 0.4];
            let mut pr = p.clone();
            pr.rotate_left(rot);
            let mut fr = f.to_vec();
            fr.rotate_left(rot);
            prop_assert!((balance_value(&f, &p) - balance_value(&fr, &pr)).abs() < 1e-12);
        }
    }
}
