use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{FfnStyle, ModelConfig};
use super::moe::{sparse_moe, RoutingTrace};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::objectives::BalanceStats;
use crate::tensor::{AttentionLayout, Float, Graph, Tensor, Var};

/// Standard deviation of weight and router initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Dense,
    Moe,
}

#[derive(Clone, Debug)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Clone, Debug)]
struct AttentionWeights {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
enum Ffn {
    Gated {
        gate: ParamId,
        up: ParamId,
        down: ParamId,
    },
    Plain {
        w_in: ParamId,
        b_in: ParamId,
        w_out: ParamId,
        b_out: ParamId,
    },
}

#[derive(Clone, Debug)]
struct MoeWeights {
    experts: Vec<Ffn>,
    router: ParamId,
}

#[derive(Clone, Debug)]
enum FeedForward {
    Dense(Ffn),
    Moe(MoeWeights),
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    attn: AttentionWeights,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Record gradients for trainable parameters.
    pub grad: bool,
    /// Emit one [`RoutingTrace`] per token per MoE layer.
    pub traces: bool,
}

pub struct ForwardOutput {
    /// `[total tokens x vocab]`, sequences packed in input order.
    pub logits: Var,
    /// Bound parameter handles, aligned with the parameter store.
    pub params: Vec<Var>,
    pub traces: Vec<RoutingTrace>,
    /// One entry per MoE layer.
    pub balance: Vec<BalanceStats>,
    pub expert_evals: usize,
    /// First packed row of each sequence.
    pub offsets: Vec<usize>,
}

enum InitKind {
    Normal(f64),
    Ones,
    Zeros,
}

struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    fn make<T: Float>(&mut self, shape: Vec<usize>, kind: InitKind) -> Tensor<T> {
        match kind {
            InitKind::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
                Tensor::new(shape, data).expect("shape matches")
            }
            InitKind::Ones => Tensor::full(shape, T::one()),
            InitKind::Zeros => Tensor::zeros(shape),
        }
    }
}

/// Decoder-only transformer. Each block computes
/// `x' = MSA(LN(x)) + x` then `x = FF(LN(x')) + x'`, where `FF` is a dense
/// feed-forward network or a sparse mixture-of-experts layer.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    lm_head: Option<ParamId>,
}

impl<T: Float> Transformer<T> {
    pub fn dense(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Architecture::Dense, seed)
    }

    /// Mixture-of-experts model with independently initialized experts.
    pub fn moe(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Architecture::Moe, seed)
    }

    pub fn build(config: ModelConfig, arch: Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut params = ParamStore::new();
        let d = config.d_model;
        let hd = config.head_dim();
        let kv = config.n_kv_heads * hd;
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();

        let tok_emb = params.add(
            "tok_emb".into(),
            init.make(vec![config.vocab_size, d], InitKind::Normal(INIT_STD)),
        );
        let pos_emb = params.add(
            "pos_emb".into(),
            init.make(vec![config.max_seq_len, d], InitKind::Normal(INIT_STD)),
        );

        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("blocks.{l}");
            let ln1 = add_norm(&mut params, &mut init, &format!("{p}.ln1"), d);
            let attn = AttentionWeights {
                wq: params.add(
                    format!("{p}.attn.wq"),
                    init.make(vec![d, d], InitKind::Normal(INIT_STD)),
                ),
                wk: params.add(
                    format!("{p}.attn.wk"),
                    init.make(vec![d, kv], InitKind::Normal(INIT_STD)),
                ),
                wv: params.add(
                    format!("{p}.attn.wv"),
                    init.make(vec![d, kv], InitKind::Normal(INIT_STD)),
                ),
                wo: params.add(
                    format!("{p}.attn.wo"),
                    init.make(vec![d, d], InitKind::Normal(resid_std)),
                ),
            };
            let ln2 = add_norm(&mut params, &mut init, &format!("{p}.ln2"), d);
            let ff = match arch {
                Architecture::Dense => {
                    FeedForward::Dense(add_ffn(&mut params, &mut init, &format!("{p}.ffn"), &config, resid_std))
                }
                Architecture::Moe => {
                    let experts = (0..config.total_experts)
                        .map(|e| {
                            add_ffn(
                                &mut params,
                                &mut init,
                                &format!("{p}.moe.expert{e}"),
                                &config,
                                resid_std,
                            )
                        })
                        .collect();
                    let router = params.add(
                        format!("{p}.moe.router"),
                        init.make(vec![d, config.total_experts], InitKind::Normal(INIT_STD)),
                    );
                    FeedForward::Moe(MoeWeights { experts, router })
                }
            };
            blocks.push(Block { ln1, attn, ln2, ff });
        }
        let ln_f = add_norm(&mut params, &mut init, "ln_f", d);
        let lm_head = (!config.tie_embeddings).then(|| {
            params.add(
                "lm_head".into(),
                init.make(vec![d, config.vocab_size], InitKind::Normal(INIT_STD)),
            )
        });

        Ok(Self {
            config,
            arch,
            params,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn is_moe(&self) -> bool {
        self.arch == Architecture::Moe
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Float>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            arch: self.arch,
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            ln_f: self.ln_f.clone(),
            lm_head: self.lm_head,
        }
    }

    /// Freezes everything outside the MoE layers (embeddings, attention,
    /// layer norms, output projection); experts and routers stay trainable.
    pub fn freeze_non_moe(&mut self) {
        self.params.set_frozen_where(|name| !is_moe_param(name));
    }

    pub fn unfreeze_all(&mut self) {
        self.params.set_frozen_where(|_| false);
    }

    /// Freezes every parameter except the routers.
    pub fn train_routers_only(&mut self) {
        self.params.set_frozen_where(|name| !name.ends_with(".moe.router"));
    }

    fn check_tokens(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Config("empty token sequence".into()));
        }
        if seq.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Packed forward pass over independent sequences.
    pub fn forward(&self, graph: &mut Graph<T>, sequences: &[&[usize]], opts: ForwardOptions) -> Result<ForwardOutput> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(sequences.len());
        let mut seq_of_row = Vec::new();
        for (s, seq) in sequences.iter().enumerate() {
            self.check_tokens(seq)?;
            segments.push((ids.len(), seq.len()));
            ids.extend_from_slice(seq);
            positions.extend(0..seq.len());
            seq_of_row.extend(std::iter::repeat_n(s, seq.len()));
        }
        if ids.is_empty() {
            return Err(Error::Config("forward called without sequences".into()));
        }
        let layout = AttentionLayout {
            n_heads: self.config.n_heads,
            n_kv_heads: self.config.n_kv_heads,
            head_dim: self.config.head_dim(),
            segments: segments.clone(),
        };

        let vars = self.params.bind(graph, opts.grad);
        let v = |id: ParamId| vars[id.0];
        let tok = graph.embedding(v(self.tok_emb), &ids)?;
        let pos = graph.embedding(v(self.pos_emb), &positions)?;
        let mut x = graph.add(tok, pos)?;

        let mut traces = Vec::new();
        let mut balance = Vec::new();
        let mut expert_evals = 0;
        for (l, block) in self.blocks.iter().enumerate() {
            x = self.attention_sublayer(graph, &vars, block, x, &layout)?;
            let h = graph.layer_norm(x, v(block.ln2.scale), v(block.ln2.shift))?;
            let f = match &block.ff {
                FeedForward::Dense(ffn) => ffn_forward(graph, &vars, ffn, h)?,
                FeedForward::Moe(moe) => {
                    let logits = graph.matmul(h, v(moe.router))?;
                    let out = sparse_moe(graph, h, logits, self.config.active_experts, |g, e, xe| {
                        ffn_forward(g, &vars, &moe.experts[e], xe)
                    })?;
                    if opts.traces {
                        let k = self.config.active_experts;
                        let n_e = self.config.total_experts;
                        let logit_values = graph.value(logits).data();
                        for (row, &seq) in seq_of_row.iter().enumerate() {
                            let selected = out.selected[row * k..(row + 1) * k].to_vec();
                            traces.push(RoutingTrace {
                                layer: l,
                                sequence: seq,
                                position: positions[row],
                                argmax: selected[0],
                                selected,
                                gates: out.gates[row * k..(row + 1) * k].iter().map(|g| g.as_f64()).collect(),
                                logits: logit_values[row * n_e..(row + 1) * n_e]
                                    .iter()
                                    .map(|g| g.as_f64())
                                    .collect(),
                            });
                        }
                    }
                    expert_evals += out.expert_evals;
                    balance.push(BalanceStats {
                        layer: l,
                        mean_prob: graph.value(out.mean_prob).to_f64_vec(),
                        dispatch: out.dispatch,
                        tokens: ids.len(),
                        prob_var: Some(out.mean_prob),
                    });
                    out.output
                }
            };
            x = graph.add(x, f)?;
        }
        let h = graph.layer_norm(x, v(self.ln_f.scale), v(self.ln_f.shift))?;
        let logits = match self.lm_head {
            Some(head) => graph.matmul(h, v(head))?,
            None => graph.matmul_nt(h, v(self.tok_emb))?,
        };
        Ok(ForwardOutput {
            logits,
            params: vars,
            traces,
            balance,
            expert_evals,
            offsets: segments.iter().map(|s| s.0).collect(),
        })
    }

    fn attention_sublayer(
        &self,
        graph: &mut Graph<T>,
        vars: &[Var],
        block: &Block,
        x: Var,
        layout: &AttentionLayout,
    ) -> Result<Var> {
        let v = |id: ParamId| vars[id.0];
        let h = graph.layer_norm(x, v(block.ln1.scale), v(block.ln1.shift))?;
        let q = graph.matmul(h, v(block.attn.wq))?;
        let k = graph.matmul(h, v(block.attn.wk))?;
        let val = graph.matmul(h, v(block.attn.wv))?;
        let a = graph.causal_attention(q, k, val, layout.clone())?;
        let o = graph.matmul(a, v(block.attn.wo))?;
        graph.add(o, x)
    }

    /// `MSA(LN(x)) + x` for block `layer` on a single sequence `x` of shape
    /// `[L x d_model]`.
    pub fn attention_block(&self, graph: &mut Graph<T>, layer: usize, x: Var) -> Result<Var> {
        let shape = graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(crate::error::shape_err(
                "attention_block",
                format!("input {shape:?} for d_model {}", self.config.d_model),
            ));
        }
        if shape[0] > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: shape[0],
                max: self.config.max_seq_len,
            });
        }
        let block = self.blocks.get(layer).ok_or(Error::Index {
            what: "layers",
            index: layer,
            size: self.blocks.len(),
        })?;
        let vars = self.params.bind(graph, false);
        let layout = AttentionLayout {
            n_heads: self.config.n_heads,
            n_kv_heads: self.config.n_kv_heads,
            head_dim: self.config.head_dim(),
            segments: vec![(0, shape[0])],
        };
        self.attention_sublayer(graph, &vars, block, x, &layout)
    }

    /// Logits `[L x vocab]` and routing traces for one sequence, without
    /// gradients.
    pub fn logits(&self, tokens: &[usize]) -> Result<(Tensor<T>, Vec<RoutingTrace>)> {
        let mut g = Graph::new();
        let out = self.forward(
            &mut g,
            &[tokens],
            ForwardOptions {
                grad: false,
                traces: true,
            },
        )?;
        Ok((g.value(out.logits).clone(), out.traces))
    }

    pub(crate) fn parts_for_upcycle(&self) -> Vec<(usize, Vec<String>)> {
        // (layer, names of dense FFN tensors) for each block.
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(l, b)| match &b.ff {
                FeedForward::Dense(ffn) => Some((
                    l,
                    ffn_ids(ffn)
                        .into_iter()
                        .map(|id| self.params.param(id.0).name.clone())
                        .collect(),
                )),
                FeedForward::Moe(_) => None,
            })
            .collect()
    }

    /// Names of the expert tensors of layer `l`, expert `e`, in the same order
    /// as the dense FFN tensor names.
    pub(crate) fn expert_param_names(&self, l: usize, e: usize) -> Option<Vec<String>> {
        match &self.blocks.get(l)?.ff {
            FeedForward::Moe(m) => Some(
                ffn_ids(m.experts.get(e)?)
                    .into_iter()
                    .map(|id| self.params.param(id.0).name.clone())
                    .collect(),
            ),
            FeedForward::Dense(_) => None,
        }
    }
}

pub fn is_moe_param(name: &str) -> bool {
    name.contains(".moe.")
}

fn ffn_ids(ffn: &Ffn) -> Vec<ParamId> {
    match *ffn {
        Ffn::Gated { gate, up, down } => vec![gate, up, down],
        Ffn::Plain {
            w_in,
            b_in,
            w_out,
            b_out,
        } => vec![w_in, b_in, w_out, b_out],
    }
}

fn add_norm<T: Float>(params: &mut ParamStore<T>, init: &mut Initializer, prefix: &str, d: usize) -> Norm {
    Norm {
        scale: params.add(format!("{prefix}.scale"), init.make(vec![d], InitKind::Ones)),
        shift: params.add(format!("{prefix}.shift"), init.make(vec![d], InitKind::Zeros)),
    }
}

fn add_ffn<T: Float>(
    params: &mut ParamStore<T>,
    init: &mut Initializer,
    prefix: &str,
    config: &ModelConfig,
    resid_std: f64,
) -> Ffn {
    let (d, ff) = (config.d_model, config.d_ff);
    match config.ffn_style {
        FfnStyle::GatedThreeMatrix => Ffn::Gated {
            gate: params.add(
                format!("{prefix}.w_gate"),
                init.make(vec![d, ff], InitKind::Normal(INIT_STD)),
            ),
            up: params.add(
                format!("{prefix}.w_up"),
                init.make(vec![d, ff], InitKind::Normal(INIT_STD)),
            ),
            down: params.add(
                format!("{prefix}.w_down"),
                init.make(vec![ff, d], InitKind::Normal(resid_std)),
            ),
        },
        FfnStyle::TwoMatrix => Ffn::Plain {
            w_in: params.add(
                format!("{prefix}.w_in"),
                init.make(vec![d, ff], InitKind::Normal(INIT_STD)),
            ),
            b_in: params.add(format!("{prefix}.b_in"), init.make(vec![ff], InitKind::Zeros)),
            w_out: params.add(
                format!("{prefix}.w_out"),
                init.make(vec![ff, d], InitKind::Normal(resid_std)),
            ),
            b_out: params.add(format!("{prefix}.b_out"), init.make(vec![d], InitKind::Zeros)),
        },
    }
}

fn ffn_forward<T: Float>(graph: &mut Graph<T>, vars: &[Var], ffn: &Ffn, x: Var) -> Result<Var> {
    match *ffn {
        Ffn::Gated { gate, up, down } => {
            let a = graph.matmul(x, vars[gate.0])?;
            let a = graph.silu(a)?;
            let b = graph.matmul(x, vars[up.0])?;
            let h = graph.mul(a, b)?;
            graph.matmul(h, vars[down.0])
        }
        Ffn::Plain {
            w_in,
            b_in,
            w_out,
            b_out,
        } => {
            let h = graph.matmul(x, vars[w_in.0])?;
            let h = graph.add_bias(h, vars[b_in.0])?;
            let h = graph.silu(h)?;
            let o = graph.matmul(h, vars[w_out.0])?;
            graph.add_bias(o, vars[b_out.0])
        }
    }
}
