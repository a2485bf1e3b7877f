use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::optimizer::{learning_rate, AdamW, AdamWConfig};
use crate::data::{corpus_tokens, pack, InstructionExample};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Transformer};
use crate::objectives::{
    adapt_loss_with_count, balance_loss, combined_loss, task_loss_with_counts, SpanCounts, SpanLabeledBatch,
    SpanLabeledSequence,
};
use crate::tensor::{Float, Graph};

/// Training sequences for one stage.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Raw token sequences for next-token adaptation.
    Corpus(Vec<Vec<usize>>),
    /// Span-tagged instruction sequences.
    Instructions(Vec<SpanLabeledSequence>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Corpus(c) => c.len(),
            TrainData::Instructions(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn max_len(&self) -> usize {
        match self {
            TrainData::Corpus(c) => c.iter().map(Vec::len).max().unwrap_or(0),
            TrainData::Instructions(s) => s.iter().map(|s| s.tokens.len()).max().unwrap_or(0),
        }
    }
}

/// One optimizer step of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    /// Adaptation loss during continual pre-training, task loss otherwise.
    pub task_loss: f64,
    pub balance_loss: f64,
    pub combined: f64,
    pub lr: f64,
}

/// Position in the seeded data order. Epoch `e` visits a permutation drawn
/// from stream `e` of a ChaCha8 generator seeded with `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    /// Optimizer steps already taken within `epoch`.
    pub cursor: usize,
}

pub struct Trainer<T> {
    model: Transformer<T>,
    config: TrainConfig,
    data: TrainData,
    optimizer: AdamW<T>,
    step: usize,
    history: Vec<StepRecord>,
}

impl<T: Float> Trainer<T> {
    pub fn new(model: Transformer<T>, config: TrainConfig, data: TrainData) -> Result<Self> {
        config.validate(model.config().max_seq_len)?;
        match (&data, config.stage) {
            (TrainData::Corpus(_), Stage::ContinualPretrain) | (TrainData::Instructions(_), Stage::MoeTune) => {}
            _ => {
                return Err(Error::Config(format!(
                    "data kind does not match stage {}",
                    config.stage.as_str()
                )))
            }
        }
        if config.stage == Stage::MoeTune && !model.is_moe() {
            return Err(Error::Config("moe-tune needs a mixture-of-experts model".into()));
        }
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if data.max_len() > config.cutoff_len {
            return Err(Error::SequenceTooLong {
                len: data.max_len(),
                max: config.cutoff_len,
            });
        }
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..Default::default()
            },
            model.params(),
        );
        Ok(Self {
            model,
            config,
            data,
            optimizer,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Restores optimizer moments and progress, e.g. from a checkpoint.
    pub fn restore(&mut self, optimizer: AdamW<T>, step: usize) -> Result<()> {
        if optimizer.m.len() != self.model.params().len() {
            return Err(Error::Config("optimizer state does not match the model".into()));
        }
        self.optimizer = optimizer;
        self.step = step;
        Ok(())
    }

    pub fn model(&self) -> &Transformer<T> {
        &self.model
    }

    pub fn into_model(self) -> Transformer<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optimizer
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data
            .len()
            .div_ceil(self.config.batch_size * self.config.grad_accum)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.steps_per_epoch() * self.config.epochs;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn rng_state(&self) -> RngState {
        let spe = self.steps_per_epoch();
        RngState {
            seed: self.config.seed,
            epoch: self.step / spe,
            cursor: self.step % spe,
        }
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Example indices of each micro-batch of the next step.
    fn next_micro_batches(&self) -> Vec<Vec<usize>> {
        let state = self.rng_state();
        let order = self.epoch_order(state.epoch);
        let per_step = self.config.batch_size * self.config.grad_accum;
        let start = state.cursor * per_step;
        let end = (start + per_step).min(order.len());
        order[start..end]
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Runs one optimizer step over `grad_accum` micro-batches.
    pub fn step(&mut self) -> Result<StepRecord> {
        let micro = self.next_micro_batches();
        let lr = learning_rate(
            self.config.lr,
            self.config.min_lr,
            self.config.warmup_steps,
            self.step,
            self.total_steps(),
        );
        let n_params = self.model.params().len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n_params];
        let (mut task, mut bal, mut comb) = (0.0, 0.0, 0.0);

        // Span means and token means are taken over the whole step so the
        // accumulated gradient equals the gradient of the full batch.
        let totals = match &self.data {
            TrainData::Corpus(c) => {
                let n: usize = micro.iter().flatten().map(|&i| c[i].len() - 1).sum();
                (
                    n,
                    SpanCounts {
                        detection: 0,
                        explanation: 0,
                    },
                )
            }
            TrainData::Instructions(s) => {
                let b = SpanLabeledBatch {
                    sequences: micro.iter().flatten().map(|&i| s[i].clone()).collect(),
                };
                (0, SpanCounts::of(&b))
            }
        };
        let n_micro = micro.len() as f64;

        for idx in &micro {
            let mut g = Graph::<T>::new();
            let (loss, t, b) = match &self.data {
                TrainData::Corpus(c) => {
                    let seqs: Vec<&[usize]> = idx.iter().map(|&i| &c[i][..c[i].len() - 1]).collect();
                    let targets: Vec<usize> = idx.iter().flat_map(|&i| c[i][1..].iter().copied()).collect();
                    let out = self.model.forward(
                        &mut g,
                        &seqs,
                        ForwardOptions {
                            grad: true,
                            traces: false,
                        },
                    )?;
                    let mask = vec![true; targets.len()];
                    let l = adapt_loss_with_count(&mut g, out.logits, &targets, &mask, totals.0)?;
                    let v = g.value(l).item()?.as_f64();
                    self.backward_into(&mut g, l, &out.params, &mut grads)?;
                    (v, v, 0.0)
                }
                TrainData::Instructions(s) => {
                    let batch = SpanLabeledBatch {
                        sequences: idx.iter().map(|&i| s[i].clone()).collect(),
                    };
                    let out = self.model.forward(
                        &mut g,
                        &batch.inputs(),
                        ForwardOptions {
                            grad: true,
                            traces: false,
                        },
                    )?;
                    let t = task_loss_with_counts(&mut g, out.logits, &batch, totals.1)?;
                    let b = balance_loss(&mut g, &out.balance)?;
                    let b = g.scale(b, T::lit(1.0 / n_micro))?;
                    let l = combined_loss(&mut g, t, b, self.config.alpha)?;
                    let (tv, bv, lv) = (
                        g.value(t).item()?.as_f64(),
                        g.value(b).item()?.as_f64(),
                        g.value(l).item()?.as_f64(),
                    );
                    self.backward_into(&mut g, l, &out.params, &mut grads)?;
                    (lv, tv, bv)
                }
            };
            task += t;
            bal += b;
            comb += loss;
        }
        if !comb.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: comb,
            });
        }
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        let record = StepRecord {
            step: self.step,
            stage: self.config.stage,
            task_loss: task,
            balance_loss: bal,
            combined: comb,
            lr,
        };
        self.step += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    fn backward_into(
        &self,
        g: &mut Graph<T>,
        loss: crate::tensor::Var,
        vars: &[crate::tensor::Var],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let step = self.step;
        g.backward(loss).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
            other => other,
        })?;
        for (slot, &v) in grads.iter_mut().zip(vars) {
            if let Some(gr) = g.take_grad(v) {
                match slot {
                    Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += *b),
                    None => *slot = Some(gr),
                }
            }
        }
        Ok(())
    }

    /// Steps until the configured budget is spent.
    pub fn run(&mut self) -> Result<&[StepRecord]> {
        self.run_until(|_| false)
    }

    /// Steps until the budget is spent or `stop` returns true for a record.
    pub fn run_until(&mut self, mut stop: impl FnMut(&StepRecord) -> bool) -> Result<&[StepRecord]> {
        while !self.is_done() {
            let rec = self.step().map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    step: self.step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if stop(&rec) {
                break;
            }
        }
        Ok(&self.history)
    }
}

/// Continual pre-training of a dense model on domain text with every
/// parameter trainable.
pub fn continual_pretrain<T: Float>(
    mut model: Transformer<T>,
    corpus: Vec<Vec<usize>>,
    config: TrainConfig,
) -> Result<Trainer<T>> {
    if config.stage != Stage::ContinualPretrain {
        return Err(Error::Config(
            "continual_pretrain needs stage continual-pretrain".into(),
        ));
    }
    model.unfreeze_all();
    let mut t = Trainer::new(model, config, TrainData::Corpus(corpus))?;
    t.run()?;
    Ok(t)
}

/// Tunes experts and routers with the combined task and balance loss. Only
/// parameters left trainable by the model's freeze mask are updated.
pub fn moe_tune<T: Float>(
    model: Transformer<T>,
    examples: &[InstructionExample],
    config: TrainConfig,
) -> Result<Trainer<T>> {
    if config.stage != Stage::MoeTune {
        return Err(Error::Config("moe_tune needs stage moe-tune".into()));
    }
    let mut t = Trainer::new(model, config.clone(), instruction_data(examples, config.cutoff_len)?)?;
    t.run()?;
    Ok(t)
}

pub fn instruction_data(examples: &[InstructionExample], cutoff: usize) -> Result<TrainData> {
    Ok(TrainData::Instructions(
        examples.iter().map(|e| pack(e, cutoff)).collect::<Result<_>>()?,
    ))
}

pub fn corpus_data(examples: &[InstructionExample], cutoff: usize) -> TrainData {
    TrainData::Corpus(corpus_tokens(examples, cutoff))
}

/// Writes the loss curve as CSV.
pub fn write_loss_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,stage,task_loss,balance_loss,combined,lr")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step,
            r.stage.as_str(),
            r.task_loss,
            r.balance_loss,
            r.combined,
            r.lr
        )?;
    }
    w.flush()?;
    Ok(())
}
