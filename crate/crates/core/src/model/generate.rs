use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::Transformer;
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Float};
use crate::tokenizer::EOS;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Temperature sampling from a seeded stream; vote `i` uses `seed + i`.
    Sample {
        seed: u64,
        temperature: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub n_votes: usize,
    pub decoding: Decoding,
    pub eos: usize,
}

impl GenerateOptions {
    pub fn greedy(max_new_tokens: usize, n_votes: usize) -> Self {
        Self {
            max_new_tokens,
            n_votes,
            decoding: Decoding::Greedy,
            eos: EOS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// New tokens only, including the end-of-sequence token if reached.
    pub tokens: Vec<usize>,
    /// Budget ran out before end-of-sequence.
    pub truncated: bool,
}

/// Decodes `n_votes` continuations of `prompt`. Greedy decoding is
/// deterministic, so its votes are identical.
pub fn generate<T: Float>(model: &Transformer<T>, prompt: &[usize], opts: &GenerateOptions) -> Result<Vec<Generation>> {
    let max = model.config().max_seq_len;
    if prompt.len() + opts.max_new_tokens > max {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + opts.max_new_tokens,
            max,
        });
    }
    if opts.n_votes == 0 {
        return Err(Error::Config("n_votes must be at least 1".into()));
    }
    match opts.decoding {
        Decoding::Greedy => {
            let g = decode(model, prompt, opts, |logits| Ok(argmax(logits)))?;
            Ok(vec![g; opts.n_votes])
        }
        Decoding::Sample { seed, temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("temperature {temperature} must be positive")));
            }
            (0..opts.n_votes)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                    decode(model, prompt, opts, |logits| {
                        let mut p: Vec<f64> = logits.iter().map(|l| l.as_f64() / temperature).collect();
                        softmax_in_place(&mut p);
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        for (i, pi) in p.iter().enumerate() {
                            acc += pi;
                            if u < acc {
                                return Ok(i);
                            }
                        }
                        Ok(p.len() - 1)
                    })
                })
                .collect()
        }
    }
}

fn decode<T: Float>(
    model: &Transformer<T>,
    prompt: &[usize],
    opts: &GenerateOptions,
    mut pick: impl FnMut(&[T]) -> Result<usize>,
) -> Result<Generation> {
    let vocab = model.config().vocab_size;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..opts.max_new_tokens {
        let (logits, _) = model.logits(&seq)?;
        let last = &logits.data()[(seq.len() - 1) * vocab..];
        let next = pick(last)?;
        out.push(next);
        if next == opts.eos {
            return Ok(Generation {
                tokens: out,
                truncated: false,
            });
        }
        seq.push(next);
    }
    Ok(Generation {
        tokens: out,
        truncated: true,
    })
}

/// First index of the maximum.
fn argmax<T: Float>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{FfnStyle, ModelConfig};

    fn config(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            n_kv_heads: 1,
            d_ff: 4,
            vocab_size: vocab,
            max_seq_len: 12,
            total_experts: 1,
            active_experts: 1,
            ffn_style: FfnStyle::TwoMatrix,
            tie_embeddings: false,
        }
    }

    /// Blocks reduced to identity, so the next token depends only on the
    /// current one through `lm_head`. After layer norm token t is a +/- pair
    /// on features (t, t+1); the head scores token 2 from feature 0, token 1
    /// from feature 2 and token 0 from feature 1, giving 0 -> 2 -> 1 -> 0.
    fn rigged() -> Transformer<f64> {
        let mut m = Transformer::<f64>::dense(config(3), 0).unwrap();
        for p in m.params_mut().iter_mut() {
            let name = p.name.clone();
            let data = p.tensor.data_mut();
            if name == "tok_emb" {
                data.copy_from_slice(&[
                    1.0, -1.0, 0.0, 0.0, //
                    0.0, 1.0, -1.0, 0.0, //
                    0.0, 0.0, 1.0, -1.0,
                ]);
            } else if name == "lm_head" {
                data.copy_from_slice(&[
                    0.0, 0.0, 1.0, //
                    1.0, 0.0, 0.0, //
                    0.0, 1.0, 0.0, //
                    0.0, 0.0, 0.0,
                ]);
            } else if name.ends_with("wo") || name.ends_with("w_out") || name == "pos_emb" {
                data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        m
    }

    #[test]
    fn rigged_chain_is_followed() {
        let opts = GenerateOptions {
            max_new_tokens: 5,
            n_votes: 1,
            decoding: Decoding::Greedy,
            eos: 99,
        };
        let g = &generate(&rigged(), &[0], &opts).unwrap()[0];
        assert_eq!(g.tokens, vec![2, 1, 0, 2, 1]);
        assert!(g.truncated);
    }

    #[test]
    fn greedy_votes_identical_and_repeatable() {
        let m = Transformer::<f32>::dense(config(6), 4).unwrap();
        let opts = GenerateOptions {
            eos: 5,
            ..GenerateOptions::greedy(6, 5)
        };
        let a = generate(&m, &[1, 2], &opts).unwrap();
        let b = generate(&m, &[1, 2], &opts).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|g| g == &a[0]));
        assert_eq!(a, b);
    }

    #[test]
    fn stops_at_eos() {
        let m = rigged();
        let first = generate(
            &m,
            &[0],
            &GenerateOptions {
                eos: 99,
                ..GenerateOptions::greedy(1, 1)
            },
        )
        .unwrap()[0]
            .tokens[0];
        let opts = GenerateOptions {
            eos: first,
            ..GenerateOptions::greedy(5, 1)
        };
        let g = &generate(&m, &[0], &opts).unwrap()[0];
        assert_eq!(g.tokens, vec![first]);
        assert!(!g.truncated);
    }

    #[test]
    fn budget_checked() {
        let m = rigged();
        assert!(generate(&m, &[0; 10], &GenerateOptions::greedy(3, 1)).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let m = Transformer::<f32>::dense(config(6), 4).unwrap();
        let opts = GenerateOptions {
            max_new_tokens: 6,
            n_votes: 3,
            decoding: Decoding::Sample {
                seed: 7,
                temperature: 1.0,
            },
            eos: 5,
        };
        assert_eq!(generate(&m, &[1], &opts).unwrap(), generate(&m, &[1], &opts).unwrap());
    }
}
