//! Instruction datasets: JSONL records, packing into span-tagged token
//! sequences and a synthetic corpus of four vulnerability dialects.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{SpanLabeledSequence, SpanTag};
use crate::tokenizer::{encode_bytes, BOS, EOS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Vulnerable,
    Safe,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Vulnerable => "Vulnerable",
            Label::Safe => "Safe",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VulnType {
    Reentrancy,
    Timestamp,
    IntegerOverflow,
    Delegatecall,
    Other,
}

impl VulnType {
    pub const DIALECTS: [VulnType; 4] = [
        VulnType::Reentrancy,
        VulnType::Timestamp,
        VulnType::IntegerOverflow,
        VulnType::Delegatecall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VulnType::Reentrancy => "reentrancy",
            VulnType::Timestamp => "timestamp",
            VulnType::IntegerOverflow => "integer-overflow",
            VulnType::Delegatecall => "delegatecall",
            VulnType::Other => "other",
        }
    }
}

impl fmt::Display for VulnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    #[serde(default)]
    pub id: String,
    pub instruction: String,
    pub code: String,
    pub label: Label,
    pub vulnerability_type: VulnType,
    pub explanation: String,
}

impl InstructionExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.explanation.trim().is_empty() {
            return Err("empty explanation".into());
        }
        if self.code.trim().is_empty() {
            return Err("empty code".into());
        }
        Ok(())
    }

    pub fn label_line(&self) -> String {
        format!("LABEL: {}", self.label)
    }

    pub fn explanation_line(&self) -> String {
        format!("EXPLANATION: {}", self.explanation)
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionExample>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: InstructionExample = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            reason: e.to_string(),
        })?;
        ex.validate().map_err(|reason| Error::Dataset { line: i + 1, reason })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[InstructionExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Instruction text paired with code of the given vulnerability family.
pub fn instruction_for(kind: VulnType) -> String {
    format!("Check {kind} bug.")
}

/// `BOS instruction SEP code SEP`, with the code truncated to keep the
/// prompt within `max_len` tokens. Used for both training and inference.
pub fn prompt_tokens(ex: &InstructionExample, max_len: usize) -> Vec<usize> {
    let mut t = vec![BOS];
    t.extend(encode_bytes(ex.instruction.as_bytes()));
    t.push(SEP);
    let room = max_len.saturating_sub(t.len() + 1);
    t.extend(encode_bytes(ex.code.as_bytes()).take(room));
    t.push(SEP);
    t
}

/// Prompt followed by `LABEL: <x> SEP` (detection span) and
/// `EXPLANATION: <text> EOS` (explanation span), within `cutoff` tokens.
/// Only the code is truncated; a target that cannot fit is an error.
pub fn pack(ex: &InstructionExample, cutoff: usize) -> Result<SpanLabeledSequence> {
    let mut det: Vec<usize> = encode_bytes(ex.label_line().as_bytes()).collect();
    det.push(SEP);
    let mut expl: Vec<usize> = encode_bytes(ex.explanation_line().as_bytes()).collect();
    expl.push(EOS);
    let fixed = 3 + ex.instruction.len() + det.len() + expl.len();
    if fixed + 1 > cutoff {
        return Err(Error::SequenceTooLong {
            len: fixed + 1,
            max: cutoff,
        });
    }
    let prompt = prompt_tokens(ex, cutoff - det.len() - expl.len());
    let mut tags = vec![SpanTag::Prompt; prompt.len()];
    tags.extend(std::iter::repeat_n(SpanTag::Detection, det.len()));
    tags.extend(std::iter::repeat_n(SpanTag::Explanation, expl.len()));
    let mut tokens = prompt;
    tokens.extend(det);
    tokens.extend(expl);
    Ok(SpanLabeledSequence { tokens, tags })
}

/// Domain text for continual pre-training: `BOS code EOS`, truncated.
pub fn corpus_tokens(examples: &[InstructionExample], max_len: usize) -> Vec<Vec<usize>> {
    examples
        .iter()
        .map(|ex| {
            let mut t = vec![BOS];
            t.extend(encode_bytes(ex.code.as_bytes()).take(max_len.saturating_sub(2)));
            t.push(EOS);
            t
        })
        .collect()
}

/// Synthetic data settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Examples per vulnerability dialect.
    pub per_class: usize,
    /// Fraction of examples using the safe variant.
    pub safe_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class: 8,
            safe_fraction: 0.5,
            seed: 0,
        }
    }
}

const AMOUNTS: [&str; 6] = ["amt", "val", "wad", "qty", "sum", "n"];

struct Dialect {
    kind: VulnType,
    names: &'static [&'static str],
    vulnerable: fn(&str, &str) -> String,
    safe: fn(&str, &str) -> String,
    why_vulnerable: &'static str,
    why_safe: &'static str,
}

fn dialects() -> [Dialect; 4] {
    [
        Dialect {
            kind: VulnType::Reentrancy,
            names: &["bal", "credit", "deposits"],
            vulnerable: |m, a| format!("{m}[msg.sender]>={a};msg.sender.call{{value:{a}}}(\"\");{m}[msg.sender]-={a};"),
            safe: |m, a| format!("{m}[msg.sender]>={a};{m}[msg.sender]-={a};msg.sender.call{{value:{a}}}(\"\");"),
            why_vulnerable: "external call runs before the balance update",
            why_safe: "balance is updated before the external call",
        },
        Dialect {
            kind: VulnType::Timestamp,
            names: &["lottery", "round", "prize"],
            vulnerable: |m, a| format!("if(block.timestamp%7==0){{{m}.winner=msg.sender;{m}.pay({a});}}"),
            safe: |m, a| format!("if(block.number>{m}.end){{{m}.winner=oracle.pick();{m}.pay({a});}}"),
            why_vulnerable: "payout depends on a miner controlled timestamp",
            why_safe: "outcome does not depend on block timestamp",
        },
        Dialect {
            kind: VulnType::IntegerOverflow,
            names: &["supply", "total", "count"],
            vulnerable: |m, a| format!("uint8 {m}=255;{m}+={a};{m}*={a};"),
            safe: |m, a| format!("uint8 {m}=255;{m}={m}.add({a});require({m}>={a});"),
            why_vulnerable: "unchecked arithmetic can wrap around",
            why_safe: "arithmetic is checked with safe math",
        },
        Dialect {
            kind: VulnType::Delegatecall,
            names: &["lib", "proxy", "impl"],
            vulnerable: |m, a| format!("address {m}=_to;{m}.delegatecall(msg.data);emit Go({a});"),
            safe: |m, a| {
                format!("require(msg.sender==owner);address {m}=TRUSTED;{m}.delegatecall(msg.data);emit Go({a});")
            },
            why_vulnerable: "delegatecall target is controlled by the caller",
            why_safe: "delegatecall target is fixed and owner gated",
        },
    ]
}

/// Four-dialect corpus: each vulnerability type has its own motifs and
/// identifiers, with vulnerable and safe variants. Output order is shuffled.
pub fn synthesize(config: &SynthConfig) -> Vec<InstructionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for d in dialects() {
        let n_safe = (config.per_class as f64 * config.safe_fraction).round() as usize;
        for i in 0..config.per_class {
            let safe = i < n_safe;
            let name = *d.names.choose(&mut rng).expect("non-empty");
            let amount = format!(
                "{}{}",
                AMOUNTS.choose(&mut rng).expect("non-empty"),
                rng.random_range(0..10)
            );
            let code = if safe {
                (d.safe)(name, &amount)
            } else {
                (d.vulnerable)(name, &amount)
            };
            out.push(InstructionExample {
                id: String::new(),
                instruction: instruction_for(d.kind),
                code,
                label: if safe { Label::Safe } else { Label::Vulnerable },
                vulnerability_type: d.kind,
                explanation: (if safe { d.why_safe } else { d.why_vulnerable }).to_string(),
            });
        }
    }
    out.shuffle(&mut rng);
    for (i, ex) in out.iter_mut().enumerate() {
        ex.id = format!("syn-{i:05}");
    }
    out
}
