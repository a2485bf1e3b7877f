//! Client implementations that need no external service: closures for
//! scripted scenarios, deterministic template clients, and a generator
//! replaying recorded responses from disk.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use moetune_core::data::VulnType;
use serde::{Deserialize, Serialize};

use crate::pipeline::{Clients, ReviewerGroup};
use crate::{
    ClientError, Consensus, ConsensusRecord, Error, ExplanationCandidate, Generator, Judge, QualityScore, Refiner,
    Result, Review, Reviewer, Verdict,
};

type Out<T> = std::result::Result<T, ClientError>;

pub struct FnGenerator<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&str) -> Out<String>> Generator for FnGenerator<F> {
    fn name(&self) -> &str {
        &self.name
    }
    fn generate(&self, prompt: &str) -> Out<String> {
        (self.f)(prompt)
    }
}

pub struct FnJudge<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&str, &[ExplanationCandidate]) -> Out<Vec<QualityScore>>> Judge for FnJudge<F> {
    fn name(&self) -> &str {
        &self.name
    }
    fn evaluate(&self, code: &str, candidates: &[ExplanationCandidate]) -> Out<Vec<QualityScore>> {
        (self.f)(code, candidates)
    }
}

pub struct FnReviewer<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&str, &ExplanationCandidate) -> Out<(Verdict, String)>> Reviewer for FnReviewer<F> {
    fn name(&self) -> &str {
        &self.name
    }
    fn review(&self, code: &str, candidate: &ExplanationCandidate) -> Out<Review> {
        let (verdict, feedback) = (self.f)(code, candidate)?;
        Ok(Review {
            reviewer: self.name.clone(),
            verdict,
            feedback,
        })
    }
}

pub struct FnRefiner<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&str, &str, &[Review]) -> Out<String>> Refiner for FnRefiner<F> {
    fn name(&self) -> &str {
        &self.name
    }
    fn refine(&self, code: &str, text: &str, reviews: &[Review]) -> Out<String> {
        (self.f)(code, text, reviews)
    }
}

pub struct FnConsensus<F>(pub F);

impl<F: Fn(&str, &str, &[Review]) -> Out<Option<ConsensusRecord>>> Consensus for FnConsensus<F> {
    fn resolve(&self, code: &str, text: &str, reviews: &[Review]) -> Out<Option<ConsensusRecord>> {
        (self.0)(code, text, reviews)
    }
}

/// Writes an explanation from the focus line of the prompt.
pub struct TemplateGenerator {
    pub name: String,
}

impl Generator for TemplateGenerator {
    fn name(&self) -> &str {
        &self.name
    }
    fn generate(&self, prompt: &str) -> Out<String> {
        let focus = prompt.lines().nth(1).unwrap_or_default();
        let topic = focus.trim_start_matches("Analyze ").trim_end_matches('.');
        Ok(format!("The flaw follows from {topic}."))
    }
}

/// Scores correctness by whether the text names the family's key term,
/// completeness by length and conciseness by brevity.
pub struct HeuristicJudge;

fn key_term(kind: VulnType) -> &'static str {
    match kind {
        VulnType::Reentrancy => "external call",
        VulnType::Timestamp => "timestamp",
        VulnType::IntegerOverflow => "arithmetic",
        VulnType::Delegatecall => "delegatecall",
        VulnType::Other => "",
    }
}

impl Judge for HeuristicJudge {
    fn name(&self) -> &str {
        "heuristic-judge"
    }
    fn evaluate(&self, _code: &str, candidates: &[ExplanationCandidate]) -> Out<Vec<QualityScore>> {
        candidates
            .iter()
            .map(|c| {
                let correctness = if c.text.contains(key_term(c.vulnerability_type)) {
                    8
                } else {
                    3
                };
                let words = c.text.split_whitespace().count() as u32;
                let completeness = (words / 3).clamp(1, 10);
                let conciseness = 10u32.saturating_sub(words / 15).max(1);
                QualityScore::new(correctness, completeness, conciseness, "heuristic")
                    .map_err(|e| ClientError::new("heuristic-judge", e.to_string()))
            })
            .collect()
    }
}

fn accepting(name: &str) -> Box<dyn Reviewer> {
    Box::new(FnReviewer {
        name: name.into(),
        f: |_: &str, _: &ExplanationCandidate| Ok((Verdict::Accept, String::new())),
    })
}

/// Deterministic clients for dry runs: template generators, the heuristic
/// judge and reviewer groups that accept everything.
pub fn template_clients() -> Clients {
    let groups = VulnType::DIALECTS
        .iter()
        .chain([&VulnType::Other])
        .map(|&kind| ReviewerGroup {
            vulnerability_type: kind,
            reviewers: [
                accepting(&format!("{kind}-reviewer-1")),
                accepting(&format!("{kind}-reviewer-2")),
            ],
            refiner: Box::new(FnRefiner {
                name: format!("{kind}-refiner"),
                f: |_: &str, t: &str, _: &[Review]| Ok(t.to_string()),
            }),
            consensus: Box::new(FnConsensus(|_: &str, _: &str, _: &[Review]| Ok(None))),
        })
        .collect();
    Clients {
        generators: [
            Box::new(TemplateGenerator {
                name: "template-a".into(),
            }),
            Box::new(TemplateGenerator {
                name: "template-b".into(),
            }),
        ],
        judge: Box::new(HeuristicJudge),
        groups,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub response: String,
}

/// Answers prompts from a JSONL file of recorded `{prompt, response}` pairs.
pub struct ReplayGenerator {
    pub name: String,
    responses: HashMap<String, String>,
}

impl ReplayGenerator {
    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut responses = HashMap::new();
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let x: Exchange = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            responses.insert(x.prompt, x.response);
        }
        Ok(Self {
            name: name.into(),
            responses,
        })
    }
}

impl Generator for ReplayGenerator {
    fn name(&self) -> &str {
        &self.name
    }
    fn generate(&self, prompt: &str) -> Out<String> {
        self.responses
            .get(prompt)
            .cloned()
            .ok_or_else(|| ClientError::new(&self.name, "no recorded response for this prompt"))
    }
}

/// Wraps a generator and keeps every successful exchange for later replay.
pub struct Recorder<G> {
    pub inner: G,
    log: Mutex<Vec<Exchange>>,
}

impl<G: Generator> Recorder<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for x in self.log.lock().expect("recorder lock").iter() {
            serde_json::to_writer(&mut w, x)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

impl<G: Generator> Generator for Recorder<G> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn generate(&self, prompt: &str) -> Out<String> {
        let response = self.inner.generate(prompt)?;
        self.log.lock().expect("recorder lock").push(Exchange {
            prompt: prompt.into(),
            response: response.clone(),
        });
        Ok(response)
    }
}
