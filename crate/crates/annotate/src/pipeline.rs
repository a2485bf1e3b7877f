use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use moetune_core::data::{instruction_for, write_jsonl, InstructionExample, Label, VulnType};
use serde::{Deserialize, Serialize};

use crate::{
    prompt::render_prompt, ClientError, Consensus, ConsensusRecord, Error, ExplanationCandidate, Generator, Judge,
    QualityScore, Refiner, Result, Review, Reviewer, Source, Verdict, ACCEPT_THRESHOLD,
};

/// JSON Schema for audit trail files.
pub const AUDIT_SCHEMA: &str = include_str!("../schema/audit_trail.schema.json");

pub const AUDIT_VERSION: u32 = 1;

/// One input record: vulnerable code awaiting an explanation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceItem {
    pub id: String,
    pub code: String,
    pub vulnerability_type: VulnType,
}

pub fn read_items(path: &Path) -> Result<Vec<SourceItem>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_items(path: &Path, items: &[SourceItem]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub source: Source,
    pub client: String,
    pub text: Option<String>,
    pub error: Option<ClientError>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub candidates: Vec<ExplanationCandidate>,
    pub records: Vec<GenerationRecord>,
}

/// Asks both generators for an explanation. A failing or empty generation is
/// recorded and skipped.
pub fn generate_explanations(item: &SourceItem, generators: [&dyn Generator; 2]) -> Generated {
    let prompt = render_prompt(&item.code, item.vulnerability_type);
    let mut out = Generated {
        candidates: Vec::new(),
        records: Vec::new(),
    };
    for (source, g) in Source::BOTH.into_iter().zip(generators) {
        let result = g.generate(&prompt).and_then(|t| {
            if t.trim().is_empty() {
                Err(ClientError::new(g.name(), "empty explanation"))
            } else {
                Ok(t)
            }
        });
        match result {
            Ok(text) => {
                out.candidates.push(ExplanationCandidate {
                    source,
                    item_id: item.id.clone(),
                    vulnerability_type: item.vulnerability_type,
                    text: text.clone(),
                });
                out.records.push(GenerationRecord {
                    source,
                    client: g.name().into(),
                    text: Some(text),
                    error: None,
                });
            }
            Err(e) => out.records.push(GenerationRecord {
                source,
                client: g.name().into(),
                text: None,
                error: Some(e),
            }),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub source: Source,
    pub score: QualityScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub judge: String,
    pub threshold: f64,
    pub scores: Vec<CandidateScore>,
    pub selected: Option<Source>,
}

/// Scores the candidates and keeps the best one if it reaches `threshold`.
/// Equal scores favour generator A.
pub fn evaluate_explanations(
    code: &str,
    candidates: &[ExplanationCandidate],
    judge: &dyn Judge,
    threshold: f64,
) -> Result<(Option<ExplanationCandidate>, JudgeRecord)> {
    let scores = if candidates.is_empty() {
        Vec::new()
    } else {
        judge.evaluate(code, candidates)?
    };
    if scores.len() != candidates.len() {
        return Err(Error::JudgeArity {
            want: candidates.len(),
            got: scores.len(),
        });
    }
    for s in &scores {
        s.validate()?;
    }
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => s.overall > scores[b].overall,
        };
        if better {
            best = Some(i);
        }
    }
    let best = best.filter(|&b| scores[b].overall >= threshold);
    let record = JudgeRecord {
        judge: judge.name().into(),
        threshold,
        scores: candidates
            .iter()
            .zip(&scores)
            .map(|(c, s)| CandidateScore {
                source: c.source,
                score: s.clone(),
            })
            .collect(),
        selected: best.map(|b| candidates[b].source),
    };
    Ok((best.map(|b| candidates[b].clone()), record))
}

/// Two reviewers, a refiner and the group discussion for one vulnerability
/// family.
pub struct ReviewerGroup {
    pub vulnerability_type: VulnType,
    pub reviewers: [Box<dyn Reviewer>; 2],
    pub refiner: Box<dyn Refiner>,
    pub consensus: Box<dyn Consensus>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerificationStatus {
    Accepted,
    Rejected,
    /// Reviewers disagreed and the group reached no decision.
    Pending,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub refiner: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub status: VerificationStatus,
    pub text: Option<String>,
    pub reviews: Vec<Review>,
    pub refinement: Option<RefinementRecord>,
    pub consensus: Option<ConsensusRecord>,
}

/// Both reviewers assess the candidate. Any `NeedsRefinement` verdict sends
/// the text to the refiner. Differing verdicts or any `Reject` require a
/// group decision before the item can be emitted.
pub fn expert_verification(
    code: &str,
    candidate: &ExplanationCandidate,
    group: &ReviewerGroup,
) -> Result<Verification> {
    let mut reviews = Vec::with_capacity(2);
    for r in &group.reviewers {
        reviews.push(r.review(code, candidate)?);
    }
    let mut text = candidate.text.clone();
    let mut refinement = None;
    if reviews.iter().any(|r| r.verdict == Verdict::NeedsRefinement) {
        text = group.refiner.refine(code, &text, &reviews)?;
        refinement = Some(RefinementRecord {
            refiner: group.refiner.name().into(),
            text: text.clone(),
        });
    }
    let disagree = reviews[0].verdict != reviews[1].verdict || reviews.iter().any(|r| r.verdict == Verdict::Reject);
    if !disagree {
        return Ok(Verification {
            status: VerificationStatus::Accepted,
            text: Some(text),
            reviews,
            refinement,
            consensus: None,
        });
    }
    let (status, text, consensus) = match group.consensus.resolve(code, &text, &reviews)? {
        None => (VerificationStatus::Pending, None, None),
        Some(rec) if rec.decision == Verdict::Accept => {
            let agreed = rec.text.clone().unwrap_or(text);
            (VerificationStatus::Accepted, Some(agreed), Some(rec))
        }
        Some(rec) => (VerificationStatus::Rejected, None, Some(rec)),
    };
    Ok(Verification {
        status,
        text,
        reviews,
        refinement,
        consensus,
    })
}

pub struct Clients {
    pub generators: [Box<dyn Generator>; 2],
    pub judge: Box<dyn Judge>,
    pub groups: Vec<ReviewerGroup>,
}

impl Clients {
    pub fn group(&self, kind: VulnType) -> Result<&ReviewerGroup> {
        self.groups
            .iter()
            .find(|g| g.vulnerability_type == kind)
            .ok_or(Error::NoGroup(kind))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemStatus {
    Emitted,
    JudgedOut,
    Rejected,
    Pending,
    /// A client failed; the item is retried on the next run.
    Failed,
}

impl ItemStatus {
    /// Final statuses are not reprocessed when a run resumes.
    pub fn is_final(self) -> bool {
        matches!(self, ItemStatus::Emitted | ItemStatus::JudgedOut | ItemStatus::Rejected)
    }
}

/// Everything that happened to one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditTrail {
    pub schema_version: u32,
    pub item_id: String,
    pub vulnerability_type: VulnType,
    pub generations: Vec<GenerationRecord>,
    pub judgement: Option<JudgeRecord>,
    pub reviews: Vec<Review>,
    pub refinement: Option<RefinementRecord>,
    pub consensus: Option<ConsensusRecord>,
    pub status: ItemStatus,
    pub final_text: Option<String>,
    pub error: Option<String>,
}

impl AuditTrail {
    pub fn example(&self, item: &SourceItem) -> Option<InstructionExample> {
        if self.status != ItemStatus::Emitted {
            return None;
        }
        Some(InstructionExample {
            id: item.id.clone(),
            instruction: instruction_for(item.vulnerability_type),
            code: item.code.clone(),
            label: Label::Vulnerable,
            vulnerability_type: item.vulnerability_type,
            explanation: self.final_text.clone()?,
        })
    }
}

fn process(item: &SourceItem, clients: &Clients, threshold: f64) -> AuditTrail {
    let mut trail = AuditTrail {
        schema_version: AUDIT_VERSION,
        item_id: item.id.clone(),
        vulnerability_type: item.vulnerability_type,
        generations: Vec::new(),
        judgement: None,
        reviews: Vec::new(),
        refinement: None,
        consensus: None,
        status: ItemStatus::Failed,
        final_text: None,
        error: None,
    };
    let [a, b] = &clients.generators;
    let generated = generate_explanations(item, [a.as_ref(), b.as_ref()]);
    trail.generations = generated.records;
    let staged = (|| -> Result<()> {
        let (best, record) =
            evaluate_explanations(&item.code, &generated.candidates, clients.judge.as_ref(), threshold)?;
        trail.judgement = Some(record);
        let Some(best) = best else {
            trail.status = ItemStatus::JudgedOut;
            return Ok(());
        };
        let v = expert_verification(&item.code, &best, clients.group(item.vulnerability_type)?)?;
        trail.reviews = v.reviews;
        trail.refinement = v.refinement;
        trail.consensus = v.consensus;
        trail.final_text = v.text;
        trail.status = match v.status {
            VerificationStatus::Accepted => ItemStatus::Emitted,
            VerificationStatus::Rejected => ItemStatus::Rejected,
            VerificationStatus::Pending => ItemStatus::Pending,
        };
        Ok(())
    })();
    if let Err(e) = staged {
        trail.status = ItemStatus::Failed;
        trail.error = Some(e.to_string());
    }
    trail
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub threshold: f64,
    /// Stop after processing this many new items, as if interrupted.
    pub limit: Option<usize>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            threshold: ACCEPT_THRESHOLD,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub items: usize,
    /// Items with an audit trail so far.
    pub processed: usize,
    /// Items reused from an earlier run.
    pub reused: usize,
    pub candidates: usize,
    pub generation_failures: usize,
    /// Items whose best candidate passed the judge.
    pub best: usize,
    pub judged_out: usize,
    pub verified: usize,
    pub rejected: usize,
    pub pending: usize,
    pub failed: usize,
    pub complete: bool,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs every item through generation, judging and verification. Writes
/// `audit/<id>.json` per item as soon as it finishes, then rebuilds
/// `examples.jsonl` and `report.json` from all audit trails in input order.
/// Items whose trail already holds a final status are not reprocessed, so
/// an interrupted run can simply be started again.
pub fn run_pipeline(
    items: &[SourceItem],
    clients: &Clients,
    out_dir: &Path,
    opts: &PipelineOptions,
) -> Result<PipelineReport> {
    let mut ids = HashSet::new();
    for it in items {
        if !valid_id(&it.id) {
            return Err(Error::Parse {
                line: 0,
                reason: format!("item id `{}` must use only letters, digits, `-`, `_` and `.`", it.id),
            });
        }
        if !ids.insert(it.id.as_str()) {
            return Err(Error::DuplicateId(it.id.clone()));
        }
    }
    let audit_dir = out_dir.join("audit");
    std::fs::create_dir_all(&audit_dir)?;

    let mut report = PipelineReport {
        items: items.len(),
        complete: true,
        ..Default::default()
    };
    let mut examples = Vec::new();
    let mut fresh = 0usize;
    for item in items {
        let path = audit_dir.join(format!("{}.json", item.id));
        let earlier: Option<AuditTrail> = match std::fs::read(&path) {
            Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let trail = match earlier {
            Some(t) if t.status.is_final() => {
                report.reused += 1;
                t
            }
            _ => {
                if opts.limit.is_some_and(|n| fresh >= n) {
                    report.complete = false;
                    continue;
                }
                fresh += 1;
                let t = process(item, clients, opts.threshold);
                write_atomic(&path, (serde_json::to_string_pretty(&t)? + "\n").as_bytes())?;
                t
            }
        };
        report.processed += 1;
        report.candidates += trail.generations.iter().filter(|g| g.text.is_some()).count();
        report.generation_failures += trail.generations.iter().filter(|g| g.error.is_some()).count();
        if trail.judgement.as_ref().is_some_and(|j| j.selected.is_some()) {
            report.best += 1;
        }
        match trail.status {
            ItemStatus::Emitted => report.verified += 1,
            ItemStatus::JudgedOut => report.judged_out += 1,
            ItemStatus::Rejected => report.rejected += 1,
            ItemStatus::Pending => report.pending += 1,
            ItemStatus::Failed => report.failed += 1,
        }
        examples.extend(trail.example(item));
    }
    write_jsonl(&out_dir.join("examples.jsonl"), &examples).map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(
        &out_dir.join("report.json"),
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    Ok(report)
}
