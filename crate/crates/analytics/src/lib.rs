//! Expert utilization and specialization statistics computed from routing
//! traces.
//!
//! Histograms count top-1 dispatches (the argmax expert of each token), the
//! same indicator used for the dispatch fraction in the balance loss.

use std::path::Path;

use moetune_core::data::{pack, InstructionExample, VulnType};
use moetune_core::model::{RoutingTrace, Transformer};
use moetune_core::tensor::Float;
use serde::{Deserialize, Serialize};

mod export;

pub use export::{export_report, read_csv, CsvRow, ExportFormat, SCHEMA, SCHEMA_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no routing traces for layer {0}")]
    NoTraces(usize),
    #[error("class `{0}` has no routing traces")]
    EmptyClass(String),
    #[error("a specialization report needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("traces disagree on the number of experts ({0} vs {1})")]
    ExpertCount(usize, usize),
    #[error("threshold {0} must lie in [0, 1)")]
    Threshold(f64),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] moetune_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertHistogram {
    pub layer: usize,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
}

impl ExpertHistogram {
    pub fn from_counts(layer: usize, counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let frequencies = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        Self {
            layer,
            counts,
            frequencies,
        }
    }

    pub fn tokens(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Shannon entropy of the frequencies in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.frequencies)
    }

    /// Two most frequent experts, ties broken toward the lower index.
    pub fn dominant(&self) -> (usize, usize) {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        (order[0], order.get(1).copied().unwrap_or(order[0]))
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

fn expert_count(traces: &[RoutingTrace]) -> Result<Option<usize>> {
    let mut n = None;
    for t in traces {
        match n {
            None => n = Some(t.logits.len()),
            Some(e) if e != t.logits.len() => return Err(Error::ExpertCount(e, t.logits.len())),
            _ => {}
        }
    }
    Ok(n)
}

fn histogram(traces: &[RoutingTrace], layer: usize, experts: usize) -> ExpertHistogram {
    let mut counts = vec![0u64; experts];
    for t in traces.iter().filter(|t| t.layer == layer) {
        counts[t.argmax] += 1;
    }
    ExpertHistogram::from_counts(layer, counts)
}

/// Top-1 dispatch histogram of one layer.
pub fn expert_frequency(traces: &[RoutingTrace], layer: usize) -> Result<ExpertHistogram> {
    let at: Vec<RoutingTrace> = traces.iter().filter(|t| t.layer == layer).cloned().collect();
    let experts = expert_count(&at)?.ok_or(Error::NoTraces(layer))?;
    Ok(histogram(&at, layer, experts))
}

/// First, middle and last layer, the sampling used for layer-wise plots.
pub fn default_layers(n_layers: usize) -> Vec<usize> {
    let mut v = vec![0, n_layers.saturating_sub(1) / 2, n_layers.saturating_sub(1)];
    v.dedup();
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub histogram: ExpertHistogram,
    pub primary: usize,
    pub secondary: usize,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class: String,
    /// One entry per analysed layer, in report layer order.
    pub layers: Vec<LayerProfile>,
}

/// `matrix[a][b]` is the size of the intersection of the dominant pairs of
/// classes `a` and `b` at `layer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub layer: usize,
    pub matrix: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecializationReport {
    pub schema_version: u32,
    pub experts: usize,
    pub layers: Vec<usize>,
    pub classes: Vec<ClassProfile>,
    pub overlap: Vec<OverlapMatrix>,
}

impl SpecializationReport {
    fn layer_slot(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }

    pub fn profile(&self, class: &str, layer: usize) -> Option<&LayerProfile> {
        let slot = self.layer_slot(layer)?;
        self.classes.iter().find(|c| c.class == class).map(|c| &c.layers[slot])
    }

    /// Average over classes of the class-conditional routing entropy.
    pub fn mean_entropy(&self, layer: usize) -> Option<f64> {
        let slot = self.layer_slot(layer)?;
        let n = self.classes.len() as f64;
        Some(self.classes.iter().map(|c| c.layers[slot].entropy).sum::<f64>() / n)
    }

    /// Number of distinct primary experts across classes.
    pub fn distinct_primaries(&self, layer: usize) -> Option<usize> {
        let slot = self.layer_slot(layer)?;
        let mut p: Vec<usize> = self.classes.iter().map(|c| c.layers[slot].primary).collect();
        p.sort_unstable();
        p.dedup();
        Some(p.len())
    }

    pub fn export(&self, path: &Path, format: ExportFormat) -> Result<()> {
        export_report(self, path, format)
    }
}

/// Routes every example through `model` as a packed training sequence
/// (prompt and targets) and groups the traces by vulnerability type in
/// `VulnType::DIALECTS` order, then `other`. Types without examples are
/// left out.
pub fn traces_by_class<T: Float>(
    model: &Transformer<T>,
    examples: &[InstructionExample],
    cutoff: usize,
) -> Result<Vec<(String, Vec<RoutingTrace>)>> {
    let mut out = Vec::new();
    for kind in VulnType::DIALECTS.into_iter().chain([VulnType::Other]) {
        let mut traces = Vec::new();
        for ex in examples.iter().filter(|e| e.vulnerability_type == kind) {
            let seq = pack(ex, cutoff)?;
            traces.extend(model.logits(&seq.tokens)?.1);
        }
        if !traces.is_empty() {
            out.push((kind.to_string(), traces));
        }
    }
    Ok(out)
}

/// Per-class, per-layer routing profiles. `by_class` pairs a class name
/// with the traces of that class's tokens; its order fixes the row order of
/// the overlap matrices.
pub fn specialization_report(
    by_class: &[(String, Vec<RoutingTrace>)],
    layers: &[usize],
) -> Result<SpecializationReport> {
    if by_class.len() < 2 {
        return Err(Error::TooFewClasses(by_class.len()));
    }
    let mut experts = None;
    for (name, traces) in by_class {
        let e = expert_count(traces)?.ok_or_else(|| Error::EmptyClass(name.clone()))?;
        match experts {
            Some(x) if x != e => return Err(Error::ExpertCount(x, e)),
            _ => experts = Some(e),
        }
    }
    let experts = experts.expect("at least two classes");

    let mut classes = Vec::new();
    for (name, traces) in by_class {
        let mut profiles = Vec::new();
        for &layer in layers {
            let histogram = histogram(traces, layer, experts);
            if histogram.tokens() == 0 {
                return Err(Error::NoTraces(layer));
            }
            let (primary, secondary) = histogram.dominant();
            profiles.push(LayerProfile {
                entropy: histogram.entropy(),
                histogram,
                primary,
                secondary,
            });
        }
        classes.push(ClassProfile {
            class: name.clone(),
            layers: profiles,
        });
    }

    let overlap = layers
        .iter()
        .enumerate()
        .map(|(slot, &layer)| {
            let pairs: Vec<[usize; 2]> = classes
                .iter()
                .map(|c| [c.layers[slot].primary, c.layers[slot].secondary])
                .collect();
            let matrix = pairs
                .iter()
                .map(|a| {
                    pairs
                        .iter()
                        .map(|b| a.iter().filter(|x| b.contains(x)).count())
                        .collect()
                })
                .collect();
            OverlapMatrix { layer, matrix }
        })
        .collect();

    Ok(SpecializationReport {
        schema_version: SCHEMA_VERSION,
        experts,
        layers: layers.to_vec(),
        classes,
        overlap,
    })
}

/// `(layer, expert)` pairs whose top-1 frequency falls below `threshold`,
/// sorted by layer then expert.
pub fn underutilized_experts(traces: &[RoutingTrace], threshold: f64) -> Result<Vec<(usize, usize)>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Threshold(threshold));
    }
    let Some(experts) = expert_count(traces)? else {
        return Ok(Vec::new());
    };
    let mut layers: Vec<usize> = traces.iter().map(|t| t.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut out = Vec::new();
    for layer in layers {
        let h = histogram(traces, layer, experts);
        out.extend(
            h.frequencies
                .iter()
                .enumerate()
                .filter(|(_, &f)| f < threshold)
                .map(|(e, _)| (layer, e)),
        );
    }
    Ok(out)
}
