use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use moetune_analytics::{default_layers, specialization_report, traces_by_class, underutilized_experts, ExportFormat};
use moetune_annotate::mock::{template_clients, ReplayGenerator};
use moetune_annotate::pipeline::{read_items, write_items};
use moetune_annotate::{run_pipeline, Clients, PipelineOptions, SourceItem};
use moetune_core::data::{prompt_tokens, read_jsonl, synthesize, write_jsonl, InstructionExample, Label, SynthConfig};
use moetune_core::model::{
    count_parameters, generate, upcycle_from_dense, Decoding, GenerateOptions, ModelConfig, Transformer,
};
use moetune_core::tokenizer::render;
use moetune_core::train::{continual_pretrain, corpus_data, moe_tune, write_loss_csv, Checkpoint, Stage, TrainData};
use moetune_eval::report::{
    pairwise_kappa, rating_report, read_predictions, read_ratings, score_predictions, EvalReport, PredictionRecord,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{unix_now, FileDigest, RunManifest};

/// Settings shared by every subcommand after flags are applied.
pub struct Run {
    pub command: &'static str,
    pub config: RunConfig,
    pub out_dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    resolved: serde_json::Value,
    started: u64,
}

impl Run {
    pub fn new(command: &'static str, config: RunConfig) -> Result<Self> {
        let out_dir = config.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            command,
            config,
            out_dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
            resolved: serde_json::Value::Null,
            started: unix_now(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        ensure!(path.is_file(), "input file {} does not exist", path.display());
        self.inputs.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out_dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn resolved(&mut self, value: impl Serialize) -> Result<()> {
        self.resolved = serde_json::to_value(value)?;
        Ok(())
    }

    /// Checks every output and writes the manifest.
    pub fn finish(self) -> Result<PathBuf> {
        for p in &self.outputs {
            verify(p).with_context(|| format!("output {} failed validation", p.display()))?;
        }
        let manifest = RunManifest {
            command: self.command.into(),
            seed: self.config.seed,
            resolved: self.resolved,
            inputs: self.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            config: self.config,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        manifest.write(&self.out_dir)
    }
}

/// An output must exist and parse in the format its extension names.
fn verify(path: &Path) -> Result<()> {
    ensure!(path.is_file(), "missing");
    match path.extension().and_then(|e| e.to_str()) {
        Some("ckpt") => {
            Checkpoint::load(path)?;
        }
        Some("json") => {
            serde_json::from_slice::<serde_json::Value>(&std::fs::read(path)?)?;
        }
        Some("jsonl") => {
            for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
                serde_json::from_str::<serde_json::Value>(line).with_context(|| format!("line {}", i + 1))?;
            }
        }
        Some("csv") => {
            let mut r = csv::Reader::from_path(path)?;
            for row in r.records() {
                row?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().with_context(|| format!("--{flag} is required"))
}

fn load_model(path: &Path) -> Result<Transformer<f32>> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .model)
}

fn load_examples(path: &Path) -> Result<Vec<InstructionExample>> {
    let ex = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(!ex.is_empty(), "dataset {} is empty", path.display());
    Ok(ex)
}

/// Train and test splits drawn from one seed, plus the vulnerable training
/// items as annotation input.
pub fn synth_data(mut run: Run) -> Result<PathBuf> {
    let s = run.config.synth.clone();
    let seed = run.config.seed;
    let train = SynthConfig {
        per_class: s.per_class,
        safe_fraction: s.safe_fraction,
        seed,
    };
    let test = SynthConfig {
        per_class: s.test_per_class,
        seed: seed ^ 0x7e57_0000_0000,
        ..train.clone()
    };
    let train_ex = synthesize(&train);
    let mut test_ex = synthesize(&test);
    for e in &mut test_ex {
        e.id = format!("test-{}", e.id);
    }
    let items: Vec<SourceItem> = train_ex
        .iter()
        .filter(|e| e.label == Label::Vulnerable)
        .map(|e| SourceItem {
            id: e.id.clone(),
            code: e.code.clone(),
            vulnerability_type: e.vulnerability_type,
        })
        .collect();
    write_jsonl(&run.output("train.jsonl"), &train_ex)?;
    write_jsonl(&run.output("test.jsonl"), &test_ex)?;
    write_items(&run.output("annotate_items.jsonl"), &items)?;
    run.resolved(serde_json::json!({ "train": train, "test": test }))?;
    eprintln!(
        "{} train, {} test, {} annotation items",
        train_ex.len(),
        test_ex.len(),
        items.len()
    );
    run.finish()
}

/// `model` names a dense checkpoint to continue from, or a preset.
pub fn pretrain(mut run: Run, model: Option<String>, dataset: &Option<PathBuf>) -> Result<PathBuf> {
    let data = run.input(required(dataset, "dataset")?)?;
    let examples = load_examples(&data)?;
    let dense = match model {
        Some(m) if Path::new(&m).is_file() => {
            let p = run.input(Path::new(&m))?;
            load_model(&p)?
        }
        other => {
            if let Some(preset) = other {
                run.config.model.preset = preset;
            }
            Transformer::<f32>::dense(run.config.model.resolve()?, run.config.seed)?
        }
    };
    ensure!(!dense.is_moe(), "pretrain expects a dense model");
    let cfg = run.config.pretrain.resolve(Stage::ContinualPretrain, run.config.seed)?;
    run.resolved(serde_json::json!({ "model": dense.config(), "train": cfg }))?;
    let TrainData::Corpus(corpus) = corpus_data(&examples, cfg.cutoff_len) else {
        unreachable!()
    };
    let t = continual_pretrain(dense, corpus, cfg)?;
    report_loss("pretrain", t.history());
    write_loss_csv(&run.output("pretrain_loss.csv"), t.history())?;
    Checkpoint::from_trainer(&t).save(&run.output("dense.ckpt"))?;
    run.finish()
}

pub fn upcycle(mut run: Run, model: &Option<PathBuf>) -> Result<PathBuf> {
    let src = run.input(required(model, "model")?)?;
    let dense = load_model(&src)?;
    let c = dense.config();
    let e = run.config.model.experts.unwrap_or(c.total_experts);
    let k = run.config.model.top_k.unwrap_or(c.active_experts);
    let moe = upcycle_from_dense(&dense, e, k, run.config.seed)?;
    run.resolved(moe.config())?;
    eprintln!(
        "upcycled to {e} experts, top-{k}: {} of {} parameters trainable",
        moe.params().trainable_numel(),
        moe.params().numel()
    );
    Checkpoint::from_model(moe).save(&run.output("moe.ckpt"))?;
    run.finish()
}

pub fn moe_tune_cmd(mut run: Run, model: &Option<PathBuf>, dataset: &Option<PathBuf>) -> Result<PathBuf> {
    let src = run.input(required(model, "model")?)?;
    let data = run.input(required(dataset, "dataset")?)?;
    let moe = load_model(&src)?;
    ensure!(
        moe.is_moe(),
        "moe-tune expects an upcycled checkpoint; run `upcycle` first"
    );
    let examples = load_examples(&data)?;
    let cfg = run.config.tune.resolve(Stage::MoeTune, run.config.seed)?;
    run.resolved(&cfg)?;
    let t = moe_tune(moe, &examples, cfg)?;
    report_loss("moe-tune", t.history());
    write_loss_csv(&run.output("tune_loss.csv"), t.history())?;
    Checkpoint::from_trainer(&t).save(&run.output("tuned.ckpt"))?;
    run.finish()
}

fn report_loss(stage: &str, h: &[moetune_core::train::StepRecord]) {
    if let (Some(first), Some(last)) = (h.first(), h.last()) {
        eprintln!(
            "{stage}: {} steps, task loss {:.4} -> {:.4}, balance {:.4}",
            h.len(),
            first.task_loss,
            last.task_loss,
            last.balance_loss
        );
    }
}

pub fn infer(mut run: Run, model: &Option<PathBuf>, dataset: &Option<PathBuf>) -> Result<PathBuf> {
    let src = run.input(required(model, "model")?)?;
    let data = run.input(required(dataset, "dataset")?)?;
    let m = load_model(&src)?;
    let examples = load_examples(&data)?;
    let inf = run.config.infer.clone();
    ensure!(inf.n_votes > 0, "n_votes must be at least 1");
    let room = m
        .config()
        .max_seq_len
        .checked_sub(inf.max_new_tokens)
        .filter(|r| *r > 2);
    let room = room.with_context(|| format!("max_new_tokens {} leaves no room for a prompt", inf.max_new_tokens))?;
    run.resolved(&inf)?;
    let mut records = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let decoding = match inf.temperature {
            None => Decoding::Greedy,
            Some(temperature) => Decoding::Sample {
                seed: run.config.seed.wrapping_add((i * inf.n_votes) as u64),
                temperature,
            },
        };
        let opts = GenerateOptions {
            decoding,
            ..GenerateOptions::greedy(inf.max_new_tokens, inf.n_votes)
        };
        let gens = generate(&m, &prompt_tokens(ex, room), &opts)?;
        records.push(PredictionRecord {
            id: ex.id.clone(),
            gold_label: ex.label,
            samples: gens.iter().map(|g| render(&g.tokens)).collect(),
        });
    }
    moetune_eval::report::write_predictions(&run.output("predictions.jsonl"), &records)?;
    eprintln!("{} items, {} votes each", records.len(), inf.n_votes);
    run.finish()
}

pub fn analyze_routing(mut run: Run, model: &Option<PathBuf>, dataset: &Option<PathBuf>) -> Result<PathBuf> {
    let src = run.input(required(model, "model")?)?;
    let data = run.input(required(dataset, "dataset")?)?;
    let m = load_model(&src)?;
    ensure!(m.is_moe(), "routing analysis needs a mixture-of-experts checkpoint");
    let examples = load_examples(&data)?;
    let layers = run
        .config
        .analyze
        .layers
        .clone()
        .unwrap_or_else(|| default_layers(m.config().n_layers));
    if let Some(&bad) = layers.iter().find(|&&l| l >= m.config().n_layers) {
        bail!(
            "layer {bad} does not exist; the model has {} layers",
            m.config().n_layers
        );
    }
    run.resolved(serde_json::json!({ "layers": layers, "threshold": run.config.analyze.underutilized_threshold }))?;
    let by_class = traces_by_class(&m, &examples, m.config().max_seq_len)?;
    let report = specialization_report(&by_class, &layers)?;
    report.export(&run.output("routing.json"), ExportFormat::Json)?;
    report.export(&run.output("routing.csv"), ExportFormat::Csv)?;
    let all: Vec<_> = by_class.into_iter().flat_map(|(_, t)| t).collect();
    let under = underutilized_experts(&all, run.config.analyze.underutilized_threshold)?;
    let under: Vec<_> = under
        .into_iter()
        .map(|(layer, expert)| serde_json::json!({ "layer": layer, "expert": expert }))
        .collect();
    write_json(&run.output("underutilized.json"), &under)?;
    for &l in &layers {
        eprintln!(
            "layer {l}: mean entropy {:.3}, {} distinct primary experts",
            report.mean_entropy(l).unwrap_or(f64::NAN),
            report.distinct_primaries(l).unwrap_or(0)
        );
    }
    run.finish()
}

pub fn eval(mut run: Run, dataset: &Option<PathBuf>) -> Result<PathBuf> {
    let data = run.input(required(dataset, "dataset")?)?;
    let records = read_predictions(&data)?;
    let detection = score_predictions(&records)?;
    let m = &detection.metrics;
    println!(
        "accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
        m.accuracy, m.precision, m.recall, m.f1
    );
    EvalReport {
        detection: Some(detection),
        ratings: None,
    }
    .write(&run.output("eval_report.json"))?;
    run.finish()
}

pub fn kappa(mut run: Run, dataset: &Option<PathBuf>) -> Result<PathBuf> {
    let data = run.input(required(dataset, "dataset")?)?;
    let pairs = pairwise_kappa(&read_ratings(&data)?);
    ensure!(!pairs.is_empty(), "no two raters share an item");
    for p in &pairs {
        match &p.result {
            Some(k) => println!(
                "{} {} vs {}: kappa {:.4} ({:?})",
                p.dimension.as_str(),
                p.rater_a,
                p.rater_b,
                k.kappa,
                k.band
            ),
            None => println!("{} {} vs {}: undefined", p.dimension.as_str(), p.rater_a, p.rater_b),
        }
    }
    write_json(&run.output("kappa.json"), &pairs)?;
    run.finish()
}

pub fn likert(mut run: Run, dataset: &Option<PathBuf>) -> Result<PathBuf> {
    let data = run.input(required(dataset, "dataset")?)?;
    let report = rating_report(&read_ratings(&data)?)?;
    for (d, r) in &report.positive_rates {
        println!("{} positive rate {:.2}%", d.as_str(), 100.0 * r);
    }
    println!("{} items need a third rating", report.resolution_queue.len());
    write_json(&run.output("likert_report.json"), &report)?;
    run.finish()
}

pub fn annotate(mut run: Run, dataset: &Option<PathBuf>) -> Result<PathBuf> {
    let data = run.input(required(dataset, "dataset")?)?;
    let items = read_items(&data)?;
    let a = run.config.annotate.clone();
    let clients = match &a.replay {
        None => template_clients(),
        Some([ra, rb]) => {
            let (ra, rb) = (run.input(ra)?, run.input(rb)?);
            Clients {
                generators: [
                    Box::new(ReplayGenerator::load("replay-a", &ra)?),
                    Box::new(ReplayGenerator::load("replay-b", &rb)?),
                ],
                ..template_clients()
            }
        }
    };
    run.resolved(&a)?;
    let opts = PipelineOptions {
        threshold: a.threshold,
        limit: a.limit,
    };
    let report = run_pipeline(&items, &clients, &run.out_dir, &opts)?;
    run.output("examples.jsonl");
    run.output("report.json");
    println!(
        "{} of {} items processed: {} verified, {} judged out, {} rejected, {} pending, {} failed",
        report.processed,
        report.items,
        report.verified,
        report.judged_out,
        report.rejected,
        report.pending,
        report.failed
    );
    run.finish()
}

#[derive(Serialize)]
struct ParamCount {
    model: ModelConfig,
    total: u64,
    activated: u64,
}

/// `model` is a preset name or a checkpoint whose header supplies the shape.
pub fn param_count(mut run: Run, model: Option<String>) -> Result<PathBuf> {
    let mut config = match model {
        Some(m) if Path::new(&m).is_file() => {
            let p = run.input(Path::new(&m))?;
            Checkpoint::read_header(&p)?.model
        }
        Some(preset) => ModelConfig::preset(&preset)?,
        None => ModelConfig::preset(&run.config.model.preset)?,
    };
    let (e, k) = (config.total_experts, config.active_experts);
    config = config.with_experts(
        run.config.model.experts.unwrap_or(e),
        run.config.model.top_k.unwrap_or(k),
    );
    config.validate()?;
    let (total, activated) = count_parameters(&config);
    println!(
        "total {total} ({:.2}e9), activated {activated} ({:.2}e9)",
        total as f64 / 1e9,
        activated as f64 / 1e9
    );
    write_json(
        &run.output("param_count.json"),
        &ParamCount {
            model: config,
            total,
            activated,
        },
    )?;
    run.finish()
}
