use moetune_core::data::{synthesize, InstructionExample, SynthConfig};
use moetune_core::model::{upcycle_from_dense, ModelConfig, Transformer};
use moetune_core::tensor::Float;
use moetune_core::train::{
    continual_pretrain, corpus_data, instruction_data, moe_tune, write_loss_csv, Checkpoint, Stage, TrainConfig,
    TrainData, Trainer,
};
use moetune_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        n_kv_heads: 2,
        d_ff: 32,
        ..ModelConfig::desk()
    }
    .with_experts(4, 2)
}

fn examples() -> Vec<InstructionExample> {
    synthesize(&SynthConfig {
        per_class: 2,
        safe_fraction: 0.5,
        seed: 3,
    })
}

fn tune_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 2,
        epochs: 100,
        max_steps: Some(steps),
        ..TrainConfig::desk(Stage::MoeTune)
    }
}

fn upcycled<T: Float>() -> Transformer<T> {
    let dense = Transformer::<T>::dense(tiny(), 1).unwrap();
    upcycle_from_dense(&dense, 4, 2, 2).unwrap()
}

fn flat<T: Float>(m: &Transformer<T>) -> Vec<Vec<T>> {
    m.params().iter().map(|p| p.tensor.data().to_vec()).collect()
}

#[test]
fn freeze_contract_holds_after_tuning() {
    let before = upcycled::<f32>();
    let after = moe_tune(before.clone(), &examples(), tune_config(10))
        .unwrap()
        .into_model();
    let (mut expert, mut router) = (false, false);
    for (a, b) in before.params().iter().zip(after.params().iter()) {
        assert_eq!(a.frozen, b.frozen);
        let same = a.tensor.data() == b.tensor.data();
        if a.frozen {
            assert!(same, "frozen `{}` moved", a.name);
        } else if !same {
            expert |= a.name.contains(".moe.expert");
            router |= a.name.ends_with(".moe.router");
        }
    }
    assert!(expert && router);
}

#[test]
fn zero_epochs_changes_nothing() {
    let m = upcycled::<f32>();
    let cfg = TrainConfig {
        epochs: 0,
        max_steps: None,
        ..tune_config(0)
    };
    let t = moe_tune(m.clone(), &examples(), cfg).unwrap();
    assert_eq!(t.step_count(), 0);
    assert_eq!(flat(t.model()), flat(&m));
}

#[test]
fn runs_are_seed_deterministic() {
    let run = |seed| {
        flat(
            moe_tune(upcycled::<f32>(), &examples(), TrainConfig { seed, ..tune_config(4) })
                .unwrap()
                .model(),
        )
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn accumulation_matches_full_batch_without_balance() {
    let run = |batch_size, grad_accum| {
        let cfg = TrainConfig {
            batch_size,
            grad_accum,
            alpha: 0.0,
            ..tune_config(3)
        };
        moe_tune(upcycled::<f64>(), &examples(), cfg).unwrap().into_model()
    };
    let full = run(4, 1);
    for (b, a) in [(2, 2), (1, 4)] {
        let split = run(b, a);
        for (p, q) in full.params().iter().zip(split.params().iter()) {
            let d = p.tensor.max_abs_diff(&q.tensor).unwrap();
            assert!(d < 1e-9, "{} differs by {d} with batch {b} x {a}", p.name);
        }
    }
}

#[test]
fn zero_alpha_reports_task_loss_only() {
    let cfg = TrainConfig {
        alpha: 0.0,
        ..tune_config(3)
    };
    let t = moe_tune(upcycled::<f32>(), &examples(), cfg).unwrap();
    for r in t.history() {
        assert!(r.balance_loss > 0.0);
        assert_eq!(r.combined, r.task_loss);
    }
}

#[test]
fn stage_and_data_must_agree() {
    let m = upcycled::<f32>();
    let corpus = corpus_data(&examples(), 256);
    assert!(Trainer::new(m.clone(), tune_config(1), corpus).is_err());
    let dense = Transformer::<f32>::dense(tiny(), 0).unwrap();
    let data = instruction_data(&examples(), 256).unwrap();
    assert!(Trainer::new(dense, tune_config(1), data).is_err());
    assert!(Trainer::new(m, tune_config(1), TrainData::Instructions(vec![])).is_err());
}

#[test]
fn pretraining_lowers_loss_and_writes_csv() {
    let dense = Transformer::<f32>::dense(tiny(), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 6,
        lr: 1e-2,
        ..TrainConfig::desk(Stage::ContinualPretrain)
    };
    let corpus = match corpus_data(&examples(), 256) {
        TrainData::Corpus(c) => c,
        _ => unreachable!(),
    };
    let t = continual_pretrain(dense, corpus, cfg).unwrap();
    let h = t.history();
    assert_eq!(h.len(), 12);
    assert!(h.last().unwrap().task_loss < h[0].task_loss);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&path, h).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "step,stage,task_loss,balance_loss,combined,lr");
    assert_eq!(lines.len(), 13);
    assert!(lines[1].starts_with("0,continual-pretrain,"));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let t = moe_tune(upcycled::<f32>(), &examples(), tune_config(2)).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    Checkpoint::from_trainer(&t).save(&a).unwrap();
    let back = Checkpoint::load(&a).unwrap();
    assert_eq!(flat(&back.model), flat(t.model()));
    assert_eq!(back.model.params().freeze_mask(), t.model().params().freeze_mask());
    assert_eq!(back.optimizer.as_ref(), Some(t.optimizer()));
    assert_eq!(back.rng, Some(t.rng_state()));
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

fn rewrite_header(src: &std::path::Path, dst: &std::path::Path, edit: impl FnOnce(&mut serde_json::Value)) {
    let bytes = std::fs::read(src).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    edit(&mut header);
    let mut out = serde_json::to_vec(&header).unwrap();
    out.extend_from_slice(&bytes[nl..]);
    std::fs::write(dst, out).unwrap();
}

fn is_checkpoint_error<T>(r: moetune_core::Result<T>) -> bool {
    matches!(r, Err(Error::Checkpoint { .. }))
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.ckpt");
    Checkpoint::from_model(upcycled::<f32>()).save(&good).unwrap();

    let bad = dir.path().join("version.ckpt");
    rewrite_header(&good, &bad, |h| h["format_version"] = 2.into());
    assert!(is_checkpoint_error(Checkpoint::load(&bad)));

    let bad = dir.path().join("shape.ckpt");
    rewrite_header(&good, &bad, |h| h["manifest"][0]["shape"] = serde_json::json!([1, 1]));
    assert!(is_checkpoint_error(Checkpoint::load(&bad)));

    let bytes = std::fs::read(&good).unwrap();
    let bad = dir.path().join("short.ckpt");
    std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(is_checkpoint_error(Checkpoint::load(&bad)));

    std::fs::write(&bad, b"not a header").unwrap();
    assert!(is_checkpoint_error(Checkpoint::load(&bad)));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = tune_config(6);
    let straight = moe_tune(upcycled::<f32>(), &examples(), cfg.clone()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(
        upcycled::<f32>(),
        cfg.clone(),
        instruction_data(&examples(), 256).unwrap(),
    )
    .unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    Checkpoint::from_trainer(&first).save(&path).unwrap();
    drop(first);

    let ck = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::new(ck.model, ck.train.unwrap(), instruction_data(&examples(), 256).unwrap()).unwrap();
    resumed.restore(ck.optimizer.unwrap(), ck.step).unwrap();
    assert_eq!(Some(resumed.rng_state()), ck.rng);
    resumed.run().unwrap();
    assert_eq!(resumed.step_count(), 6);
    assert_eq!(flat(resumed.model()), flat(straight.model()));
    assert_eq!(resumed.history(), &straight.history()[3..]);
}
