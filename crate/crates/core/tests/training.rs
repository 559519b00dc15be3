use smdt::model::ModelConfig;
use smdt::parallel::Execution;
use smdt::retrieval::TmIndex;
use smdt::synthetic::{copy_task, CopyTask, CopyTaskConfig};
use smdt::training::{build_training_stream, train, EvalRecord, Task, TrainConfig};

fn task() -> CopyTask {
    copy_task(&CopyTaskConfig { groups: 40, ..CopyTaskConfig::default() }, 5).unwrap()
}

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        d_ff: 16,
        num_heads: 8,
        num_layers: 1,
        two_stream_top_layers: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn ratio_boundaries() {
    let t = task();
    let index = TmIndex::build(&t.train, 1.2, 0.75).unwrap();
    let mut docs = build_training_stream(&t.train, &index, 0.0, 1, 1, Execution::Sequential).unwrap();
    assert!((0..200).all(|_| docs.next_instance().unwrap().task == Task::Document));
    let mut sents = build_training_stream(&t.train, &index, 1.0, 1, 1, Execution::Sequential).unwrap();
    for _ in 0..200 {
        let inst = sents.next_instance().unwrap();
        assert_eq!(inst.task, Task::Sentence);
        assert_eq!(inst.layout.num_sentences(), 1);
    }
}

#[test]
fn streams_are_seeded() {
    let t = task();
    let index = TmIndex::build(&t.train, 1.2, 0.75).unwrap();
    let draw = |seed| {
        let s = build_training_stream(&t.train, &index, 0.5, seed, 1, Execution::Sequential).unwrap();
        s.take(50).map(|i| i.unwrap()).map(|i| (i.task, i.layout.tokens)).collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn patience_zero_stops_at_the_first_non_improving_evaluation() {
    let t = task();
    // A learning rate this large makes validation loss rise quickly.
    let config = TrainConfig {
        lr: 5.0,
        warmup: 1,
        patience: 0,
        eval_interval: 1,
        max_steps: 50,
        ..TrainConfig::default()
    };
    let mut seen: Vec<EvalRecord> = Vec::new();
    let out = train(&t.train, &t.valid, &tiny(t.train.vocab.len()), &config, Execution::default(), &mut |r| {
        seen.push(r.clone());
        Ok(())
    });
    match out {
        Ok(out) => {
            assert!(out.steps < 50);
            let last = seen.last().unwrap();
            assert!(!last.best);
            assert!(seen[..seen.len() - 1].iter().all(|r| r.best));
            assert_eq!(out.history, seen);
        }
        Err(e) => assert!(matches!(e, smdt::SmdtError::Divergence { .. }), "{e}"),
    }
}

#[test]
fn training_is_deterministic_and_improves() {
    let t = task();
    let config = TrainConfig {
        lr: 3e-3,
        warmup: 10,
        eval_interval: 20,
        max_steps: 40,
        batch_size: 2.0,
        ..TrainConfig::default()
    };
    let run = |exec| train(&t.train, &t.valid, &tiny(t.train.vocab.len()), &config, exec, &mut |_| Ok(())).unwrap();
    let a = run(Execution::Parallel);
    let b = run(Execution::Sequential);
    assert_eq!(a.model.to_bytes().unwrap(), b.model.to_bytes().unwrap());
    assert_eq!(a.history, b.history);
    assert!(a.best_valid_loss < (t.train.vocab.len() as f64).ln());
}

#[test]
fn invalid_configs_are_rejected() {
    let t = task();
    for bad in [
        TrainConfig { sentence_task_ratio: 1.5, ..TrainConfig::default() },
        TrainConfig { eval_interval: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0.0, ..TrainConfig::default() },
    ] {
        assert!(train(&t.train, &t.valid, &tiny(t.train.vocab.len()), &bad, Execution::default(), &mut |_| Ok(())).is_err());
    }
}
