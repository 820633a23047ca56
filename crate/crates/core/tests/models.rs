use ialab::models::{
    assign_kv, batch_labels, build_model, evaluate, load_checkpoint, save_checkpoint, score, train,
    validate_assignment, Encoded, KvAssignment, ModelError, ModelSpec, Optimizer, QuerySource, Source, Target,
    TaskData, TrainConfig, Variant, PAD, TRAIN_LOG_HEADER,
};
use ialab::rng;
use ialab::tasks::{generate, DatasetSpec, TaskKind};
use ialab::tensor::Tape;
use rand::Rng;

fn tiny(variant: Variant, task: TaskKind) -> ModelSpec {
    ModelSpec {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        ..ModelSpec::fast(variant, task)
    }
}

fn data(task: TaskKind, n_train: usize, n_test: usize, seed: u64) -> TaskData {
    TaskData::from(&generate(&DatasetSpec {
        n_train,
        n_test,
        ..DatasetSpec::new(task, seed)
    }))
}

fn all_specs() -> Vec<(Variant, TaskKind)> {
    let mut v = Vec::new();
    for task in [TaskKind::Sorting, TaskKind::Retrieval] {
        for variant in Variant::ALL {
            v.push((variant, task));
        }
    }
    v
}

#[test]
fn parameter_layout_is_seed_independent() {
    for (variant, task) in all_specs() {
        let a = build_model(&ModelSpec::fast(variant, task), 1).unwrap();
        let b = build_model(&ModelSpec::fast(variant, task), 2).unwrap();
        assert_eq!(a.params.names(), b.params.names());
        assert_eq!(a.params.count(), b.params.count());
        assert_ne!(a.params.tensors(), b.params.tensors());
    }
    let ia = build_model(&ModelSpec::fast(Variant::Indirect, TaskKind::Sorting), 0).unwrap();
    let naive = build_model(&ModelSpec::fast(Variant::NaiveMisaligned, TaskKind::Sorting), 0).unwrap();
    // bias MLPs for 4 heads in both layers, offset map only between layers
    let extra = 2 * 4 * (32 + 32 + 32) + 64 * 10;
    assert_eq!(ia.params.count(), naive.params.count() + extra);
    assert!(ia.params.get("layer0.w_g").is_some());
    assert!(ia.params.get("layer1.w_g").is_none());
    let cross = build_model(&ModelSpec::fast(Variant::Cross, TaskKind::Sorting), 0).unwrap();
    assert!(cross.params.get("layer0.query_emb").is_none());
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = ModelSpec {
        n_heads: 3,
        ..ModelSpec::fast(Variant::Cross, TaskKind::Sorting)
    };
    assert!(matches!(build_model(&bad, 0), Err(ModelError::Config(_))));
    assert!("transformer"
        .parse::<Variant>()
        .unwrap_err()
        .contains("indirect, naive_misaligned, cross"));
}

#[test]
fn logits_have_task_shapes() {
    for (variant, task) in all_specs() {
        let d = data(task, 5, 0, 3);
        let model = build_model(&tiny(variant, task), 0).unwrap();
        let batch: Vec<&Encoded> = d.train.iter().collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, false).unwrap();
        let want = match task {
            TaskKind::Sorting => [5 * 10, 10],
            TaskKind::Retrieval => [5, 8],
        };
        assert_eq!(tape.shape(fwd.logits), want, "{variant} {task}");
        assert_eq!(fwd.weights.len(), 2);
        for &w in &fwd.weights {
            assert_eq!(tape.shape(w), [5 * 2, 10, 10]);
            for row in tape.value(w).data().chunks(10) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn untrained_loss_is_near_uniform_entropy() {
    for (variant, task) in all_specs() {
        let d = data(task, 64, 0, 4);
        let model = build_model(&ModelSpec::fast(variant, task), 9).unwrap();
        let batch: Vec<&Encoded> = d.train.iter().collect();
        let loss = model.loss(&batch).unwrap();
        let want = (task.n_classes() as f64).ln();
        assert!((loss / want - 1.0).abs() < 0.1, "{variant} {task}: {loss} vs {want}");
    }
}

#[test]
fn key_value_assignment() {
    let enriched = KvAssignment {
        keys: Source::Conditioning,
        values: Source::Content,
        queries: QuerySource::Enriched,
    };
    for task in [TaskKind::Sorting, TaskKind::Retrieval] {
        assert_eq!(assign_kv(Variant::Indirect, task), enriched);
        assert_eq!(assign_kv(Variant::NaiveMisaligned, task), enriched);
        for v in Variant::ALL {
            validate_assignment(v, &assign_kv(v, task)).unwrap();
        }
    }
    assert_eq!(
        assign_kv(Variant::Cross, TaskKind::Sorting),
        KvAssignment {
            keys: Source::Conditioning,
            values: Source::Conditioning,
            queries: QuerySource::Sequence(Source::Content),
        }
    );
    assert_eq!(
        assign_kv(Variant::Cross, TaskKind::Retrieval),
        KvAssignment {
            keys: Source::Content,
            values: Source::Content,
            queries: QuerySource::Sequence(Source::Conditioning),
        }
    );
    let swapped = KvAssignment {
        keys: Source::Content,
        values: Source::Conditioning,
        ..enriched
    };
    assert!(validate_assignment(Variant::Indirect, &swapped).is_err());
    assert!(validate_assignment(Variant::Cross, &enriched).is_err());
}

#[test]
fn pads_are_masked_and_placed() {
    let d = data(TaskKind::Retrieval, 3, 0, 5);
    for e in &d.train {
        assert_eq!(e.conditioning.len(), 10);
        assert!(e.conditioning[3..].iter().all(|&t| t == PAD));
    }
    let batch: Vec<&Encoded> = d.train.iter().collect();
    assert_eq!(batch_labels(TaskKind::Retrieval, &batch).len(), 3);
    let mut e = data(TaskKind::Sorting, 1, 0, 5).train.remove(0);
    e.content[4] = PAD;
    let labels = batch_labels(TaskKind::Sorting, &[&e]);
    assert_eq!(labels.iter().filter(|l| l.is_none()).count(), 1);
    assert!(labels[4].is_none());
}

#[test]
fn every_parameter_receives_gradient() {
    for (variant, task) in all_specs() {
        let d = data(task, 8, 0, 6);
        let model = build_model(&tiny(variant, task), 2).unwrap();
        let batch: Vec<&Encoded> = d.train.iter().collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, true).unwrap();
        tape.backward(fwd.loss).unwrap();
        for (name, &v) in model.params.names().iter().zip(&fwd.params) {
            let g = tape
                .grad(v)
                .unwrap_or_else(|| panic!("{variant} {task}: {name} has no gradient"));
            assert!(g.norm_sq() > 0.0, "{variant} {task}: {name} has a zero gradient");
        }
    }
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let d = data(TaskKind::Sorting, 40, 10, 7);
    let mut model = build_model(&tiny(Variant::Indirect, TaskKind::Sorting), 3).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &d, &cfg, |_| {}).unwrap();
    assert_eq!(model.params, before);
    for r in &log.rows {
        assert!((r.train_loss - log.rows[0].train_loss).abs() < 1e-12);
        assert_eq!(r.test_accuracy, log.rows[0].test_accuracy);
    }
}

#[test]
fn training_is_reproducible() {
    let d = data(TaskKind::Retrieval, 48, 16, 8);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 5,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = build_model(&tiny(Variant::Indirect, TaskKind::Retrieval), 5).unwrap();
        let log = train(&mut m, &d, &cfg, |_| {}).unwrap();
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(m1.params, m2.params);
    let strip = |l: &ialab::models::TrainLog| -> Vec<(f64, f64)> {
        l.rows.iter().map(|r| (r.train_loss, r.test_accuracy)).collect()
    };
    assert_eq!(strip(&l1), strip(&l2));
    assert!(l1.to_csv().starts_with(TRAIN_LOG_HEADER));
    assert_eq!(l1.to_csv().lines().count(), 3);
}

#[test]
fn loss_falls_over_first_epochs() {
    for (variant, task) in all_specs() {
        let d = data(task, 128, 0, 10);
        let mut model = build_model(&ModelSpec::fast(variant, task), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &d, &cfg, |_| {}).unwrap();
        let first = log.rows[0].train_loss;
        let last = log.rows[9].train_loss;
        assert!(last < first, "{variant} {task}: {first} -> {last}");
    }
}

#[test]
fn small_subset_can_be_memorised() {
    // Cross sorting sees no interaction between target tokens, so two
    // instances sharing (token, position, ordering) with different labels
    // cannot both be fitted.
    let fittable = all_specs()
        .into_iter()
        .filter(|&(v, t)| !(v == Variant::Cross && t == TaskKind::Sorting));
    for (variant, task) in fittable {
        let d = data(task, 16, 0, 11);
        let mut model = build_model(&tiny(variant, task), 4).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            epochs: 500,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut reached = None;
        for epoch in 0..cfg.epochs / 50 {
            train(
                &mut model,
                &d,
                &TrainConfig {
                    epochs: 50,
                    seed: epoch as u64,
                    ..cfg
                },
                |_| {},
            )
            .unwrap();
            if evaluate(&model, &d.train).unwrap().accuracy >= 0.99 {
                reached = Some((epoch + 1) * 50);
                break;
            }
        }
        assert!(reached.is_some(), "{variant} {task} did not memorise 16 instances");
    }
}

#[test]
fn non_finite_loss_aborts() {
    let d = data(TaskKind::Sorting, 8, 0, 12);
    let mut model = build_model(&tiny(Variant::Cross, TaskKind::Sorting), 0).unwrap();
    let i = model.params.names().iter().position(|n| n == "head.b").unwrap();
    model.params.tensors_mut()[i].data_mut()[0] = f64::NAN;
    let err = train(
        &mut model,
        &d,
        &TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        |_| {},
    )
    .unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
}

#[test]
fn bad_train_configs() {
    let d = data(TaskKind::Sorting, 8, 0, 12);
    let mut model = build_model(&tiny(Variant::Cross, TaskKind::Sorting), 0).unwrap();
    for cfg in [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: f64::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(
            train(&mut model, &d, &cfg, |_| {}),
            Err(ModelError::Config(_))
        ));
    }
    let other = data(TaskKind::Retrieval, 8, 0, 12);
    assert!(train(&mut model, &other, &TrainConfig::default(), |_| {}).is_err());
    assert_eq!("sgd".parse::<Optimizer>(), Ok(Optimizer::Sgd));
}

#[test]
fn sgd_moves_parameters() {
    let d = data(TaskKind::Retrieval, 16, 0, 13);
    let mut model = build_model(&tiny(Variant::NaiveMisaligned, TaskKind::Retrieval), 0).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        lr: 0.1,
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&mut model, &d, &cfg, |_| {}).unwrap();
    assert_ne!(model.params, before);
}

fn truth(data: &[Encoded]) -> Vec<usize> {
    data.iter()
        .flat_map(|e| match &e.target {
            Target::PerToken(l) => l.clone(),
            Target::Start(s) => vec![*s],
        })
        .collect()
}

#[test]
fn metric_examples() {
    for task in [TaskKind::Sorting, TaskKind::Retrieval] {
        let d = data(task, 0, 200, 14);
        let m = score(task, &d.test, &truth(&d.test));
        assert_eq!((m.accuracy, m.consistency_accuracy), (1.0, 1.0));
        // uniform guessing: binomial mean 1/C, 4 standard deviations
        let c = task.n_classes();
        let mut r = rng::stream(3, task as u64);
        let guesses: Vec<usize> = truth(&d.test).iter().map(|_| r.random_range(0..c)).collect();
        let m = score(task, &d.test, &guesses);
        let p = 1.0 / c as f64;
        let sd = (p * (1.0 - p) / guesses.len() as f64).sqrt();
        assert!((m.accuracy - p).abs() < 4.0 * sd, "{task}: {}", m.accuracy);
    }
}

#[test]
fn metrics_ignore_instance_order() {
    let d = data(TaskKind::Sorting, 0, 50, 15);
    let model = build_model(&tiny(Variant::Indirect, TaskKind::Sorting), 1).unwrap();
    let a = evaluate(&model, &d.test).unwrap();
    let mut rev = d.test.clone();
    rev.reverse();
    let b = evaluate(&model, &rev).unwrap();
    assert_eq!(a.n_instances, 50);
    assert!((a.accuracy - b.accuracy).abs() < 1e-15);
    assert!((a.consistency_accuracy - b.consistency_accuracy).abs() < 1e-15);
}

#[test]
fn consistency_accepts_alternative_tie_orders() {
    let e = Encoded {
        conditioning: (0..10).collect(),
        content: vec![5, 5, 0, 1, 2, 3, 4, 6, 7, 8],
        target: Target::PerToken(vec![5, 6, 0, 1, 2, 3, 4, 7, 8, 9]),
    };
    let swapped = vec![6, 5, 0, 1, 2, 3, 4, 7, 8, 9];
    let m = score(TaskKind::Sorting, &[e], &swapped);
    assert!((m.accuracy - 0.8).abs() < 1e-12);
    assert_eq!(m.consistency_accuracy, 1.0);
}

#[test]
fn checkpoint_round_trip() {
    let d = data(TaskKind::Sorting, 32, 20, 16);
    let mut model = build_model(&tiny(Variant::Indirect, TaskKind::Sorting), 6).unwrap();
    let log = train(
        &mut model,
        &d,
        &TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        |_| {},
    )
    .unwrap();
    let mut bytes = Vec::new();
    save_checkpoint(&model, &mut bytes).unwrap();
    let header = String::from_utf8_lossy(&bytes[..200]).to_string();
    assert!(header.starts_with("ialab-checkpoint v1\nspec variant=indirect task=sorting n_layers=2"));
    let loaded = load_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(
        evaluate(&loaded, &d.test).unwrap().accuracy,
        log.final_accuracy().unwrap()
    );

    let mut truncated = bytes.clone();
    truncated.pop();
    assert!(matches!(
        load_checkpoint(truncated.as_slice()),
        Err(ModelError::Checkpoint(_))
    ));
    let text = String::from_utf8_lossy(&bytes).replacen("d_model=16", "d_model=32", 1);
    assert!(load_checkpoint(text.as_bytes()).is_err());
    assert!(load_checkpoint(&b"not a checkpoint\nend\n"[..]).is_err());
}
