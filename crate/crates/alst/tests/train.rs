use alst::checkpoint::Checkpoint;
use alst::data::{generate_cohort, LoadedCohort, SynthConfig};
use alst::model::{AlstConfig, Branch};
use alst::train::{evaluate, fit_model_to_cohort, train, TrainConfig};

fn small_cohort(seed: u64, patients: usize) -> LoadedCohort {
    let synth = SynthConfig {
        seed,
        num_patients: patients,
        sessions_per_patient: [2, 4],
        feature_dim: 6,
        phoneme_frames: [1, 3],
        silence_frames: [1, 2],
        test_fraction: None,
        ..SynthConfig::default()
    };
    LoadedCohort::from_synthetic(generate_cohort(&synth).unwrap()).unwrap()
}

fn small_config(cohort: &LoadedCohort, epochs: u64, seed: u64) -> TrainConfig {
    let model = AlstConfig {
        hidden_dim: 16,
        ffn_dim: 32,
        ..AlstConfig::default()
    };
    TrainConfig {
        model: fit_model_to_cohort(&model, cohort).unwrap(),
        epochs,
        batch_size: 3,
        base_lr: 1e-3,
        warmup_steps: 4,
        decay_start_epoch: 2,
        decay_step_epochs: 1,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn two_patient_smoke_run() {
    let cohort = small_cohort(0, 2);
    let config = small_config(&cohort, 3, 0);
    let out = train(&cohort, &config, None, None).unwrap();
    assert!(out.abort.is_none());
    assert_eq!(out.log.epochs.len(), 3);
    assert!(out.log.epochs.iter().all(|e| e.loss.is_finite() && e.loss >= 0.0));
    assert_eq!(out.checkpoint.epochs_completed, 3);
    let report = evaluate(&out.checkpoint.params, &cohort, Branch::Regression, 0.1).unwrap();
    let sessions: usize = cohort.manifest.patients.iter().map(|p| p.records.len()).sum();
    assert_eq!(report.records, sessions);
}

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    let cohort = small_cohort(1, 8);
    let config = small_config(&cohort, 3, 7);
    let a = train(&cohort, &config, None, None).unwrap();
    let b = train(&cohort, &config, None, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    let other = train(&cohort, &TrainConfig { seed: 8, ..config }, None, None).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), other.checkpoint.to_bytes());
}

#[test]
fn learning_rate_trace_follows_the_schedule() {
    let cohort = small_cohort(2, 8);
    let config = small_config(&cohort, 5, 0);
    let out = train(&cohort, &config, None, None).unwrap();
    let schedule = config.schedule();
    let mut step = 0u64;
    for e in &out.log.epochs {
        for _ in 0..e.steps {
            assert_eq!(out.log.lr_trace[step as usize], schedule.lr_at(step, e.epoch));
            step += 1;
        }
    }
    assert_eq!(step as usize, out.log.lr_trace.len());
    assert_eq!(out.checkpoint.global_step, step);
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let cohort = small_cohort(3, 6);
    let config = small_config(&cohort, 2, 0);
    let out = train(&cohort, &config, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    for branch in [Branch::Regression, Branch::Classification] {
        let a = evaluate(&out.checkpoint.params, &cohort, branch, 0.1).unwrap();
        let b = evaluate(&loaded.params, &cohort, branch, 0.1).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let cohort = small_cohort(4, 8);
    let full = train(&cohort, &small_config(&cohort, 4, 3), None, None).unwrap();
    let first = train(&cohort, &small_config(&cohort, 2, 3), None, None).unwrap();
    let resumed = train(&cohort, &small_config(&cohort, 4, 3), None, Some(first.checkpoint)).unwrap();
    assert_eq!(full.checkpoint.to_bytes(), resumed.checkpoint.to_bytes());
    let json = |e: &[alst::train::EpochLog]| serde_json::to_string(e).unwrap();
    assert_eq!(json(&full.log.epochs[2..]), json(&resumed.log.epochs));
}

#[test]
fn resuming_with_another_seed_is_rejected() {
    let cohort = small_cohort(4, 4);
    let first = train(&cohort, &small_config(&cohort, 1, 3), None, None).unwrap();
    assert!(train(&cohort, &small_config(&cohort, 2, 4), None, Some(first.checkpoint)).is_err());
}

#[test]
fn diverging_run_aborts_with_context() {
    let cohort = small_cohort(5, 4);
    let config = TrainConfig {
        base_lr: 1e200,
        warmup_steps: 0,
        ..small_config(&cohort, 3, 0)
    };
    let out = train(&cohort, &config, None, None).unwrap();
    let msg = out.log.abort.expect("run should abort");
    assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
    assert!(out.abort.is_some());
    assert!(out.checkpoint.params.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn loss_drops_over_five_epochs_on_the_default_cohort() {
    let generated = generate_cohort(&SynthConfig::default()).unwrap();
    let cohort = LoadedCohort::from_synthetic(generated).unwrap();
    let (train_set, _) = cohort.split(0.2, 0).unwrap();
    for seed in 0..3 {
        let base = TrainConfig::default();
        let config = TrainConfig {
            model: fit_model_to_cohort(&base.model, &train_set).unwrap(),
            epochs: 6,
            seed,
            ..base
        };
        let out = train(&train_set, &config, None, None).unwrap();
        let (first, fifth) = (out.log.epochs[0].loss, out.log.epochs[5].loss);
        assert!(fifth < first, "seed {seed}: {first} -> {fifth}");
    }
}

#[test]
fn periodic_evaluation_is_logged() {
    let cohort = small_cohort(6, 6);
    let config = TrainConfig {
        eval_every: 2,
        ..small_config(&cohort, 4, 0)
    };
    let out = train(&cohort, &config, Some(&cohort), None).unwrap();
    let epochs: Vec<u64> = out.log.evals.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, vec![1, 3]);
}

#[test]
fn uninformative_model_has_chance_auc() {
    let cohort = small_cohort(7, 10);
    let mut params = alst::train::init_params(&small_config(&cohort, 1, 0)).unwrap();
    for name in ["scorer.weight", "scorer.bias"] {
        let i = params.names.iter().position(|n| n == name).unwrap();
        let shape = params.tensors[i].shape().to_vec();
        params.tensors[i] = numcore::Tensor::zeros(&shape);
    }
    let report = evaluate(&params, &cohort, Branch::Classification, 0.1).unwrap();
    assert_eq!(report.auc_ovr_macro, Some(0.5));
}

#[test]
fn fitted_toy_model_scores_perfectly_on_its_training_set() {
    let synth = SynthConfig {
        seed: 9,
        num_patients: 4,
        sessions_per_patient: [3, 5],
        feature_dim: 6,
        class_separation: 3.0,
        phoneme_frames: [1, 3],
        silence_frames: [1, 2],
        test_fraction: None,
        ..SynthConfig::default()
    };
    let cohort = LoadedCohort::from_synthetic(generate_cohort(&synth).unwrap()).unwrap();
    let config = TrainConfig {
        base_lr: 3e-3,
        decay_start_epoch: 1000,
        batch_size: 4,
        ..small_config(&cohort, 400, 0)
    };
    let out = train(&cohort, &config, None, None).unwrap();
    let report = evaluate(&out.checkpoint.params, &cohort, Branch::Regression, 0.1).unwrap();
    assert_eq!(report.macro_f1, Some(1.0));
    assert_eq!(report.pairwise_accuracy, Some(1.0));
}
