use std::fs;
use std::path::Path;

use alst::analysis::{
    emit_confusion, linear_baseline, phoneme_bucket, phoneme_importance, read_confusion, run_sweep, AxisValue,
    BaselineConfig, LinearBaseline, SegmentPolicy, SweepAxis, SweepSpec,
};
use alst::data::{generate_cohort, is_vowel, synthesize_cohort, LoadedCohort, SignalPlacement, SynthConfig};
use alst::model::{AlstConfig, AlstParams, Branch, PoolingMode};
use alst::train::{evaluate, fit_model_to_cohort, init_params, train, TrainConfig};

fn cohort(config: &SynthConfig) -> LoadedCohort {
    LoadedCohort::from_synthetic(generate_cohort(config).unwrap()).unwrap()
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        num_patients: 10,
        feature_dim: 6,
        phoneme_frames: [1, 3],
        silence_frames: [1, 2],
        test_fraction: None,
        ..SynthConfig::default()
    }
}

fn small_train_config(data: &LoadedCohort, pooling: PoolingMode, epochs: u64) -> TrainConfig {
    let model = AlstConfig {
        hidden_dim: 16,
        ffn_dim: 32,
        pooling_mode: pooling,
        ..AlstConfig::default()
    };
    TrainConfig {
        model: fit_model_to_cohort(&model, data).unwrap(),
        epochs,
        batch_size: 4,
        base_lr: 2e-3,
        warmup_steps: 5,
        decay_start_epoch: 1000,
        ..TrainConfig::default()
    }
}

fn phoneme_params(data: &LoadedCohort) -> AlstParams {
    init_params(&small_train_config(data, PoolingMode::Phoneme, 1)).unwrap()
}

#[test]
fn keeping_every_segment_reproduces_the_unmasked_score() {
    // Every synthetic utterance reads the same prompt, so each phoneme is in
    // every utterance and keep-all scores the full cohort.
    let data = cohort(&small_synth(0));
    let params = phoneme_params(&data);
    let result = phoneme_importance(&params, &data, SegmentPolicy::KeepAll, Branch::Regression, 0.1).unwrap();
    let unmasked = evaluate(&params, &data, Branch::Regression, 0.1).unwrap().macro_f1;
    assert_eq!(result.unmasked_f1, unmasked);
    assert!(!result.scores.is_empty());
    for s in &result.scores {
        assert_eq!(s.macro_f1, unmasked, "{}", s.phoneme);
    }
}

#[test]
fn phonemes_missing_from_the_cohort_are_reported_absent() {
    let data = cohort(&small_synth(1));
    let mut config = small_train_config(&data, PoolingMode::Phoneme, 1);
    config.model.phoneme_vocab.push("ZH".into());
    let params = init_params(&config).unwrap();
    let result = phoneme_importance(&params, &data, SegmentPolicy::First, Branch::Regression, 0.1).unwrap();
    let zh = result.get("ZH").expect("ZH listed");
    assert_eq!(zh.utterances, 0);
    assert_eq!(zh.macro_f1, None);
    assert_eq!(result.scores.last().unwrap().phoneme, "ZH");
    assert!(result.get(&phoneme_bucket("AH0")).is_some());
}

#[test]
fn utterance_pooling_is_rejected_for_phoneme_importance() {
    let data = cohort(&small_synth(2));
    let params = init_params(&small_train_config(&data, PoolingMode::Utterance, 1)).unwrap();
    assert!(phoneme_importance(&params, &data, SegmentPolicy::First, Branch::Regression, 0.1).is_err());
}

#[test]
fn vowels_matter_more_when_only_vowels_carry_the_signal() {
    let synth = SynthConfig {
        num_patients: 30,
        feature_dim: 8,
        class_separation: 1.5,
        signal_placement: SignalPlacement::Vowels,
        ..small_synth(3)
    };
    let data = cohort(&synth);
    let out = train(&data, &small_train_config(&data, PoolingMode::Phoneme, 40), None, None).unwrap();
    let result =
        phoneme_importance(&out.checkpoint.params, &data, SegmentPolicy::First, Branch::Regression, 0.1).unwrap();
    let mean = |vowel: bool| {
        let v: Vec<f64> = result
            .scores
            .iter()
            .filter(|s| s.phoneme.split('/').all(is_vowel) == vowel)
            .filter_map(|s| s.macro_f1)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (vowels, consonants) = (mean(true), mean(false));
    assert!(vowels > consonants, "vowel F1 {vowels} vs consonant F1 {consonants}");
}

fn sweep_fixture(dir: &Path) -> SweepSpec {
    let data_dir = dir.join("data");
    synthesize_cohort(&SynthConfig { test_fraction: Some(0.3), ..small_synth(4) }, &data_dir).unwrap();
    let data = LoadedCohort::from_path(&data_dir.join("manifest.jsonl")).unwrap();
    SweepSpec {
        axis: SweepAxis::LambdaCe,
        values: vec![AxisValue::Number(0.0), AxisValue::Number(1.0)],
        seeds: vec![0, 1],
        base_config: small_train_config(&data, PoolingMode::Utterance, 2),
        branch: Branch::Regression,
        manifest: Some(data_dir.join("train.jsonl")),
        test_manifest: Some(data_dir.join("test.jsonl")),
        test_fraction: 0.2,
        split_seed: 0,
        layer_manifests: Default::default(),
    }
}

fn assert_same_tree(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) {
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    assert_eq!(names(a), names(b));
    for ((name, x), (_, y)) in a.iter().zip(b) {
        assert!(x == y, "{name} differs:\n{}\n---\n{}", String::from_utf8_lossy(x), String::from_utf8_lossy(y));
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn sweep_runs_every_cell_once_and_reuses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let spec = sweep_fixture(dir.path());
    let out = dir.path().join("sweep");
    let first = run_sweep(&spec, &out, 2).unwrap();
    assert_eq!(first.cells.len(), 4);
    assert_eq!(first.trained, 4);
    assert_eq!(first.summary.len(), 2);
    assert!(first.summary.iter().all(|r| r.runs == 2));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let before = tree(&out);

    let again = run_sweep(&spec, &out, 1).unwrap();
    assert_eq!(again.trained, 0);
    assert!(again.cells.iter().all(|c| c.cached));
    assert_same_tree(&tree(&out), &before);

    let victim = out.join("cells").join(&first.cells[2].key);
    fs::remove_dir_all(&victim).unwrap();
    let rebuilt = run_sweep(&spec, &out, 1).unwrap();
    assert_eq!(rebuilt.trained, 1);
    assert_same_tree(&tree(&out), &before);
}

#[test]
fn sweep_over_layers_needs_a_manifest_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = sweep_fixture(dir.path());
    spec.axis = SweepAxis::Layer;
    spec.values = vec![AxisValue::Number(22.0)];
    let err = run_sweep(&spec, &dir.path().join("out"), 1).unwrap_err().to_string();
    assert!(err.contains("22"), "{err}");
}

#[test]
fn baseline_separates_an_easy_cohort() {
    let easy = SynthConfig {
        num_patients: 40,
        class_separation: 3.0,
        noise_scale: 0.2,
        patient_offset_scale: 0.0,
        session_noise_scale: 0.0,
        ..small_synth(5)
    };
    let data = cohort(&easy);
    let (train_set, test_set) = data.split(0.25, 0).unwrap();
    let report = linear_baseline(&train_set, &test_set, &BaselineConfig::default()).unwrap();
    assert_eq!(report.accuracy, Some(1.0));
    assert_eq!(report.auc_ovr_macro, None);
    let again = linear_baseline(&train_set, &test_set, &BaselineConfig::default()).unwrap();
    assert_eq!(report.to_json(), again.to_json());
}

#[test]
fn baseline_scores_each_utterance_alone() {
    let data = cohort(&small_synth(6));
    let model = LinearBaseline::fit(&data, &BaselineConfig::default()).unwrap();
    let full = model.predictions(&data);
    let mut i = 0;
    for (p, feats) in data.manifest.patients.iter().zip(&data.features) {
        for f in feats {
            assert_eq!(model.predict(f) as f64, full[i].pred_score, "{}", p.patient_id);
            i += 1;
        }
    }
}

#[test]
fn confusion_file_round_trips() {
    let data = cohort(&small_synth(7));
    let params = init_params(&small_train_config(&data, PoolingMode::Utterance, 1)).unwrap();
    let report = evaluate(&params, &data, Branch::Classification, 0.1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("confusion.csv");
    emit_confusion(&report, &path).unwrap();
    assert_eq!(read_confusion(&path).unwrap(), report.confusion);
}
