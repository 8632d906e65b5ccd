use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[synth]
num_patients = 8
feature_dim = 6
phoneme_frames = [1, 2]
silence_frames = [1, 2]
test_fraction = 0.25

[train]
epochs = 2
batch_size = 4

[train.model]
hidden_dim = 8
ffn_dim = 16
";

fn alst(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alst"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ALST_CONFIG")
        .output()
        .expect("alst binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let out = alst(&["synth", "--config", "small.toml", "--out", "synth"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    dir
}

#[test]
fn validate_names_the_out_of_range_record() {
    let dir = synth_workspace();
    let ok = alst(&["validate", "synth/train.jsonl"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("ok:"));

    let text = fs::read_to_string(dir.path().join("synth/train.jsonl")).unwrap();
    let first = text.lines().next().unwrap();
    let record: serde_json::Value = serde_json::from_str(first).unwrap();
    let id = record["utterance_id"].as_str().unwrap().to_string();
    let score = format!("\"score\":{}", record["score"]);
    fs::write(dir.path().join("synth/bad.jsonl"), text.replacen(&score, "\"score\":7", 1)).unwrap();
    let bad = alst(&["validate", "synth/bad.jsonl"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains(&id), "{}", stderr(&bad));
}

#[test]
fn train_then_eval_writes_reports_for_both_branches() {
    let dir = synth_workspace();
    let p = dir.path();
    let train = alst(
        &["train", "--config", "small.toml", "--manifest", "synth/train.jsonl", "--out", "run"],
        p,
    );
    assert_eq!(train.status.code(), Some(0), "{}", stderr(&train));
    for f in ["checkpoint.ckpt", "log.jsonl", "run.json", "config.toml", "resolved_config.json"] {
        assert!(p.join("run").join(f).is_file(), "missing {f}");
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(run["status"], "ok");
    assert!(!fs::read_to_string(p.join("run/run.json")).unwrap().contains(p.to_str().unwrap()));

    for (branch, auc_present) in [("regression", false), ("classification", true)] {
        let out_dir = format!("eval_{branch}");
        let eval = alst(
            &[
                "eval", "--checkpoint", "run/checkpoint.ckpt", "--manifest", "synth/test.jsonl", "--branch", branch,
                "--out", &out_dir,
            ],
            p,
        );
        assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p.join(&out_dir).join("report.json")).unwrap()).unwrap();
        assert_eq!(report["auc_ovr_macro"].is_number(), auc_present, "{branch}: {report}");
        assert!(p.join(&out_dir).join("predictions.csv").is_file());
        assert!(p.join(&out_dir).join("confusion.csv").is_file());
    }

    let merged = alst(
        &["report", "eval_regression/report.json", "eval_classification/report.json"],
        p,
    );
    assert_eq!(merged.status.code(), Some(0), "{}", stderr(&merged));
    let table = String::from_utf8_lossy(&merged.stdout).into_owned();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["eval_regression", "eval_classification"]);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nepocs = 3\n").unwrap();
    let out = alst(&["synth", "--config", "bad.toml", "--out", "s"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epocs"), "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = synth_workspace();
    let p = dir.path();
    let hot = SMALL.replace("batch_size = 4\n", "batch_size = 4\nbase_lr = 1e200\nwarmup_steps = 0\n");
    fs::write(p.join("hot.toml"), hot).unwrap();
    let out = alst(&["train", "--config", "hot.toml", "--manifest", "synth/train.jsonl", "--out", "run"], p);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(run["status"], "aborted");
}

#[test]
fn config_falls_back_to_the_environment() {
    let dir = synth_workspace();
    let p = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_alst"))
        .args(["synth", "--out", "from_env"])
        .current_dir(p)
        .env("ALST_CONFIG", "small.toml")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(
        fs::read(p.join("synth/manifest.jsonl")).unwrap(),
        fs::read(p.join("from_env/manifest.jsonl")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_the_file() {
    let dir = synth_workspace();
    let p = dir.path();
    let out = alst(&["synth", "--config", "small.toml", "--seed", "5", "--out", "seeded"], p);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_ne!(
        fs::read(p.join("synth/manifest.jsonl")).unwrap(),
        fs::read(p.join("seeded/manifest.jsonl")).unwrap()
    );
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("seeded/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 5);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 8] = [
        ("synth", &["--config", "--seed", "--out"]),
        ("validate", &["<MANIFEST>"]),
        ("train", &["--manifest", "--eval-manifest", "--resume"]),
        ("eval", &["--checkpoint", "--manifest", "--branch", "--tie-epsilon"]),
        ("sweep", &["--spec", "--threads"]),
        ("phoneme-importance", &["--checkpoint", "--manifest", "--policy"]),
        ("baseline", &["--train-manifest", "--test-manifest"]),
        ("report", &["<REPORTS>"]),
    ];
    for (sub, flags) in cases {
        let out = alst(&[sub, "--help"], dir.path());
        assert_eq!(out.status.code(), Some(0));
        let help = String::from_utf8_lossy(&out.stdout).into_owned();
        for flag in flags {
            assert!(help.contains(flag), "{sub} --help lacks {flag}:\n{help}");
        }
    }
}
