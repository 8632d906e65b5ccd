use std::fs;
use std::path::{Path, PathBuf};

use alst::analysis::{confusion_csv, linear_baseline, phoneme_importance, run_sweep, SweepSpec};
use alst::checkpoint::Checkpoint;
use alst::data::{load_manifest, synthesize_cohort, LoadedCohort, NUM_CLASSES};
use alst::metrics::{MetricReport, METRIC_COLUMNS};
use alst::model::Branch;
use alst::train::{build_sequences, evaluate, fit_model_to_cohort, labeled_predictions, predict_sequences, train};
use anyhow::{anyhow, bail, Context, Result};

use crate::config::LoadedConfig;
use crate::output::{sha256_cohort, sha256_file, RunDir};
use crate::{Cli, Command};

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.global.out.as_deref().ok_or_else(|| anyhow!("--out is required for this subcommand"))
}

fn load_config(cli: &Cli) -> Result<LoadedConfig> {
    Ok(LoadedConfig::load(cli.global.config.as_deref())?.with_seed(cli.global.seed))
}

fn cohort(path: &Path) -> Result<LoadedCohort> {
    LoadedCohort::from_path(path).with_context(|| format!("cannot load cohort {}", path.display()))
}

/// Runs the selected subcommand and returns its exit status.
pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Synth => synth(cli),
        Command::Validate { manifest } => validate(manifest),
        Command::Train {
            manifest,
            eval_manifest,
            resume,
        } => train_cmd(cli, manifest, eval_manifest.as_deref(), resume.as_deref()),
        Command::Eval {
            checkpoint,
            manifest,
            branch,
            tie_epsilon,
        } => eval(cli, checkpoint, manifest, *branch, *tie_epsilon),
        Command::Sweep { spec } => sweep(cli, spec),
        Command::PhonemeImportance {
            checkpoint,
            manifest,
            policy,
            branch,
            tie_epsilon,
        } => {
            let out = out_dir(cli)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let data = cohort(manifest)?;
            let result = phoneme_importance(&ckpt.params, &data, *policy, *branch, *tie_epsilon)?;
            let mut run = RunDir::create(out, "phoneme-importance")?;
            run.input("checkpoint", sha256_file(checkpoint)?);
            run.input("manifest", sha256_cohort(manifest)?);
            run.write("phoneme_importance.csv", result.to_csv())?;
            run.write_json("phoneme_importance.json", &result)?;
            run.finish(None, "ok")?;
            print!("{}", result.to_csv());
            Ok(0)
        }
        Command::Baseline {
            train_manifest,
            test_manifest,
        } => {
            let out = out_dir(cli)?;
            let loaded = load_config(cli)?;
            let cfg = &loaded.config.baseline;
            let report = linear_baseline(&cohort(train_manifest)?, &cohort(test_manifest)?, cfg)?;
            let mut run = RunDir::create(out, "baseline")?;
            run.input("train_manifest", sha256_cohort(train_manifest)?);
            run.input("test_manifest", sha256_cohort(test_manifest)?);
            run.echo_config(&loaded, cfg)?;
            run.write("report.json", report.to_json())?;
            run.write("confusion.csv", confusion_csv(&report.confusion)?)?;
            run.finish(Some(cfg.seed), "ok")?;
            println!("{}", summary_line(&report));
            Ok(0)
        }
        Command::Report { reports } => report(cli, reports),
    }
}

fn synth(cli: &Cli) -> Result<u8> {
    let out = out_dir(cli)?;
    let loaded = load_config(cli)?;
    let cfg = &loaded.config.synth;
    let manifest = synthesize_cohort(cfg, out)?;
    let run = RunDir::create(out, "synth")?;
    run.echo_config(&loaded, cfg)?;
    run.finish(Some(cfg.seed), "ok")?;
    println!(
        "wrote {} patients, {} utterances to {}",
        manifest.num_patients(),
        manifest.num_records(),
        out.display()
    );
    Ok(0)
}

fn validate(path: &Path) -> Result<u8> {
    let manifest = load_manifest(path)?;
    let dim = match manifest.records().next() {
        Some(r) => alst::data::read_feature_header(&manifest.feature_path(r))?.1.to_string(),
        None => "unknown".into(),
    };
    println!(
        "ok: {} patients, {} records, feature dim {dim}, {} phoneme labels",
        manifest.num_patients(),
        manifest.num_records(),
        manifest.phoneme_vocab.len()
    );
    Ok(0)
}

fn train_cmd(cli: &Cli, manifest: &Path, eval_manifest: Option<&Path>, resume: Option<&Path>) -> Result<u8> {
    let out = out_dir(cli)?;
    let loaded = load_config(cli)?;
    let data = cohort(manifest)?;
    let eval_data = eval_manifest.map(cohort).transpose()?;
    let mut cfg = loaded.config.train.clone();
    cfg.model = fit_model_to_cohort(&cfg.model, &data)?;
    let resume_ckpt = resume.map(Checkpoint::load).transpose()?;

    let mut run = RunDir::create(out, "train")?;
    run.input("manifest", sha256_cohort(manifest)?);
    if let Some(p) = eval_manifest {
        run.input("eval_manifest", sha256_cohort(p)?);
    }
    if let Some(p) = resume {
        run.input("resume", sha256_file(p)?);
    }
    run.echo_config(&loaded, &cfg)?;

    let outcome = train(&data, &cfg, eval_data.as_ref(), resume_ckpt)?;
    let mut log = outcome.log;
    log.final_checkpoint = Some("checkpoint.ckpt".into());
    outcome.checkpoint.save(&run.path("checkpoint.ckpt"))?;
    run.write("log.jsonl", log.to_jsonl())?;
    if let Some(e) = &eval_data {
        let report = evaluate(&outcome.checkpoint.params, e, Branch::Regression, cfg.tie_epsilon)?;
        run.write("report.json", report.to_json())?;
    }
    match outcome.abort {
        Some(err) => {
            run.finish(Some(cfg.seed), "aborted")?;
            eprintln!("error: training aborted: {err}");
            Ok(2)
        }
        None => {
            run.finish(Some(cfg.seed), "ok")?;
            if let Some(last) = log.epochs.last() {
                println!("trained {} epochs, final loss {:.6}", outcome.checkpoint.epochs_completed, last.loss);
            }
            Ok(0)
        }
    }
}

fn predictions_csv(preds: &[alst::metrics::LabeledPrediction], branch: Branch) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "patient_id".to_string(),
        "utterance_id".into(),
        "date_days".into(),
        "true_score".into(),
        "pred_score".into(),
        "pred_class".into(),
    ];
    header.extend((0..NUM_CLASSES).map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for p in preds {
        let mut row = vec![
            p.patient_id.clone(),
            p.utterance_id.clone(),
            p.date_days.to_string(),
            p.true_score.to_string(),
            p.pred_score.to_string(),
            p.pred_class(branch).to_string(),
        ];
        let probs = p.pred_probs.unwrap_or([f64::NAN; NUM_CLASSES]);
        row.extend(probs.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn eval(cli: &Cli, checkpoint: &Path, manifest: &Path, branch: Branch, tie_epsilon: f64) -> Result<u8> {
    let out = out_dir(cli)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = cohort(manifest)?;
    let sequences = build_sequences(&ckpt.params.config, &data)?;
    let outputs = predict_sequences(&ckpt.params, &sequences)?;
    let preds = labeled_predictions(&sequences, &outputs, branch);
    let report = alst::metrics::evaluate_predictions(&preds, branch, tie_epsilon)?;

    let mut run = RunDir::create(out, "eval")?;
    run.input("checkpoint", sha256_file(checkpoint)?);
    run.input("manifest", sha256_cohort(manifest)?);
    run.write("report.json", report.to_json())?;
    run.write("confusion.csv", confusion_csv(&report.confusion)?)?;
    run.write("predictions.csv", predictions_csv(&preds, branch)?)?;
    run.finish(None, "ok")?;
    println!("{}", summary_line(&report));
    Ok(0)
}

fn sweep(cli: &Cli, spec_path: &Path) -> Result<u8> {
    let out = out_dir(cli)?;
    let text = fs::read_to_string(spec_path).with_context(|| format!("cannot read {}", spec_path.display()))?;
    let mut spec: SweepSpec = toml::from_str(&text).with_context(|| format!("invalid sweep spec {}", spec_path.display()))?;
    spec.resolve_paths(spec_path.parent().unwrap_or(Path::new(".")));
    let result = run_sweep(&spec, out, cli.global.threads)?;
    let mut run = RunDir::create(out, "sweep")?;
    run.input("spec", sha256_file(spec_path)?);
    run.write("sweep.toml", &text)?;
    run.write_json("resolved_spec.json", &spec)?;
    run.finish(None, "ok")?;
    print!("{}", result.summary_csv());
    eprintln!("{} cells, {} trained, {} cached", result.cells.len(), result.trained, result.cells.len() - result.trained);
    Ok(0)
}

fn report_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if stem == "report" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn report(cli: &Cli, paths: &[PathBuf]) -> Result<u8> {
    let mut table = String::from("label,branch,records,patients");
    for m in METRIC_COLUMNS {
        table += &format!(",{m}");
    }
    table.push('\n');
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        let r: MetricReport = serde_json::from_str(&text).with_context(|| format!("{} is not a metric report", p.display()))?;
        table += &format!("{},{},{},{}", report_label(p), r.branch.name(), r.records, r.patients);
        for v in r.metric_values() {
            table += &format!(",{}", v.map(|x| x.to_string()).unwrap_or_default());
        }
        table.push('\n');
    }
    if let Some(out) = cli.global.out.as_deref() {
        let mut run = RunDir::create(out, "report")?;
        for p in paths {
            run.input("report", sha256_file(p)?);
        }
        run.write("report.csv", &table)?;
        run.finish(None, "ok")?;
    }
    print!("{table}");
    if paths.is_empty() {
        bail!("no reports given");
    }
    Ok(0)
}

fn summary_line(r: &MetricReport) -> String {
    METRIC_COLUMNS
        .iter()
        .zip(r.metric_values())
        .map(|(name, v)| match v {
            Some(v) => format!("{name} {v:.4}"),
            None => format!("{name} absent"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}
