use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mixssl::checkpoint::load_checkpoint;
use mixssl::data::{content_hash, generate_synthetic, load_dataset, write_dataset, Dataset, Split, SyntheticSpec};
use mixssl::evaluation::{
    compare_runs, evaluate, loss_curve_png, predict, roc_curve, roc_curve_png, ComparisonTable, MetricsReport, RunEntry,
};
use mixssl::model::{build_models, Component, ModelBundle};
use mixssl::objectives::{Pretext, PretextSet, StepLog};
use mixssl::training::{finetune, final_dir, pretrain, read_step_log, PretrainOutputs, TrainState};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";
pub const LOSS_CURVE: &str = "loss_curve.png";
pub const ROC_CURVE: &str = "roc_curve.png";
pub const CHECKPOINTS: &str = "checkpoints";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";

/// Objective columns of an ablation table.
pub const OBJECTIVE_COLUMNS: [&str; 4] = ["R", "T", "C", "A"];

/// Published average accuracies for the five default ablation rows, kept to
/// compare orderings against: `(selection, blood cells, cervix)`.
pub const REFERENCE_ABLATION: [(&str, f64, f64); 5] = [
    ("T", 89.26, 82.95),
    ("R", 89.63, 84.09),
    ("R,T", 92.19, 86.93),
    ("R,C", 89.22, 81.25),
    ("R,A", 90.39, 82.96),
];

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    pub force: bool,
}

/// Creates `dir`, clearing a previous run there only when forced.
fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    let occupied = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
    if occupied {
        if !force {
            return Err(CliError::Exists(dir.to_path_buf()));
        }
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(CliError::Config(format!(
                "{} is not a previous run directory; refusing to clear it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub struct Corpora {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub aux: Option<Dataset>,
    pub hashes: BTreeMap<String, String>,
}

fn spec_hash(spec: &SyntheticSpec) -> String {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    format!("synthetic:{}", hex::encode(Sha256::digest(&json)))
}

/// Loads corpora from disk when roots are configured, otherwise generates
/// them in memory from the synthetic section.
pub fn load_corpora(cfg: &RunConfig, with_val: bool, with_aux: bool) -> CliResult<Corpora> {
    cfg.validate_data_sources()?;
    let mut hashes = BTreeMap::new();
    let synthetic = |split| -> CliResult<_> {
        let spec = cfg.data.synthetic.as_ref().expect("checked by validate_data_sources");
        Ok(generate_synthetic(spec, split)?)
    };
    let (train, val) = match &cfg.data.target_root {
        Some(root) => {
            hashes.insert("target".into(), content_hash(root)?);
            let val = with_val.then(|| load_dataset(root, Split::Val)).transpose()?;
            (load_dataset(root, Split::Train)?, val)
        }
        None => {
            hashes.insert("target".into(), spec_hash(cfg.data.synthetic.as_ref().expect("checked")));
            let val = if with_val { Some(synthetic(Split::Val)?.target) } else { None };
            (synthetic(Split::Train)?.target, val)
        }
    };
    let aux = if with_aux {
        Some(match &cfg.data.aux_root {
            Some(root) => {
                hashes.insert("auxiliary".into(), content_hash(root)?);
                load_dataset(root, Split::Train)?
            }
            None => {
                hashes.insert("auxiliary".into(), spec_hash(cfg.data.synthetic.as_ref().expect("checked")));
                synthetic(Split::Train)?.auxiliary
            }
        })
    } else {
        None
    };
    Ok(Corpora { train, val, aux, hashes })
}

fn write_loss_curve(dir: &Path, logs: &[StepLog]) -> CliResult<()> {
    let total: Vec<f64> = logs.iter().map(|l| l.report.total).collect();
    let mut series = vec![("total", total)];
    let r: Vec<f64> = logs.iter().filter_map(|l| l.report.reconstruction).collect();
    let t: Vec<f64> = logs.iter().filter_map(|l| l.report.transparency).collect();
    if !r.is_empty() {
        series.push(("reconstruction", r));
    }
    if !t.is_empty() {
        series.push(("transparency", t));
    }
    loss_curve_png(&dir.join(LOSS_CURVE), &series)?;
    Ok(())
}

fn history_logs(state: &TrainState) -> Vec<StepLog> {
    let first = state.global_step + 1 - state.loss_history.len() as u64;
    state
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, r)| StepLog { step: first + i as u64, report: r.clone() })
        .collect()
}

/// `synth`: writes the synthetic target (train and val) and auxiliary
/// corpora in the dataset layout.
pub fn cmd_synth(cfg: &RunConfig, opts: Options) -> CliResult<RunManifest> {
    cfg.validate()?;
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("synth needs a [data.synthetic] section".into()))?;
    let out = cfg.output_dir("synth");
    let target_root = cfg.data.target_root.clone().unwrap_or_else(|| out.join("target"));
    let aux_root = cfg.data.aux_root.clone().unwrap_or_else(|| out.join("auxiliary"));
    let splits = [target_root.join("train"), target_root.join("val"), aux_root.join("train")];
    let existing: Vec<&PathBuf> = splits.iter().filter(|p| p.exists()).collect();
    if let Some(first) = existing.first() {
        if !opts.force {
            return Err(CliError::Exists((*first).clone()));
        }
    }
    let train = generate_synthetic(spec, Split::Train)?;
    let val = generate_synthetic(spec, Split::Val)?;
    for p in existing {
        fs::remove_dir_all(p)?;
    }
    fs::create_dir_all(&out)?;
    let mut manifest = RunManifest::start("synth", cfg);
    write_dataset(&target_root, Split::Train, &train.target)?;
    write_dataset(&target_root, Split::Val, &val.target)?;
    write_dataset(&aux_root, Split::Train, &train.auxiliary)?;
    manifest.dataset_hashes.insert("target".into(), content_hash(&target_root)?);
    manifest.dataset_hashes.insert("auxiliary".into(), content_hash(&aux_root)?);
    manifest.artifacts = vec![target_root.clone(), aux_root.clone()];
    manifest.detail("target_train_images", train.target.len());
    manifest.detail("target_val_images", val.target.len());
    manifest.detail("auxiliary_images", train.auxiliary.len());
    manifest.finish(&out)?;
    Ok(manifest)
}

/// `pretrain`: self-supervised pretraining with per-epoch checkpoints.
pub fn cmd_pretrain(cfg: &RunConfig, opts: Options) -> CliResult<RunManifest> {
    cfg.validate()?;
    cfg.validate_data_sources()?;
    let out = cfg.output_dir("pretrain");
    let corpora = load_corpora(cfg, false, true)?;
    prepare_dir(&out, opts.force)?;
    let mut manifest = RunManifest::start("pretrain", cfg);
    manifest.dataset_hashes = corpora.hashes.clone();
    manifest.write(&out)?;
    let ckpt = out.join(CHECKPOINTS);
    let log = out.join(TRAIN_LOG);
    let state = pretrain(
        &corpora.train,
        corpora.aux.as_ref().expect("requested"),
        &cfg.pretrain_config(),
        &PretrainOutputs { checkpoint_dir: Some(&ckpt), log_path: Some(&log) },
    )?;
    write_loss_curve(&out, &history_logs(&state))?;
    manifest.artifacts = vec![CHECKPOINTS.into(), final_dir(Path::new(CHECKPOINTS)), TRAIN_LOG.into(), LOSS_CURVE.into()];
    manifest.detail("global_step", state.global_step);
    manifest.detail("epochs", state.epoch);
    manifest.detail("final_loss", state.loss_history.last().map(|r| r.total));
    manifest.detail("components", state.bundle.components());
    manifest.detail("parameter_hashes", parameter_hashes(&state.bundle));
    manifest.finish(&out)?;
    Ok(manifest)
}

fn parameter_hashes(bundle: &ModelBundle) -> BTreeMap<String, String> {
    bundle
        .components()
        .into_iter()
        .map(|c| (c.name().to_string(), bundle.parameter_hash(c).expect("listed component")))
        .collect()
}

fn initial_bundle(cfg: &RunConfig) -> CliResult<(ModelBundle, String)> {
    match &cfg.finetune.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path, Some(&cfg.model))?;
            Ok((ck.bundle, path.display().to_string()))
        }
        None => {
            let mut model = cfg.model.clone();
            model.heads.decoder = false;
            model.heads.transparency = false;
            model.heads.projection = false;
            model.heads.aux_label = false;
            model.heads.classifier = false;
            model.class_count = None;
            Ok((build_models(&model, cfg.seed)?, "random-init".into()))
        }
    }
}

/// `finetune`: supervised training from a checkpoint (or random init),
/// then evaluation on the validation split.
pub fn cmd_finetune(cfg: &RunConfig, opts: Options) -> CliResult<(RunManifest, MetricsReport)> {
    cfg.validate()?;
    cfg.validate_data_sources()?;
    let out = cfg.output_dir("finetune");
    let (bundle, source) = initial_bundle(cfg)?;
    let corpora = load_corpora(cfg, true, false)?;
    prepare_dir(&out, opts.force)?;
    let mut manifest = RunManifest::start("finetune", cfg);
    manifest.dataset_hashes = corpora.hashes.clone();
    manifest.write(&out)?;

    let encoder_before = bundle.parameter_hash(Component::Encoder);
    let state = finetune(
        bundle,
        &corpora.train,
        &cfg.finetune_config(),
        Some(&out.join(CHECKPOINTS)),
        Some(&out.join(FINETUNE_LOG)),
    )?;
    let val = corpora.val.as_ref().expect("requested");
    let mut report = evaluate(&state.bundle, val, &cfg.eval)?;
    report.metadata = serde_json::json!({ "run_manifest": MANIFEST_FILE, "mode": cfg.finetune.mode, "initialization": source });
    report.write(&out)?;
    manifest.artifacts = vec![
        CHECKPOINTS.into(),
        FINETUNE_LOG.into(),
        LOSS_CURVE.into(),
        "metrics.json".into(),
        "metrics.csv".into(),
    ];
    if report.roc_auc.is_some() {
        let preds = predict(&state.bundle, val, &cfg.eval)?;
        let scores: Vec<f64> = preds.scores().column(cfg.eval.positive_class).to_vec();
        let truth: Vec<bool> = preds.truth().iter().map(|&t| t == cfg.eval.positive_class).collect();
        roc_curve_png(&out.join(ROC_CURVE), &roc_curve(&scores, &truth))?;
        manifest.artifacts.push(ROC_CURVE.into());
    }
    write_loss_curve(&out, &history_logs(&state))?;
    manifest.detail("mode", cfg.finetune.mode);
    manifest.detail("initialization", &source);
    manifest.detail("encoder_hash_before", encoder_before);
    manifest.detail("encoder_hash_after", state.bundle.parameter_hash(Component::Encoder));
    manifest.detail("headline", report.headline());
    manifest.finish(&out)?;
    Ok((manifest, report))
}

/// Directory-safe row name: `R+T`.
pub fn selection_label(s: &PretextSet) -> String {
    s.iter().map(|p| p.letter().to_string()).collect::<Vec<_>>().join("+")
}

fn checkmarks(s: &PretextSet) -> Vec<String> {
    Pretext::ALL
        .iter()
        .map(|&p| if s.contains(p) { "✓".to_string() } else { String::new() })
        .collect()
}

/// `ablate`: pretrain, fine-tune and evaluate once per objective selection
/// with shared seeds, then tabulate.
pub fn cmd_ablate(cfg: &RunConfig, opts: Options) -> CliResult<(RunManifest, ComparisonTable)> {
    cfg.validate()?;
    cfg.validate_data_sources()?;
    let out = cfg.output_dir("ablate");
    let corpora = load_corpora(cfg, true, true)?;
    let (train, val, aux) = (&corpora.train, corpora.val.as_ref().expect("requested"), corpora.aux.as_ref().expect("requested"));
    prepare_dir(&out, opts.force)?;
    let mut manifest = RunManifest::start("ablate", cfg);
    manifest.dataset_hashes = corpora.hashes.clone();
    manifest.write(&out)?;

    let mut entries = Vec::new();
    let mut observed = BTreeMap::new();
    for selection in &cfg.ablation.selections {
        let label = selection_label(selection);
        let dir = out.join(&label);
        let mut row_cfg = cfg.clone();
        row_cfg.objective.selection = selection.clone();
        row_cfg.output_dir = Some(dir.clone());
        let mut row = RunManifest::start("ablate-row", &row_cfg);
        row.dataset_hashes = corpora.hashes.clone();
        let state = pretrain(
            train,
            aux,
            &row_cfg.pretrain_config(),
            &PretrainOutputs { checkpoint_dir: Some(&dir.join(CHECKPOINTS)), log_path: Some(&dir.join(TRAIN_LOG)) },
        )?;
        write_loss_curve(&dir, &history_logs(&state))?;
        let tuned = finetune(state.bundle, train, &row_cfg.finetune_config(), None, Some(&dir.join(FINETUNE_LOG)))?;
        let mut report = evaluate(&tuned.bundle, val, &cfg.eval)?;
        report.metadata = serde_json::json!({ "run_manifest": MANIFEST_FILE, "selection": selection });
        report.write(&dir)?;
        log::info!("ablation row {label}: {:.2}", report.headline());
        observed.insert(selection.to_string(), report.headline());
        row.artifacts = vec![CHECKPOINTS.into(), TRAIN_LOG.into(), FINETUNE_LOG.into(), LOSS_CURVE.into(), "metrics.json".into()];
        row.detail("headline", report.headline());
        row.finish(&dir)?;
        entries.push(RunEntry { name: label.clone(), tags: checkmarks(selection), report: Some(report) });
        manifest.artifacts.push(label.into());
    }

    let baseline = match (&cfg.ablation.baseline, entries.len()) {
        (_, 1) => None,
        (Some(b), _) => Some(selection_label(b)),
        (None, _) => {
            let full = PretextSet::mixssl();
            cfg.ablation.selections.contains(&full).then(|| selection_label(&full))
        }
    };
    let table = compare_runs(&entries, &OBJECTIVE_COLUMNS, baseline.as_deref())?;
    fs::write(out.join(COMPARISON_CSV), table.to_csv())?;
    fs::write(out.join(COMPARISON_TXT), table.to_text())?;
    manifest.artifacts.extend([PathBuf::from(COMPARISON_CSV), PathBuf::from(COMPARISON_TXT)]);
    manifest.detail("observed", &observed);
    manifest.detail("reference_ordering", reference_ordering(&observed));
    manifest.finish(&out)?;
    Ok((manifest, table))
}

/// Compares the observed `R,T > R > T` ordering with the reference rows.
/// Informational only.
pub fn reference_ordering(observed: &BTreeMap<String, f64>) -> serde_json::Value {
    let get = |k: &str| observed.get(k).copied();
    let holds = match (get("R,T"), get("R"), get("T")) {
        (Some(rt), Some(r), Some(t)) => Some(rt > r && r > t),
        _ => None,
    };
    serde_json::json!({
        "reference": REFERENCE_ABLATION
            .iter()
            .map(|(s, a, b)| serde_json::json!({ "selection": s, "blood_cells": a, "cervix": b }))
            .collect::<Vec<_>>(),
        "claim": "R,T > R > T",
        "observed_holds": holds,
    })
}

/// `report`: tabulates the given run directories and renders their loss
/// curves.
pub fn cmd_report(
    run_dirs: &[PathBuf],
    baseline: Option<&str>,
    cfg: &RunConfig,
    opts: Options,
) -> CliResult<(ComparisonTable, Vec<PathBuf>)> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let out = cfg.output_dir("report");
    let mut entries = Vec::new();
    let mut plots = Vec::new();
    for dir in run_dirs {
        let manifest = match RunManifest::read(dir) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping {}: no readable {MANIFEST_FILE} ({e})", dir.display());
                continue;
            }
        };
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let report = match MetricsReport::read(&dir.join("metrics.json")) {
            Ok(r) => Some(r),
            Err(_) => {
                log::warn!("{name} has no evaluation report; listing it with blank metrics");
                None
            }
        };
        for log_name in [TRAIN_LOG, FINETUNE_LOG] {
            let path = dir.join(log_name);
            if path.exists() {
                write_loss_curve(dir, &read_step_log(&path)?)?;
                plots.push(fs::canonicalize(dir.join(LOSS_CURVE))?);
                break;
            }
        }
        let selection = manifest.config.objective.selection.to_string();
        entries.push(RunEntry { name, tags: vec![selection], report });
    }
    if entries.is_empty() {
        return Err(CliError::Config("none of the given directories holds a run manifest".into()));
    }
    let baseline = match baseline {
        Some(b) => Some(b.to_string()),
        None if entries.len() > 1 => entries.iter().find(|e| e.report.is_some()).map(|e| e.name.clone()),
        None => None,
    };
    let table = compare_runs(&entries, &["objectives"], baseline.as_deref())?;
    prepare_dir(&out, opts.force)?;
    let mut manifest = RunManifest::start("report", cfg);
    manifest.write(&out)?;
    fs::write(out.join(COMPARISON_CSV), table.to_csv())?;
    fs::write(out.join(COMPARISON_TXT), table.to_text())?;
    manifest.artifacts = vec![COMPARISON_CSV.into(), COMPARISON_TXT.into()];
    manifest.artifacts.extend(plots.iter().cloned());
    manifest.detail("runs", run_dirs);
    manifest.finish(&out)?;
    Ok((table, plots))
}
