use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixssl_cli::manifest::MANIFEST_FILE;
use mixssl_cli::{RunConfig, RunManifest};

fn base_toml(root: &Path, classes: usize) -> String {
    format!(
        r#"
preset = "toy"
seed = 3

[data]
target_root = "{root}/data/target"
aux_root = "{root}/data/auxiliary"

[data.synthetic]
class_count = {classes}
per_class = 6
size = [16, 16]
contrast_level = 0.6
seed = 1
aux_class_count = 3

[model]
feature_dim = 16
image_size = [16, 16]

[optimizer]
epochs = 2
batch_size = 4
learning_rate = 0.001

[finetune]
mode = "linear-probe"
epochs = 2
"#,
        root = root.display()
    )
}

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(classes: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), base_toml(dir.path(), classes)).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mixssl"))
            .current_dir(self.dir.path())
            .env("MIXSSL_OUTPUT_ROOT", self.path("runs"))
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn count_files(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| if p.is_dir() { count_files(&p) } else { 1 })
        .sum()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {stderr}"))
}

#[test]
fn synth_writes_expected_counts_deterministically() {
    let sb = Sandbox::new(2);
    sb.ok(&["synth"]);
    assert_eq!(count_files(&sb.path("data/target/train")), 12);
    assert_eq!(count_files(&sb.path("data/target/val")), 12);
    assert_eq!(count_files(&sb.path("data/auxiliary/train")), 18);
    let first = RunManifest::read(&sb.path("runs/synth")).unwrap();

    let again = sb.run(&["synth"]);
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(error_json(&again)["error"], "output-exists");

    sb.ok(&["synth", "--force"]);
    let second = RunManifest::read(&sb.path("runs/synth")).unwrap();
    assert_eq!(first.dataset_hashes, second.dataset_hashes);
}

#[test]
fn invalid_class_count_fails_before_writing() {
    let sb = Sandbox::new(1);
    let out = sb.run(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!sb.path("data").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let sb = Sandbox::new(2);
    let text = std::fs::read_to_string(sb.path("run.toml")).unwrap();
    std::fs::write(sb.path("run.toml"), text.replace("[model]", "[model]\nfeature_dims = 3")).unwrap();
    let out = sb.run(&["pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["exit_code"], 2);
}

#[test]
fn flags_override_file_and_pretext_selection_is_isolated() {
    let sb = Sandbox::new(2);
    sb.ok(&["synth"]);
    sb.ok(&["pretrain", "--epochs", "1", "--pretext", "R", "--gamma", "0"]);
    let ck = sb.path("runs/pretrain/checkpoints");
    assert!(ck.join("epoch_001").is_dir());
    assert!(!ck.join("epoch_002").exists());
    assert!(ck.join("final").is_dir());
    let manifest = RunManifest::read(&sb.path("runs/pretrain")).unwrap();
    assert_eq!(manifest.config.optimizer.epochs, 1);
    assert_eq!(manifest.details["components"], serde_json::json!(["encoder", "decoder"]));
    assert!(manifest.deviations.iter().any(|d| d.starts_with("objective.gamma: 0")));
    let log = std::fs::read_to_string(sb.path("runs/pretrain/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(!log.contains("transparency"));
    assert!(sb.path("runs/pretrain/loss_curve.png").is_file());
}

#[test]
fn probe_keeps_encoder_and_reports_binary_metrics() {
    let sb = Sandbox::new(2);
    sb.ok(&["synth"]);
    sb.ok(&["pretrain"]);
    let ckpt = sb.path("runs/pretrain/checkpoints/final");
    sb.ok(&["finetune", "--checkpoint", ckpt.to_str().unwrap()]);
    let dir = sb.path("runs/finetune");
    let m = RunManifest::read(&dir).unwrap();
    assert_eq!(m.details["encoder_hash_before"], m.details["encoder_hash_after"]);
    assert!(dir.join("roc_curve.png").is_file());
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["roc_auc"].is_number());
    assert!(dir.join(MANIFEST_FILE).is_file());

    sb.ok(&["finetune", "--force", "--mode", "full", "--output-dir", "full"]);
    let m = RunManifest::read(&sb.path("full")).unwrap();
    assert_ne!(m.details["encoder_hash_before"], m.details["encoder_hash_after"]);
    assert_eq!(m.details["initialization"], "random-init");

    let out = sb.ok(&["report", dir.to_str().unwrap(), sb.path("full").to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("finetune") && text.contains("full"), "{text}");
}

#[test]
fn multiclass_reports_have_no_auc() {
    let sb = Sandbox::new(4);
    sb.ok(&["synth"]);
    sb.ok(&["finetune"]);
    let dir = sb.path("runs/finetune");
    assert!(!dir.join("roc_curve.png").exists());
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["roc_auc"].is_null());
    assert_eq!(metrics["averaging"], "macro");
}

#[test]
fn missing_inputs_map_to_data_and_checkpoint_codes() {
    let sb = Sandbox::new(2);
    let out = sb.run(&["pretrain"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "dataset-not-found");

    sb.ok(&["synth"]);
    let out = sb.run(&["finetune", "--checkpoint", "nowhere"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "checkpoint-not-found");

    sb.ok(&["pretrain", "--epochs", "1"]);
    let text = std::fs::read_to_string(sb.path("run.toml")).unwrap();
    std::fs::write(sb.path("run.toml"), text.replace("feature_dim = 16", "feature_dim = 8")).unwrap();
    let ckpt = sb.path("runs/pretrain/checkpoints/final");
    let out = sb.run(&["finetune", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn nan_learning_rate_is_a_config_error() {
    let sb = Sandbox::new(2);
    sb.ok(&["synth"]);
    let out = sb.run(&["pretrain", "--lr", "NaN"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_selection_ablation_has_one_row_without_baseline() {
    let sb = Sandbox::new(2);
    sb.ok(&["synth"]);
    let text = std::fs::read_to_string(sb.path("run.toml")).unwrap();
    std::fs::write(sb.path("run.toml"), format!("{text}\n[ablation]\nselections = [\"R\"]\n")).unwrap();
    sb.ok(&["ablate", "--epochs", "1"]);
    let csv = std::fs::read_to_string(sb.path("runs/ablate/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(sb.path("runs/ablate/R/metrics.json").is_file());
}

#[test]
fn reference_preset_lists_only_fixed_deviations() {
    let cfg = RunConfig::load(None, None).unwrap();
    assert_eq!(cfg.deviations().len(), 2);
    let toy = RunConfig::load(None, Some(mixssl_cli::Preset::Toy)).unwrap();
    assert!(toy.deviations().iter().any(|d| d.starts_with("model.feature_dim: 128")));
}
