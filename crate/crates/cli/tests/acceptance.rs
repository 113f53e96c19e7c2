//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test -p mixssl-cli --test acceptance -- 1 4`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use mixssl::checkpoint::load_checkpoint;
use mixssl::data::{
    generate_synthetic, make_pretrain_batch, mix, stack_images, AugmentationSpec, BatchSpec, Dataset, ImageTensor,
    LabeledImage, LambdaMode, LambdaSampler, Split, SyntheticSpec,
};
use mixssl::evaluation::{
    evaluate, overall_accuracy, per_class_accuracy, precision_recall_f1, roc_auc, Averaging, PredictionSet, TaskConfig,
};
use mixssl::model::{build_models, ModelBundle, ModelConfig, TOY_FEATURE_DIM};
use mixssl::objectives::{pretrain_loss, pretrain_loss_and_grads, LossWeights, PretextSet};
use mixssl::rng::stream;
use mixssl::training::{
    final_dir, finetune, pretrain, resume, training_step, FinetuneConfig, FinetuneMode, OptimizerSpec, PretrainConfig,
    PretrainOutputs, TrainState,
};
use mixssl_cli::commands::{cmd_ablate, selection_label, COMPARISON_CSV, OBJECTIVE_COLUMNS};
use mixssl_cli::{Options, Preset, RunConfig};
use ndarray::{Array2, Array3};
use rand::Rng;

type Outcome = Result<(bool, String), String>;

const SYNTH_SEED: u64 = 7;
const PRETRAIN_SEED: u64 = 1;
const PROBE_LR: f64 = 1e-3;

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, u64, fn(&mut Shared) -> Outcome); 9] = [
        (1, "mix-up algebra", 10, c1_mix_algebra),
        (2, "gradient fidelity", 60, c2_gradients),
        (3, "loss linearity in gamma", 5, c3_gamma),
        (4, "metric oracles", 30, c4_metrics),
        (5, "single-batch overfit", 5 * 60, c5_overfit),
        (6, "transparency learnability", 15 * 60, c6_transparency),
        (7, "representation benefit", 45 * 60, c7_probe),
        (8, "ablation harness", 90 * 60, c8_ablation),
        (9, "determinism and resume", 10 * 60, c9_determinism),
    ];
    let mut shared = Shared::new();
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run(&mut shared);
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n} [{name}]: {} | {detail} | {:.1}s of {budget}s",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

/// State carried from criterion 6 to criterion 7.
struct Shared {
    workdir: tempfile::TempDir,
    pretrained: Option<std::path::PathBuf>,
}

impl Shared {
    fn new() -> Self {
        Self { workdir: tempfile::tempdir().expect("temp dir"), pretrained: None }
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn image_from(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> ImageTensor {
    ImageTensor::new(Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>())).expect("valid pixels")
}

fn c1_mix_algebra(_: &mut Shared) -> Outcome {
    let mut rng = stream(1, "acceptance-mix", &[]);
    let cases = 1000;
    let mut failures = 0;
    for _ in 0..cases {
        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(8..=24), rng.random_range(8..=24));
        let t = image_from(c, h, w, &mut rng);
        let a = image_from(c, h, w, &mut rng);
        let lambda: f64 = rng.random();
        let m = mix(&t, &a, lambda).map_err(err)?;
        let mut ok = mix(&t, &a, 0.0).map_err(err)? == t && mix(&t, &a, 1.0).map_err(err)? == a;
        ok &= mix(&t, &t, lambda).map_err(err)? == t;
        for ((&mv, &tv), &av) in m.pixels().iter().zip(t.pixels()).zip(a.pixels()) {
            ok &= mv >= tv.min(av) && mv <= tv.max(av);
            ok &= (mv - ((1.0 - lambda) * tv + lambda * av)).abs() <= 1e-12;
        }
        if !ok {
            failures += 1;
        }
    }
    Ok((failures == 0, format!("{} of {cases} fuzzed cases hold all four properties", cases - failures)))
}

fn c2_gradients(_: &mut Shared) -> Outcome {
    let size = (8, 8);
    let selection: PretextSet = "R,T,C,A".parse().map_err(err)?;
    let mut cfg = PretrainConfig::toy(ModelConfig::toy(TOY_FEATURE_DIM, size), 3);
    cfg.selection = selection.clone();
    let spec = SyntheticSpec { aux_class_count: 4, aux_per_class: Some(2), ..SyntheticSpec::new(4, 2, size, 0.2, 3) };
    let data = generate_synthetic(&spec, Split::Train).map_err(err)?;
    let model = cfg.resolved_model(Some(4));
    let bundle = build_models(&model, 3).map_err(err)?;
    let targets: Vec<&LabeledImage> = data.target.samples.iter().collect();
    let batch_spec = BatchSpec {
        target_augment: AugmentationSpec::identity(size),
        aux_augment: None,
        view_augment: Some(AugmentationSpec::basic(size)),
        seed: 3,
    };
    let sampler = LambdaSampler::new(1.0, LambdaMode::PerSample, 3).map_err(err)?;
    let batch = make_pretrain_batch(&targets, &data.auxiliary.samples, &batch_spec, &sampler, 0).map_err(err)?;
    let weights = LossWeights::default();
    let (_, grads) = pretrain_loss_and_grads(&bundle, &batch, &weights, &selection).map_err(err)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for c in bundle.components() {
        let analytic = grads.get(c).ok_or("missing gradient group")?;
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for (p, g) in analytic.iter().enumerate() {
            let g = g.as_slice().ok_or("non-contiguous gradient")?;
            // every scalar of small tensors, an even spread of large ones
            let stride = (g.len() / 40).max(1);
            for i in (0..g.len()).step_by(stride) {
                let eval = |delta: f64| -> Result<f64, String> {
                    let mut b: ModelBundle = bundle.clone();
                    let t = &mut b.component_mut(c).ok_or("missing component")?.params_mut()[p];
                    t.as_slice_mut().ok_or("non-contiguous parameter")?[i] += delta;
                    Ok(pretrain_loss(&b, &batch, &weights, &selection).map_err(err)?.total)
                };
                let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
                diff += (numeric - g[i]).powi(2);
                norm_a += g[i] * g[i];
                norm_n += numeric * numeric;
            }
        }
        let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12);
        worst = worst.max(rel);
        lines.push(format!("{c} {rel:.1e}"));
    }
    Ok((worst < 1e-3, format!("relative error per group: {}", lines.join(", "))))
}

fn c3_gamma(_: &mut Shared) -> Outcome {
    let size = (8, 8);
    let data = generate_synthetic(&SyntheticSpec::new(2, 4, size, 0.5, 4), Split::Train).map_err(err)?;
    let bundle = build_models(&ModelConfig::toy(16, size), 4).map_err(err)?;
    let t: Vec<_> = data.target.samples[..6].iter().map(|s| s.image.clone()).collect();
    let a: Vec<_> = data.auxiliary.samples[..6].iter().map(|s| s.image.clone()).collect();
    let batch = mixssl::data::MixedBatch::from_parts(&t, &a, &[0.1, 0.3, 0.5, 0.7, 0.9, 0.2]).map_err(err)?;
    let selection = PretextSet::mixssl();
    let mut worst = 0.0f64;
    let base = pretrain_loss(&bundle, &batch, &LossWeights::new(0.0).map_err(err)?, &selection).map_err(err)?;
    for gamma in [0.0, 0.5, 1.0, 2.0] {
        let r = pretrain_loss(&bundle, &batch, &LossWeights::new(gamma).map_err(err)?, &selection).map_err(err)?;
        let slope = r.transparency.ok_or("no transparency component")?;
        let recon = r.reconstruction.ok_or("no reconstruction component")?;
        worst = worst.max((r.total - (recon + gamma * slope)).abs());
        worst = worst.max((r.total - (base.total + gamma * slope)).abs());
    }
    Ok((worst <= 1e-9, format!("max deviation from affine {worst:.1e}")))
}

fn brute_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if truth[i] && !truth[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    100.0 * wins / pairs
}

fn c4_metrics(_: &mut Shared) -> Outcome {
    let mut rng = stream(4, "acceptance-metrics", &[]);
    let mut mismatches = Vec::new();
    for instance in 0..50 {
        let n = rng.random_range(2..=200);
        let k = rng.random_range(2..=5);
        let mut scores = Array2::from_shape_fn((n, k), |_| rng.random_range(1..8) as f64);
        for mut row in scores.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let mut truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        truth[0] = 0;
        truth[1] = 1;
        let preds = PredictionSet::from_scores(scores.clone(), truth.clone()).map_err(err)?;
        let pred: Vec<usize> = (0..n)
            .map(|i| {
                let row = scores.row(i);
                let best = row.iter().cloned().fold(f64::MIN, f64::max);
                row.iter().position(|&v| v == best).expect("row has a maximum")
            })
            .collect();
        let mut ok = preds.predicted() == pred.as_slice();
        let hits = (0..n).filter(|&i| pred[i] == truth[i]).count();
        ok &= overall_accuracy(&preds) == 100.0 * hits as f64 / n as f64;
        let acc = per_class_accuracy(&preds);
        let mut macro_sums = [0.0; 3];
        for c in 0..k {
            let tp = (0..n).filter(|&i| pred[i] == c && truth[i] == c).count() as f64;
            let predicted = (0..n).filter(|&i| pred[i] == c).count() as f64;
            let actual = (0..n).filter(|&i| truth[i] == c).count() as f64;
            if actual > 0.0 {
                ok &= acc.per_class.get(&c) == Some(&(100.0 * tp / actual));
            }
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if actual > 0.0 { tp / actual } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let prf = precision_recall_f1(&preds, Averaging::Binary { positive: c }).map_err(err)?;
            ok &= prf.precision == 100.0 * p && prf.recall == 100.0 * r && (prf.f1 - 100.0 * f).abs() <= 1e-12;
            macro_sums[0] += 100.0 * p;
            macro_sums[1] += 100.0 * r;
            macro_sums[2] += 100.0 * f;
        }
        let m = precision_recall_f1(&preds, Averaging::Macro).map_err(err)?;
        for (got, sum) in [m.precision, m.recall, m.f1].iter().zip(macro_sums) {
            ok &= (got - sum / k as f64).abs() <= 1e-12;
        }
        let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        let column: Vec<f64> = scores.column(1).to_vec();
        ok &= (roc_auc(&column, &positive).map_err(err)? - brute_auc(&column, &positive)).abs() <= 1e-12;
        if !ok {
            mismatches.push(instance);
        }
    }
    Ok((mismatches.is_empty(), format!("50 instances, mismatches: {mismatches:?}")))
}

fn c5_overfit(_: &mut Shared) -> Outcome {
    let size = (32, 32);
    let data = generate_synthetic(&SyntheticSpec::new(4, 1, size, 0.2, SYNTH_SEED), Split::Train).map_err(err)?;
    let targets: Vec<&LabeledImage> = data.target.samples.iter().collect();
    let batch_spec = BatchSpec {
        target_augment: AugmentationSpec::identity(size),
        aux_augment: None,
        view_augment: None,
        seed: 5,
    };
    let sampler = LambdaSampler::new(1.0, LambdaMode::PerBatch, 5).map_err(err)?;
    let batch = make_pretrain_batch(&targets, &data.auxiliary.samples, &batch_spec, &sampler, 0).map_err(err)?;
    let cfg = PretrainConfig::toy(ModelConfig::default(), 5);
    let mut state = TrainState::new(build_models(&cfg.resolved_model(None), 5).map_err(err)?, 5);
    for _ in 0..500 {
        training_step(&mut state, &batch, &cfg.weights, &cfg.selection, &cfg.optimizer).map_err(err)?;
    }
    let first = state.loss_history[0].total;
    let last = state.loss_history.last().expect("500 steps").total;
    Ok((last < 0.1 * first, format!("step 1 loss {first:.5}, step 500 loss {last:.5} ({:.1}%)", 100.0 * last / first)))
}

fn toy_corpus(split: Split) -> Result<mixssl::data::SyntheticCorpora, String> {
    generate_synthetic(&SyntheticSpec::new(4, 200, (32, 32), 0.2, SYNTH_SEED), split).map_err(err)
}

fn pretrain_reference_checkpoint(shared: &mut Shared) -> Result<std::path::PathBuf, String> {
    if let Some(p) = &shared.pretrained {
        return Ok(p.clone());
    }
    let train = toy_corpus(Split::Train)?;
    let mut cfg = PretrainConfig::toy(ModelConfig::default(), PRETRAIN_SEED);
    cfg.selection = "R,T".parse().map_err(err)?;
    cfg.optimizer.epochs = 20;
    let root = shared.workdir.path().join("pretrain");
    pretrain(&train.target, &train.auxiliary, &cfg, &PretrainOutputs { checkpoint_dir: Some(&root), log_path: None })
        .map_err(err)?;
    let dir = final_dir(&root);
    shared.pretrained = Some(dir.clone());
    Ok(dir)
}

fn c6_transparency(shared: &mut Shared) -> Outcome {
    let dir = pretrain_reference_checkpoint(shared)?;
    let bundle = load_checkpoint(&dir, None).map_err(err)?.bundle;
    let val = toy_corpus(Split::Val)?;
    let sampler = LambdaSampler::new(1.0, LambdaMode::PerSample, 606).map_err(err)?;
    let lambdas = sampler.sample(val.target.len(), 0).map_err(err)?;
    let mut pick = stream(606, "acceptance-aux", &[]);
    let (mut abs_sum, mut count) = (0.0, 0);
    for (chunk, lam) in val.target.samples.chunks(64).zip(lambdas.chunks(64)) {
        let mixed: Vec<ImageTensor> = chunk
            .iter()
            .zip(lam)
            .map(|(t, &l)| {
                let a = &val.auxiliary.samples[pick.random_range(0..val.auxiliary.len())].image;
                mix(&t.image, a, l)
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let features = bundle.encode(&stack_images(&mixed).map_err(err)?).map_err(err)?;
        let predicted = bundle.predict_transparency(&features).map_err(err)?;
        abs_sum += predicted.iter().zip(lam).map(|(p, l)| (p - l).abs()).sum::<f64>();
        count += lam.len();
    }
    let mae = abs_sum / count as f64;
    Ok((mae < 0.15, format!("held-out MAE {mae:.4} on {count} fresh mixes (predicting 0.5 gives about 0.25)")))
}

fn probe_accuracy(bundle: ModelBundle, train: &Dataset, val: &Dataset, seed: u64) -> Result<f64, String> {
    let spec = OptimizerSpec { learning_rate: PROBE_LR, ..OptimizerSpec::toy() };
    let cfg = FinetuneConfig::new(FinetuneMode::LinearProbe, spec, seed);
    let state = finetune(bundle, train, &cfg, None, None).map_err(err)?;
    Ok(evaluate(&state.bundle, val, &TaskConfig::default()).map_err(err)?.overall_accuracy)
}

fn c7_probe(shared: &mut Shared) -> Outcome {
    let dir = pretrain_reference_checkpoint(shared)?;
    let pretrained = load_checkpoint(&dir, None).map_err(err)?.bundle;
    let (train, val) = (toy_corpus(Split::Train)?.target, toy_corpus(Split::Val)?.target);
    let (mut pre, mut rand) = (Vec::new(), Vec::new());
    for (i, seed) in [0u64, 1, 2].into_iter().enumerate() {
        pre.push(probe_accuracy(pretrained.clone(), &train, &val, seed)?);
        let random = build_models(&pretrained.config, 11 + i as u64).map_err(err)?;
        rand.push(probe_accuracy(random, &train, &val, seed)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&pre) - mean(&rand);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join("/");
    Ok((
        gap >= 10.0,
        format!(
            "pretrained {:.2} [{}] vs random {:.2} [{}], gap {gap:+.2} points",
            mean(&pre),
            fmt(&pre),
            mean(&rand),
            fmt(&rand)
        ),
    ))
}

fn c8_ablation(shared: &mut Shared) -> Outcome {
    let mut cfg = RunConfig::preset(Preset::Toy);
    cfg.seed = PRETRAIN_SEED;
    cfg.data.synthetic = Some(SyntheticSpec::new(4, 200, (32, 32), 0.2, SYNTH_SEED));
    cfg.finetune.mode = FinetuneMode::LinearProbe;
    cfg.finetune.learning_rate = Some(PROBE_LR);
    let out = shared.workdir.path().join("ablate");
    cfg.output_dir = Some(out.clone());
    let (manifest, table) = cmd_ablate(&cfg, Options::default()).map_err(err)?;

    let mut ok = table.rows.len() == 5 && table.tag_columns == OBJECTIVE_COLUMNS;
    for row in &table.rows {
        let selection: PretextSet = row.name.replace('+', ",").parse().map_err(err)?;
        ok &= selection_label(&selection) == row.name;
        for (col, tag) in OBJECTIVE_COLUMNS.iter().zip(&row.tags) {
            ok &= (tag == "✓") == row.name.split('+').any(|l| l == *col);
        }
        ok &= row.report.is_some();
    }
    let csv = std::fs::read_to_string(out.join(COMPARISON_CSV)).map_err(err)?;
    let header = csv.lines().next().unwrap_or_default();
    ok &= OBJECTIVE_COLUMNS.iter().all(|c| header.split(',').any(|h| h == *c));
    ok &= Path::new(&out).join("run.json").is_file();

    let observed: BTreeMap<String, f64> = table
        .rows
        .iter()
        .filter_map(|r| r.report.as_ref().map(|m| (r.name.clone(), m.headline())))
        .collect();
    let holds = manifest.details["reference_ordering"]["observed_holds"].clone();
    let rows = observed.iter().map(|(k, v)| format!("{k} {v:.2}")).collect::<Vec<_>>().join(", ");
    Ok((ok, format!("rows: {rows}; R+T > R > T observed: {holds} (informational)")))
}

fn c9_determinism(shared: &mut Shared) -> Outcome {
    let data = generate_synthetic(&SyntheticSpec::new(4, 12, (32, 32), 0.2, SYNTH_SEED), Split::Train).map_err(err)?;
    let mut cfg = PretrainConfig::toy(ModelConfig::default(), 9);
    cfg.selection = "R,T,C,A".parse().map_err(err)?;
    cfg.optimizer.epochs = 4;
    let root = shared.workdir.path().join("determinism");
    let run = |name: &str, cfg: &PretrainConfig| -> Result<TrainState, String> {
        let dir = root.join(name);
        pretrain(&data.target, &data.auxiliary, cfg, &PretrainOutputs { checkpoint_dir: Some(&dir), log_path: None })
            .map_err(err)
    };
    let a = run("a", &cfg)?;
    let b = run("b", &cfg)?;
    let bits = |s: &TrainState| s.loss_history.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    let same_history = bits(&a) == bits(&b);
    let read = |n: &str| std::fs::read(final_dir(&root.join(n)).join("model.bin")).map_err(err);
    let same_checkpoint = read("a")? == read("b")?;

    let resumed = resume(
        &mixssl::checkpoint::epoch_dir(&root.join("a"), 2),
        &data.target,
        &data.auxiliary,
        None,
        &PretrainOutputs { checkpoint_dir: Some(&root.join("resumed")), log_path: None },
    )
    .map_err(err)?;
    let offset = a.loss_history.len() - resumed.loss_history.len();
    let worst = a.loss_history[offset..]
        .iter()
        .zip(&resumed.loss_history)
        .map(|(x, y)| (x.total - y.total).abs())
        .fold(0.0, f64::max);
    let complete = resumed.global_step == a.global_step && !resumed.loss_history.is_empty();
    Ok((
        same_history && same_checkpoint && complete && worst <= 1e-6,
        format!(
            "{} steps; bitwise history {same_history}, identical checkpoint {same_checkpoint}; resumed {} steps, max deviation {worst:.1e}",
            a.global_step,
            resumed.loss_history.len()
        ),
    ))
}
