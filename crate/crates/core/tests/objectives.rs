use mixssl::data::{
    generate_synthetic, make_pretrain_batch, AugmentationSpec, BatchSpec, LabeledImage, LambdaMode, LambdaSampler,
    MixedBatch, Split, SyntheticSpec,
};
use mixssl::model::{build_models, Component, ModelBundle, ModelConfig};
use mixssl::objectives::*;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_mse(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let (n, c, h, w) = a.dim();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d = a[[i, j, y, x]] - b[[i, j, y, x]];
                    sum += d * d;
                }
            }
        }
    }
    sum / (n * c * h * w) as f64
}

fn brute_info_nce(a: &Array2<f64>, b: &Array2<f64>, t: f64) -> f64 {
    let n = a.nrows();
    let norm = |m: &Array2<f64>, i: usize| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..a.ncols() {
                dot += a[[i, k]] * b[[j, k]];
            }
            sim[i][j] = dot / (norm(a, i) * norm(b, j)) / t;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| sim[i][j].exp()).sum();
        let col: f64 = (0..n).map(|j| sim[j][i].exp()).sum();
        total += -(sim[i][i].exp() / row).ln() - (sim[i][i].exp() / col).ln();
    }
    total / (2.0 * n as f64)
}

#[test]
fn mse_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let shape = (rng.random_range(1..4), 3, 8, rng.random_range(8..12));
        let a = Array4::from_shape_fn(shape, |_| rng.random::<f64>());
        let b = Array4::from_shape_fn(shape, |_| rng.random::<f64>());
        assert!((reconstruction_loss(&a, &b).unwrap() - naive_mse(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn info_nce_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..25 {
        let n = rng.random_range(2..9);
        let d = rng.random_range(2..7);
        let a = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let t = rng.random_range(0.1..2.0);
        assert!((contrastive_loss(&a, &b, t).unwrap() - brute_info_nce(&a, &b, t)).abs() < 1e-8);
    }
}

#[test]
fn cross_entropy_matches_log_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..25 {
        let (n, k) = (rng.random_range(1..8), rng.random_range(2..11));
        let logits: Array2<f64> = Array2::from_shape_fn((n, k), |_| rng.random_range(-5.0..5.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let oracle = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
                -(logits[[i, l]].exp() / z).ln()
            })
            .sum::<f64>()
            / n as f64;
        assert!((aux_label_loss(&logits, &labels).unwrap() - oracle).abs() < 1e-10);
    }
}

fn central_diff(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
    let b = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
    let (_, ga, gb) = contrastive_loss_grad(&a, &b, 0.5).unwrap();
    for idx in [(0, 0), (1, 3), (3, 4)] {
        let fa = central_diff(
            |h| {
                let mut p = a.clone();
                p[idx] += h;
                contrastive_loss(&p, &b, 0.5).unwrap()
            },
            1e-6,
        );
        let fb = central_diff(
            |h| {
                let mut p = b.clone();
                p[idx] += h;
                contrastive_loss(&a, &p, 0.5).unwrap()
            },
            1e-6,
        );
        assert!((fa - ga[idx]).abs() < 1e-7);
        assert!((fb - gb[idx]).abs() < 1e-7);
    }
    let labels = [1, 0, 4, 2];
    let (_, g) = cross_entropy_grad(&a, &labels).unwrap();
    let fd = central_diff(
        |h| {
            let mut p = a.clone();
            p[(2, 1)] += h;
            cross_entropy(&p, &labels).unwrap()
        },
        1e-6,
    );
    assert!((fd - g[(2, 1)]).abs() < 1e-8);
}

fn toy_setup(selection: &PretextSet) -> (ModelBundle, MixedBatch) {
    let size = (8, 8);
    let mut cfg = ModelConfig::toy(6, size);
    cfg.heads.projection = selection.contains(Pretext::Contrastive);
    cfg.heads.aux_label = selection.contains(Pretext::AuxLabel);
    cfg.projection_dim = 4;
    cfg.transparency_hidden = 8;
    let mut spec = SyntheticSpec::new(2, 2, size, 0.5, 9);
    spec.aux_class_count = 3;
    spec.aux_per_class = Some(2);
    cfg.aux_class_count = Some(3);
    let data = generate_synthetic(&spec, Split::Train).unwrap();
    let targets: Vec<&LabeledImage> = data.target.samples.iter().collect();
    let batch_spec = BatchSpec {
        target_augment: AugmentationSpec::identity(size),
        aux_augment: None,
        view_augment: selection.contains(Pretext::Contrastive).then(|| AugmentationSpec::basic(size)),
        seed: 5,
    };
    let sampler = LambdaSampler::new(1.0, LambdaMode::PerSample, 5).unwrap();
    let batch = make_pretrain_batch(&targets, &data.auxiliary.samples, &batch_spec, &sampler, 0).unwrap();
    (build_models(&cfg, 11).unwrap(), batch)
}

#[test]
fn pretrain_gradients_match_finite_differences() {
    let selection: PretextSet = "R,T,C,A".parse().unwrap();
    let (bundle, batch) = toy_setup(&selection);
    let weights = LossWeights::new(0.7).unwrap();
    let (_, grads) = pretrain_loss_and_grads(&bundle, &batch, &weights, &selection).unwrap();
    for c in bundle.components() {
        let analytic = grads.get(c).unwrap();
        let (mut num_sq, mut diff_sq, mut ana_sq) = (0.0, 0.0, 0.0);
        for (p, g) in analytic.iter().enumerate() {
            let step = (g.len() / 7).max(1);
            for i in (0..g.len()).step_by(step) {
                let fd = central_diff(
                    |h| {
                        let mut b = bundle.clone();
                        let t = &mut b.component_mut(c).unwrap().params_mut()[p];
                        let v = t.as_slice_mut().unwrap();
                        v[i] += h;
                        pretrain_loss(&b, &batch, &weights, &selection).unwrap().total
                    },
                    1e-6,
                );
                let a = g.as_slice().unwrap()[i];
                num_sq += fd * fd;
                ana_sq += a * a;
                diff_sq += (fd - a) * (fd - a);
            }
        }
        let rel = diff_sq.sqrt() / num_sq.sqrt().max(ana_sq.sqrt()).max(1e-12);
        assert!(rel < 1e-3, "{c}: relative error {rel}");
        assert!(ana_sq > 0.0, "{c}: zero gradient");
    }
}

#[test]
fn total_is_affine_in_gamma() {
    let selection = PretextSet::mixssl();
    let (bundle, batch) = toy_setup(&selection);
    let base = pretrain_loss(&bundle, &batch, &LossWeights::new(0.0).unwrap(), &selection).unwrap();
    for g in [0.5, 1.0, 2.0] {
        let r = pretrain_loss(&bundle, &batch, &LossWeights::new(g).unwrap(), &selection).unwrap();
        let expected = base.total + g * r.transparency.unwrap();
        assert!((r.total - expected).abs() < 1e-9);
        assert_eq!(r.reconstruction, base.reconstruction);
    }
}

#[test]
fn selection_controls_heads_and_extras() {
    let (bundle, batch) = toy_setup(&PretextSet::mixssl());
    let r_only: PretextSet = "R".parse().unwrap();
    let (report, grads) = pretrain_loss_and_grads(&bundle, &batch, &LossWeights::default(), &r_only).unwrap();
    assert!(report.transparency.is_none());
    assert!(grads.get(Component::Transparency).is_none());
    let c_only: PretextSet = "C".parse().unwrap();
    assert!(matches!(
        pretrain_loss(&bundle, &batch, &LossWeights::default(), &c_only),
        Err(mixssl::Error::Config(_))
    ));
}
