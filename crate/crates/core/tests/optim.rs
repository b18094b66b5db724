use mrdl_core::fusion::{GradBundle, ModelConfig, ModelParams, ParamGroupMut};
use mrdl_core::optim::*;
use mrdl_core::texdata::{generate, Dataset, LabeledImage, SyntheticSpec};
use mrdl_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        widths: [2, 3, 4],
        dict_size: 2,
        shared_dim: 4,
        classes: 2,
        ..Default::default()
    }
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        widths: [2, 3, 4],
        dict_size: 2,
        shared_dim: 4,
        batch_size: 4,
        epochs: 3,
        ..TrainConfig::default()
    }
}

fn random_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n)
        .map(|i| {
            let px = (0..64).map(|_| rng.random::<f64>()).collect();
            LabeledImage::new(8, px, i % 2, i as u64).unwrap()
        })
        .collect();
    Dataset::new(2, 8, images).unwrap()
}

fn random_params(seed: u64) -> ModelParams {
    let mut p = ModelParams::init_seeded(&tiny_model_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for g in p.groups_mut() {
        g.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    p
}

fn flat(p: &ModelParams) -> Vec<f64> {
    p.groups().iter().flat_map(|g| g.values.to_vec()).collect()
}

#[test]
fn momentum_two_step_recurrence() {
    let p0 = random_params(1);
    let g1 = GradBundle(random_params(2));
    let g2 = GradBundle(random_params(3));
    let (lr, mu) = (0.05, 0.9);
    let mut p = p0.clone();
    let mut state = SgdState::new(&p);
    sgd_step(&mut p, &g1, &mut state, lr, mu).unwrap();
    sgd_step(&mut p, &g2, &mut state, lr, mu).unwrap();

    let (a, b, c) = (flat(&p0), flat(&g1), flat(&g2));
    for (j, got) in flat(&p).into_iter().enumerate() {
        let v1 = -lr * b[j];
        let v2 = mu * v1 - lr * c[j];
        assert!((got - (a[j] + v1 + v2)).abs() < 1e-15);
    }
    for (j, v) in flat(&state.velocity).into_iter().enumerate() {
        assert!((v - (-lr * b[j] * mu - lr * c[j])).abs() < 1e-15);
    }
}

#[test]
fn plain_sgd_and_zero_gradient() {
    let p0 = random_params(4);
    let g = GradBundle(random_params(5));
    let mut p = p0.clone();
    let mut state = SgdState::new(&p);
    sgd_step(&mut p, &g, &mut state, 0.1, 0.0).unwrap();
    for ((got, a), b) in flat(&p).iter().zip(flat(&p0)).zip(flat(&g)) {
        assert_eq!(*got, a - 0.1 * b);
    }

    let mut q = p0.clone();
    let mut state = SgdState::new(&q);
    sgd_step(&mut q, &GradBundle::zeros_like(&p0), &mut state, 0.1, 0.9).unwrap();
    assert_eq!(q, p0);
}

#[test]
fn mismatched_bundle_rejected() {
    let mut p = random_params(1);
    let mut other_cfg = tiny_model_config();
    other_cfg.dict_size = 3;
    let g = GradBundle(ModelParams::zeros(&other_cfg).unwrap());
    let mut state = SgdState::new(&p);
    assert!(sgd_step(&mut p, &g, &mut state, 0.1, 0.9).is_err());
}

/// Wraps a model problem and doubles the reported smoothing-factor gradients.
struct Corrupted(ModelProblem);

impl Differentiable for Corrupted {
    fn param_groups_mut(&mut self) -> Vec<ParamGroupMut<'_>> {
        self.0.param_groups_mut()
    }
    fn loss(&self) -> Result<f64> {
        self.0.loss()
    }
    fn gradients(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let mut g = self.0.gradients()?;
        for (name, values) in &mut g {
            if name.ends_with(".smoothing") {
                values.iter_mut().for_each(|v| *v *= 2.0);
            }
        }
        Ok(g)
    }
}

#[test]
fn corrupted_smoothing_gradient_is_flagged() {
    let mut cfg = tiny_model_config();
    // 16px keeps several descriptors at the coarsest level.
    cfg.image_size = 16;
    cfg.levels = vec![2, 3];
    let problem = ModelProblem::random(cfg, 3, 2).unwrap();
    let clean = check_gradients(&mut problem.clone(), FD_STEP, 1e-4).unwrap();
    assert!(clean.all_passed(), "{clean}");

    let bad = check_gradients(&mut Corrupted(problem), FD_STEP, 1e-4).unwrap();
    let failed: Vec<&str> = bad.failures().iter().map(|g| g.name.as_str()).collect();
    assert_eq!(failed, vec!["level2.smoothing", "level3.smoothing"]);
    assert!(bad.worst() > 0.3);
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let data = random_dataset(12, 1);
    let cfg = TrainConfig {
        lr: 0.0,
        ..tiny_train_config()
    };
    let out = fit(&data, &data, &cfg).unwrap();
    let first = out.metrics.loss[0];
    for l in &out.metrics.loss {
        assert!((l - first).abs() <= 1e-12 * first);
    }
    assert!(out.metrics.val_acc.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn single_sample_overfits() {
    let data = random_dataset(1, 2);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        ..tiny_train_config()
    };
    let out = fit(&data, &data, &cfg).unwrap();
    let last = *out.metrics.loss.last().unwrap();
    assert!(last < 1e-2, "final loss {last}");
    assert_eq!(*out.metrics.val_acc.last().unwrap(), 1.0);
}

#[test]
fn equal_seeds_give_identical_metrics() {
    let data = random_dataset(16, 3);
    let cfg = tiny_train_config();
    let a = fit(&data, &data, &cfg).unwrap();
    let b = fit(&data, &data, &cfg).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.model, b.model);
    assert_eq!(a.rng, b.rng);
    let c = fit(&data, &data, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.metrics.to_csv(), c.metrics.to_csv());
}

#[test]
fn metrics_lengths_match_epochs() {
    let data = random_dataset(8, 4);
    let out = fit(&data, &data, &tiny_train_config()).unwrap();
    assert_eq!(out.metrics.epochs(), 3);
    assert_eq!(out.metrics.loss.len(), 3);
    assert_eq!(out.metrics.val_acc.len(), 3);
    assert_eq!(out.metrics.omega.len(), 3);
    let csv = out.metrics.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().next().unwrap().starts_with("epoch,loss,val_acc,"));
}

#[test]
fn empty_training_set_rejected() {
    let empty = Dataset::new(2, 8, Vec::new()).unwrap();
    let cfg = tiny_train_config();
    assert!(fit(&empty, &random_dataset(2, 1), &cfg).is_err());
}

#[test]
fn invalid_configs_rejected() {
    let base = TrainConfig::default();
    for bad in [
        TrainConfig { lr: -0.1, ..base.clone() },
        TrainConfig { lr: f64::NAN, ..base.clone() },
        TrainConfig { momentum: 1.0, ..base.clone() },
        TrainConfig { epochs: 0, ..base.clone() },
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig { grad_clip: Some(0.0), ..base.clone() },
        TrainConfig { decay_epoch: Some(0), ..base.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(base.validate().is_ok());
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig {
        lr: 0.1,
        decay_epoch: Some(3),
        ..TrainConfig::default()
    };
    assert_eq!(cfg.lr_at(1), 0.1);
    assert_eq!(cfg.lr_at(2), 0.1);
    assert!((cfg.lr_at(3) - 0.01).abs() < 1e-15);
    assert_eq!(TrainConfig::default().lr_at(100), 0.01);
}

#[test]
fn config_text_round_trip_and_errors() {
    let cfg = TrainConfig {
        lr: 0.125,
        levels: vec![2, 3],
        grad_clip: Some(1.5),
        decay_epoch: Some(7),
        ..TrainConfig::default()
    };
    assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);

    let mut c = TrainConfig::default();
    c.apply_kv("# comment\n\nepochs = 4\ngrad_clip=none\n").unwrap();
    assert_eq!(c.epochs, 4);
    assert_eq!(c.grad_clip, None);
    let err = TrainConfig::from_kv("lr=0.1\nbogus=1\n").unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
    assert!(TrainConfig::from_kv("no equals sign").is_err());
    assert!(parse_kv("=3").is_err());
}

#[test]
fn clipping_rescales_only_large_gradients() {
    let mut g = random_params(6);
    let norm = flat(&g).iter().map(|v| v * v).sum::<f64>().sqrt();
    let before = flat(&g);
    assert_eq!(clip_global_norm(&mut g, norm * 2.0), norm);
    assert_eq!(flat(&g), before);

    let reported = clip_global_norm(&mut g, 0.5);
    assert!((reported - norm).abs() < 1e-12);
    let after = flat(&g);
    let new_norm = after.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((new_norm - 0.5).abs() < 1e-12);
    for (a, b) in after.iter().zip(&before) {
        assert!((a / b - 0.5 / norm).abs() < 1e-9 || *b == 0.0);
    }
}

#[test]
fn simplex_holds_after_every_step() {
    let data = random_dataset(12, 5);
    let cfg = TrainConfig {
        lr: 0.2,
        ..tiny_train_config()
    };
    let mut steps = 0;
    train_with_observer(
        mrdl_core::fusion::Model::new(tiny_model_config(), 0).unwrap(),
        &data,
        &data,
        &cfg,
        |ev| {
            steps += 1;
            assert!(check_simplex(ev.omega).is_ok());
            assert!((ev.omega.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        },
    )
    .unwrap();
    assert_eq!(steps, 9);
    assert!(check_simplex(&[0.5, 0.6]).is_err());
    assert!(check_simplex(&[1.0, 0.0]).is_err());
}

/// Default configuration on the default synthetic set: the mean batch loss
/// over the last steps of the first epoch is below that of the first steps.
#[test]
fn loss_decreases_during_first_epoch() {
    let data = generate(&SyntheticSpec::default_with_seed(1), 50).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut losses = Vec::new();
    let mc = cfg.model_config(data.image_size, data.classes).unwrap();
    let model = mrdl_core::fusion::Model::new(mc, cfg.seed).unwrap();
    let empty = Dataset::new(data.classes, data.image_size, Vec::new()).unwrap();
    train_with_observer(model, &data, &empty, &cfg, |ev| losses.push(ev.batch_loss)).unwrap();
    let k = 3;
    let head: f64 = losses[..k].iter().sum::<f64>() / k as f64;
    let tail: f64 = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(tail < head, "first {head:.4} last {tail:.4}: {losses:?}");
}

#[test]
fn empty_report_for_parameterless_target() {
    struct Nothing;
    impl Differentiable for Nothing {
        fn param_groups_mut(&mut self) -> Vec<ParamGroupMut<'_>> {
            Vec::new()
        }
        fn loss(&self) -> Result<f64> {
            Ok(1.0)
        }
        fn gradients(&self) -> Result<Vec<(String, Vec<f64>)>> {
            Ok(Vec::new())
        }
    }
    let r = check_gradients(&mut Nothing, FD_STEP, 1e-4).unwrap();
    assert!(r.groups.is_empty() && r.all_passed());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_momentum_step_is_plain_descent(seed in 0u64..1000, lr in 0.0f64..1.0) {
        let p0 = random_params(seed);
        let g = GradBundle(random_params(seed + 1));
        let mut p = p0.clone();
        let mut state = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut state, lr, 0.0).unwrap();
        for ((got, a), b) in flat(&p).iter().zip(flat(&p0)).zip(flat(&g)) {
            prop_assert_eq!(*got, a - lr * b);
        }
    }

    #[test]
    fn clipped_norm_never_exceeds_bound(seed in 0u64..1000, max in 0.01f64..10.0) {
        let mut g = random_params(seed);
        clip_global_norm(&mut g, max);
        let n = flat(&g).iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(n <= max * (1.0 + 1e-12));
    }
}
