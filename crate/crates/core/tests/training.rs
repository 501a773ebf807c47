mod common;

use hsacn_core::ingest::{build_corpus, CapOverrides, Corpus, Split};
use hsacn_core::model::{accumulate, is_bias, Example, HsacnParams, Model, ModelConfig};
use hsacn_core::parallel::Parallelism;
use hsacn_core::synthetic::{planted_corpus, PlantedConfig};
use hsacn_core::train::{evaluate, initial_params, predict_split, rmse, train, EpochRecord, TrainConfig, TrainState};
use hsacn_core::{HsacnError, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        word_hidden: 4,
        sentence_hidden: 4,
        latent: 3,
        clip: 2,
        ..ModelConfig::default()
    }
}

fn corpus(rating: Option<f64>) -> Corpus {
    let mut p = planted_corpus(&PlantedConfig {
        users: 12,
        items: 8,
        reviews_per_user: 4,
        ..PlantedConfig::default()
    });
    if let Some(r) = rating {
        for review in &mut p.reviews {
            review.rating = r;
        }
    }
    build_corpus(&p.reviews, 4, CapOverrides::default()).unwrap()
}

fn quiet() -> impl FnMut(&EpochRecord) {
    |_| {}
}

fn without_time(log: &[EpochRecord]) -> Vec<(usize, u64, u64)> {
    log.iter().map(|r| (r.epoch, r.train_mse.to_bits(), r.val_rmse.to_bits())).collect()
}

#[test]
fn one_step_lowers_batch_loss() {
    let c = corpus(None);
    let cfg = ModelConfig {
        dropout_embed: 0.0,
        dropout_ffn: 0.0,
        dropout_predict: 0.0,
        ..tiny()
    };
    let tc = TrainConfig {
        learning_rate: 1e-5,
        ..TrainConfig::default()
    };
    let batch: Vec<(Example, f64)> = c
        .split(Split::Train)
        .iter()
        .take(8)
        .map(|it| (Example::from_corpus(&c, it.user, it.item).unwrap(), it.rating))
        .collect();
    let loss = |p: &HsacnParams<Tensor<f64>>| -> f64 {
        let m = Model::new(p, &cfg).unwrap();
        batch
            .iter()
            .map(|(e, y)| (m.predict_example(&c.reviews, e, false).unwrap() - y).powi(2))
            .sum::<f64>()
            / batch.len() as f64
    };
    for seed in 0..3 {
        let init = initial_params::<f64>(&c, &cfg, seed, false).unwrap();
        let before = loss(&init);
        let mut grads = init.zeros_like();
        {
            let m = Model::new(&init, &cfg).unwrap();
            for (e, y) in &batch {
                let (_, g) = m
                    .example_gradient(&c.reviews, e, *y, 1.0 / batch.len() as f64, false, &mut common::rng(0))
                    .unwrap();
                accumulate(&mut grads, &g);
            }
        }
        let mut state = TrainState::new(init);
        state.adam_step(&grads, &tc).unwrap();
        assert_eq!(state.step, 1);
        let after = loss(&state.params);
        assert!(after < before, "seed {seed}: {after} !< {before}");
    }
}

#[test]
fn constant_ratings_are_learned_quickly() {
    let c = corpus(Some(4.0));
    let cfg = tiny();
    let tc = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let init = initial_params::<f64>(&c, &cfg, 1, false).unwrap();
    let out = train(&c, &cfg, &tc, init, &mut quiet()).unwrap();
    assert!(out.log.len() <= 3);
    assert!(out.best.val_rmse < 0.05, "{}", out.best.val_rmse);
}

#[test]
fn same_seed_same_log() {
    let c = corpus(None);
    let cfg = tiny();
    let tc = TrainConfig {
        learning_rate: 5e-3,
        max_epochs: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let init = initial_params::<f64>(&c, &cfg, 2, false).unwrap();
        train(&c, &cfg, &tc, init, &mut quiet()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(without_time(&a.log), without_time(&b.log));
    assert_eq!(a.best.params, b.best.params);

    let other = TrainConfig { seed: 12, ..tc };
    let init = initial_params::<f64>(&c, &cfg, 2, false).unwrap();
    let d = train(&c, &cfg, &other, init, &mut quiet()).unwrap();
    assert_ne!(without_time(&a.log), without_time(&d.log));
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let c = corpus(None);
    let cfg = tiny();
    let run = |parallelism| {
        let tc = TrainConfig {
            learning_rate: 5e-3,
            max_epochs: 2,
            parallelism,
            ..TrainConfig::default()
        };
        let init = initial_params::<f64>(&c, &cfg, 3, false).unwrap();
        train(&c, &cfg, &tc, init, &mut quiet()).unwrap()
    };
    let (s, p) = (run(Parallelism::Sequential), run(Parallelism::Auto));
    assert_eq!(without_time(&s.log), without_time(&p.log));
    assert_eq!(s.best.params, p.best.params);
}

#[test]
fn selected_checkpoint_is_the_best_epoch() {
    let c = corpus(None);
    let cfg = tiny();
    let tc = TrainConfig {
        learning_rate: 2e-2,
        max_epochs: 8,
        patience: 2,
        ..TrainConfig::default()
    };
    let init = initial_params::<f64>(&c, &cfg, 4, false).unwrap();
    let mut seen = Vec::new();
    let out = train(&c, &cfg, &tc, init, &mut |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, out.log);
    assert!(out.log.iter().all(|r| out.best.val_rmse <= r.val_rmse));
    let record = out.log.iter().find(|r| r.epoch == out.best.epoch).unwrap();
    assert_eq!(record.val_rmse, out.best.val_rmse);
    let again = evaluate(&out.best.params, &cfg, &c, Split::Validation, Parallelism::Sequential).unwrap();
    assert_eq!(again, out.best.val_rmse);
    if out.stopped_early {
        let last = out.log.last().unwrap().epoch;
        assert_eq!(last - out.best.epoch, tc.patience);
    }
}

#[test]
fn evaluation_ignores_partitioning() {
    let c = corpus(None);
    let cfg = tiny();
    let params = initial_params::<f64>(&c, &cfg, 5, false).unwrap();
    let whole = evaluate(&params, &cfg, &c, Split::Test, Parallelism::Auto).unwrap();
    let seq = evaluate(&params, &cfg, &c, Split::Test, Parallelism::Sequential).unwrap();
    assert_eq!(whole.to_bits(), seq.to_bits());

    let m = Model::new(&params, &cfg).unwrap();
    let test = c.split(Split::Test);
    for size in [1, 2, 3, 7] {
        let mut sse = 0.0;
        for chunk in test.chunks(size) {
            for it in chunk {
                let e = Example::from_corpus(&c, it.user, it.item).unwrap();
                let p = m.predict_example(&c.reviews, &e, false).unwrap().clamp(1.0, 5.0);
                sse += (p - it.rating).powi(2);
            }
        }
        assert!(((sse / test.len() as f64).sqrt() - whole).abs() < 1e-9);
    }
}

#[test]
fn rmse_examples() {
    assert_eq!(rmse(&[(3.0, 4.0), (5.0, 4.0)]).unwrap(), 1.0);
    assert_eq!(rmse(&[(2.0, 2.0), (4.5, 4.5)]).unwrap(), 0.0);
    // Predictions are clamped to the rating scale.
    assert_eq!(rmse(&[(7.0, 5.0), (-1.0, 1.0)]).unwrap(), 0.0);
    assert!(matches!(rmse(&[]), Err(HsacnError::Parameter(_))));
}

#[test]
fn bias_only_touches_only_biases() {
    let c = corpus(None);
    let cfg = tiny();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 2,
        bias_only: true,
        ..TrainConfig::default()
    };
    let init = initial_params::<f64>(&c, &cfg, 6, true).unwrap();
    assert!(init.w_f.data().iter().all(|&w| w == 0.0));
    let out = train(&c, &cfg, &tc, init.clone(), &mut quiet()).unwrap();
    for ((name, before), (_, after)) in init.named().iter().zip(out.best.params.named()) {
        if is_bias(name) {
            continue;
        }
        assert_eq!(*before, after, "{name} moved");
    }
    assert_ne!(init.global_bias, out.best.params.global_bias);
    let preds = predict_split(&out.best.params, &cfg, &c, Split::Test, Parallelism::Auto).unwrap();
    let p = &out.best.params;
    for ((pred, _), it) in preds.iter().zip(c.split(Split::Test)) {
        let want = p.user.bias.data()[it.user] + p.item.bias.data()[it.item] + p.global_bias.data()[0];
        assert_eq!(*pred, want);
    }
}

#[test]
fn divergence_keeps_last_good_parameters() {
    let c = corpus(None);
    let cfg = tiny();
    let tc = TrainConfig {
        learning_rate: 1e30,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    let init = initial_params::<f32>(&c, &cfg, 7, false).unwrap();
    let out = train(&c, &cfg, &tc, init, &mut quiet()).unwrap();
    assert!(out.divergence.is_some());
    assert!(out.best.params.check(&cfg).is_ok());
}

#[test]
fn invalid_configs() {
    let c = corpus(None);
    let cfg = tiny();
    let init = initial_params::<f64>(&c, &cfg, 8, false).unwrap();
    for tc in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(train(&c, &cfg, &tc, init.clone(), &mut quiet()), Err(HsacnError::Parameter(_))));
    }
}
