//! Trainer contracts on a tiny configuration: optimizer isolation,
//! accumulation equivalence, resume determinism, gradient routing.

use mr2pet::bert::BertConfig;
use mr2pet::checkpoint::Archive;
use mr2pet::generator::GeneratorConfig;
use mr2pet::optim::lr_at;
use mr2pet::synth::{synth_pair, DataConfig};
use mr2pet::train::{
    batch_indices, coin_is_real, discriminator_gradients, discriminator_update, generator_gradients,
    generator_update, nsp_accuracy, prepare_all, train_step, LossWeights, Models, PreparedPair, TrainConfig,
    TrainState,
};
use mr2pet::{Error, Float, Tensor};

fn data_cfg() -> DataConfig {
    DataConfig {
        mri_dims: [32, 32, 32],
        pet_dims: [2, 12, 10, 9],
        ..Default::default()
    }
}

fn gen_cfg() -> GeneratorConfig {
    GeneratorConfig {
        input_dims: [32, 32, 32],
        output_dims: [2, 12, 10, 9],
        base_channels: 2,
        ..Default::default()
    }
}

fn bert_cfg() -> BertConfig {
    BertConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        feedforward: 32,
        ..Default::default()
    }
}

fn pairs<T: Float>(n: u64) -> Vec<PreparedPair<T>> {
    let cfg = data_cfg();
    let raw: Vec<_> = (0..n).map(|i| synth_pair(cfg.sample_seed(i), &cfg).unwrap()).collect();
    prepare_all(&raw).unwrap()
}

fn models<T: Float>() -> Models<T> {
    Models::new(gen_cfg(), bert_cfg(), None).unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        base_lr: 1e-3,
        total_steps: 20,
        ..Default::default()
    }
}

fn rel_diff<T: Float>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            num += (p.f64() - q.f64()).powi(2);
            den += q.f64().powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn weighted_sum_example() {
    assert_eq!(LossWeights::default().total(1.0, 2.0, 0.5), 32.0);
}

#[test]
fn warmup_examples() {
    assert_eq!(lr_at(25, 1e-4, 0.05, 1000), 5e-5);
    assert_eq!(lr_at(50, 1e-4, 0.05, 1000), 1e-4);
    assert_eq!(lr_at(999, 1e-4, 0.05, 1000), 1e-4);
    assert_eq!(lr_at(0, 1e-4, 0.05, 1000), 0.0);
}

#[test]
fn coin_is_fair() {
    let real = (1..=250u64)
        .flat_map(|step| (0..4).map(move |slot| coin_is_real(3, step, slot)))
        .filter(|&r| r)
        .count();
    let frac = real as f64 / 1000.0;
    assert!((0.45..=0.55).contains(&frac), "real fraction {frac}");
}

#[test]
fn batches_cover_each_epoch_once() {
    // 6 pairs, batch 4: steps 1..=3 cover two full epochs
    let mut seen: Vec<usize> = (1..=3).flat_map(|s| batch_indices(9, 6, s, 4)).collect();
    let (first, second) = seen.split_at_mut(6);
    first.sort_unstable();
    second.sort_unstable();
    assert_eq!(first, [0, 1, 2, 3, 4, 5]);
    assert_eq!(second, [0, 1, 2, 3, 4, 5]);
    assert_eq!(batch_indices(9, 6, 2, 4), batch_indices(9, 6, 2, 4));
}

#[test]
fn updates_are_isolated() {
    let data = pairs::<f32>(4);
    let cfg = train_cfg();
    let mut state = TrainState::new(models(), cfg.adam);
    let g0 = state.models.generator.params.clone();
    let d0 = state.models.discriminator.params.clone();
    discriminator_update(&mut state, &data, &cfg, 1).unwrap();
    assert!(state.models.generator.params.bit_equal(&g0));
    assert!(!state.models.discriminator.params.bit_equal(&d0));
    let d1 = state.models.discriminator.params.clone();
    generator_update(&mut state, &data, &cfg, 1).unwrap();
    assert!(state.models.discriminator.params.bit_equal(&d1));
    assert!(!state.models.generator.params.bit_equal(&g0));
}

#[test]
fn accumulation_matches_one_large_batch() {
    let data = pairs::<f32>(4);
    let m = models::<f32>();
    let cfg = train_cfg();
    let idx = batch_indices(cfg.seed, data.len(), 1, 4);
    let (a, la) = generator_gradients(&m, &data, &idx, 1, &cfg, 2).unwrap();
    let (b, lb) = generator_gradients(&m, &data, &idx, 1, &cfg, 4).unwrap();
    assert!(rel_diff(&a, &b) <= 1e-5, "generator rel diff {}", rel_diff(&a, &b));
    assert!((la.total - lb.total).abs() <= 1e-5 * lb.total.abs());
    let (a, _, _) = discriminator_gradients(&m, &data, &idx, 1, &cfg, 2).unwrap();
    let (b, _, _) = discriminator_gradients(&m, &data, &idx, 1, &cfg, 4).unwrap();
    assert!(rel_diff(&a, &b) <= 1e-5, "discriminator rel diff {}", rel_diff(&a, &b));
}

#[test]
fn resume_reproduces_the_following_steps() {
    let data = pairs::<f32>(4);
    let cfg = train_cfg();
    let mut full = TrainState::new(models(), cfg.adam);
    for _ in 0..8 {
        train_step(&mut full, &data, &cfg).unwrap();
    }

    let mut first = TrainState::new(models(), cfg.adam);
    for _ in 0..3 {
        train_step(&mut first, &data, &cfg).unwrap();
    }
    let bytes = first.to_archive(serde_json::json!({"note": "test"})).encode().unwrap();
    let archive = Archive::<f32>::decode(&bytes).unwrap();
    let mut resumed = TrainState::from_archive(&archive, models(), cfg.adam).unwrap();
    assert_eq!(resumed.step, 3);
    for _ in 0..5 {
        train_step(&mut resumed, &data, &cfg).unwrap();
    }
    assert_eq!(resumed.history, full.history);
    let bits = |h: &[mr2pet::train::LossRecord]| h.iter().map(|r| r.g_total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.history), bits(&full.history));
    assert!(resumed.models.generator.params.bit_equal(&full.models.generator.params));
    assert!(resumed.models.discriminator.params.bit_equal(&full.models.discriminator.params));
}

#[test]
fn checkpoint_rejects_other_architectures() {
    let cfg = train_cfg();
    let state = TrainState::new(models::<f32>(), cfg.adam);
    let archive = state.to_archive(serde_json::Value::Null);
    let other = Models::new(
        gen_cfg(),
        BertConfig {
            hidden: 32,
            ..bert_cfg()
        },
        None,
    )
    .unwrap();
    assert!(matches!(
        TrainState::from_archive(&archive, other, cfg.adam),
        Err(Error::CheckpointMismatch(_))
    ));
    let with_cnn = Models::new(gen_cfg(), bert_cfg(), Some(Default::default())).unwrap();
    assert!(TrainState::from_archive(&archive, with_cnn, cfg.adam).is_err());
}

#[test]
fn every_component_reaches_the_generator() {
    let data = pairs::<f32>(2);
    let m = models::<f32>();
    let idx = [0, 1];
    for (name, weights) in [
        ("nsp", (1.0, 0.0, 0.0)),
        ("mlm", (0.0, 1.0, 0.0)),
        ("l1", (0.0, 0.0, 1.0)),
    ] {
        let cfg = TrainConfig {
            weights: LossWeights {
                lambda_nsp: weights.0,
                lambda_mlm: weights.1,
                lambda_l1: weights.2,
            },
            ..train_cfg()
        };
        let (g, _) = generator_gradients(&m, &data, &idx, 1, &cfg, 2).unwrap();
        let norm: f64 = g.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
        assert!(norm > 0.0, "{name} gradient is zero");
    }
}

#[test]
fn l1_only_training_is_monotone_on_one_sample() {
    let data = pairs::<f32>(1);
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_nsp: 0.0,
            lambda_mlm: 0.0,
            lambda_l1: 1.0,
        },
        base_lr: 1e-3,
        total_steps: 50,
        ..Default::default()
    };
    let mut state = TrainState::new(models(), cfg.adam);
    for _ in 0..50 {
        train_step(&mut state, &data, &cfg).unwrap();
    }
    let l1: Vec<f64> = state.history.iter().map(|r| r.g_l1).collect();
    for w in l1.windows(2) {
        assert!(w[1] <= w[0], "L1 rose: {} -> {}", w[0], w[1]);
    }
    assert!(state.history.iter().all(|r| r.g_nsp == 0.0 && r.g_mlm == 0.0));
}

#[test]
fn cnn_discriminator_trains_and_checkpoints() {
    let data = pairs::<f32>(2);
    let cfg = TrainConfig {
        use_cnn_d: true,
        ..train_cfg()
    };
    let m = Models::new(gen_cfg(), bert_cfg(), Some(Default::default())).unwrap();
    let mut state = TrainState::<f32>::new(m, cfg.adam);
    let c0 = state.models.cnn_d.as_ref().unwrap().params.clone();
    train_step(&mut state, &data, &cfg).unwrap();
    assert!(!state.models.cnn_d.as_ref().unwrap().params.bit_equal(&c0));
    let a = state.to_archive(serde_json::Value::Null);
    let fresh = Models::new(gen_cfg(), bert_cfg(), Some(Default::default())).unwrap();
    let back = TrainState::from_archive(&a, fresh, cfg.adam).unwrap();
    assert!(back.models.cnn_d.unwrap().params.bit_equal(&state.models.cnn_d.unwrap().params));
}

#[test]
fn runaway_learning_rate_aborts() {
    let data = pairs::<f32>(2);
    let cfg = TrainConfig {
        base_lr: 1e4,
        warmup_fraction: 0.01,
        divergence_factor: 2.0,
        total_steps: 30,
        ..Default::default()
    };
    let mut state = TrainState::new(models(), cfg.adam);
    let err = (0..30).find_map(|_| train_step(&mut state, &data, &cfg).err());
    assert!(
        matches!(err, Some(Error::Diverged { .. } | Error::NonFiniteLoss { .. })),
        "{err:?}"
    );
}

#[test]
fn nsp_accuracy_is_a_fraction() {
    let data = pairs::<f32>(2);
    let acc = nsp_accuracy(&models(), &data, 0).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(matches!(nsp_accuracy::<f32>(&models(), &[], 0), Err(Error::NoData)));
}
