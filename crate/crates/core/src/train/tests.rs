use super::*;
use alloc::vec;
use core::f64::consts::PI;
use proptest::prelude::*;
use rand::Rng;

use crate::model::{Condition, ModelConfig, Variant};
use crate::spectro::StftConfig;

fn small_model() -> Model<f64> {
    let cfg = ModelConfig {
        variant: Variant::Lightsaft,
        num_scales: 2,
        internal_channels: 2,
        num_latent: 2,
        key_dim: 3,
        bottleneck: 4,
        tfc_layers: 1,
        kernel: [3, 3],
        num_conditions: 4,
        audio_channels: 1,
        stft: StftConfig::new(32).unwrap(),
        seed: 3,
    };
    Model::build(&cfg).unwrap()
}

fn small_batch(seed: u64) -> Batch<f64> {
    let data = make_toy_dataset::<f64>(3, 0.1, 2000, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_batch(&data, 2, 96, &StftConfig::new(32).unwrap(), &mut rng, &BatchOptions::default()).unwrap()
}

/// Energy of the DFT bins of `x` whose frequency lies below `cutoff` Hz.
fn low_band_fraction(x: &[f32], sr: f64, cutoff: f64) -> f64 {
    let n = x.len();
    let (mut low, mut all) = (0.0, 0.0);
    for k in 0..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let a = 2.0 * PI * (k * i) as f64 / n as f64;
            re += v as f64 * a.cos();
            im -= v as f64 * a.sin();
        }
        let e = re * re + im * im;
        all += e;
        if (k as f64) * sr / (n as f64) < cutoff {
            low += e;
        }
    }
    low / all
}

#[test]
fn mse_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::<f64>::from_fn(&[3, 4, 5], |_| rng.gen_range(-2.0..2.0));
    let b = Tensor::<f64>::from_fn(&[3, 4, 5], |_| rng.gen_range(-2.0..2.0));
    let mut s = 0.0;
    for i in 0..a.numel() {
        s += (a.data()[i] - b.data()[i]).powi(2);
    }
    assert!((mse_loss(&a, &b).unwrap() - s / 60.0).abs() < 1e-12);
    assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
    assert_eq!(mse_loss(&a, &a.map(|v| v + 1.0)).unwrap(), 1.0);
    assert!(matches!(mse_loss(&a, &Tensor::zeros(&[60])), Err(Error::Dimension { .. })));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let mut model = small_model();
        let mut opt = Optimizer::new(kind, 0.0, 0.5, &model.store);
        let before = model.store.params().to_vec();
        train_step(&mut model, &mut opt, &small_batch(0)).unwrap();
        for (p, q) in before.iter().zip(model.store.params()) {
            assert_eq!(p.tensor.data(), q.tensor.data(), "{}", p.name);
        }
        assert_eq!(opt.step, 1);
    }
}

#[test]
fn sgd_step_moves_against_the_gradient() {
    let mut model = small_model();
    let batch = small_batch(4);
    let (_, grads, _) = loss_and_grads(&model, &batch).unwrap();
    let before = model.store.clone();
    let lr = 1e-3;
    let mut opt = Optimizer::new(OptimizerKind::Sgd, lr, 0.0, &model.store);
    train_step(&mut model, &mut opt, &batch).unwrap();
    for (i, g) in grads.iter().enumerate() {
        let (p0, p1) = (&before.params()[i].tensor, &model.store.params()[i].tensor);
        for j in 0..p0.numel() {
            let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
            assert!((p1.data()[j] - (p0.data()[j] - lr * gj)).abs() < 1e-6);
        }
    }
}

#[test]
fn adam_first_step_has_learning_rate_magnitude() {
    let mut model = small_model();
    let batch = small_batch(5);
    let (_, grads, _) = loss_and_grads(&model, &batch).unwrap();
    let before = model.store.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, 0.0, &model.store);
    train_step(&mut model, &mut opt, &batch).unwrap();
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let (p0, p1) = (&before.params()[i].tensor, &model.store.params()[i].tensor);
        for j in 0..p0.numel() {
            let gj = g.data()[j];
            let expect = 1e-2 * gj / (gj.abs() + 1e-8);
            assert!((p0.data()[j] - p1.data()[j] - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let mut model = small_model();
    let batch = small_batch(6);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, 0.0, &model.store);
    let first = train_step(&mut model, &mut opt, &batch).unwrap();
    let mut last = first;
    for _ in 0..30 {
        last = train_step(&mut model, &mut opt, &batch).unwrap();
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_leaves_model_untouched() {
    let mut model = small_model();
    let mut batch = small_batch(7);
    batch.target.data_mut()[0] = f64::NAN;
    let before = model.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, 0.0, &model.store);
    assert!(matches!(train_step(&mut model, &mut opt, &batch), Err(Error::NonFinite(_))));
    assert_eq!(model, before);
    assert_eq!(opt.step, 0);
}

#[test]
fn dataset_is_deterministic() {
    let a = make_toy_dataset::<f32>(3, 0.5, 8000, 9).unwrap();
    let b = make_toy_dataset::<f32>(3, 0.5, 8000, 9).unwrap();
    let c = make_toy_dataset::<f32>(3, 0.5, 8000, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn splits_are_disjoint() {
    let (train, test) = make_toy_splits::<f32>(4, 2, 0.25, 8000, 1).unwrap();
    assert_eq!((train.len(), test.len()), (4, 2));
    assert_eq!((train.split, test.split), (Split::Train, Split::Test));
    let ids: Vec<usize> = train.tracks.iter().chain(&test.tracks).map(|t| t.track_id).collect();
    assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    assert!(make_toy_splits::<f32>(1, 2, 0.25, 8000, 1).is_err());
    assert!(make_toy_splits::<f32>(2, 0, 0.25, 8000, 1).is_err());
}

#[test]
fn stems_have_their_spectral_signatures() {
    let data = make_toy_dataset::<f32>(2, 0.5, 8000, 2).unwrap();
    for t in &data.tracks {
        let seg = |c: Condition| t.stem(c).channel(0)[..2000].to_vec();
        assert!(low_band_fraction(&seg(Condition::Bass), 8000.0, 300.0) >= 0.8);
        assert!(low_band_fraction(&seg(Condition::Other), 8000.0, 900.0) <= 0.05);
        let v = low_band_fraction(&seg(Condition::Vocals), 8000.0, 150.0);
        assert!(v <= 0.2, "{v}");
    }
}

#[test]
fn mixture_is_the_sum_of_stems() {
    let data = make_toy_dataset::<f32>(3, 0.25, 8000, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for gain in [false, true] {
        let opts = BatchOptions { random_gain: gain, aligned_track: None };
        let ex = sample_example(&data, 500, &mut rng, &opts).unwrap();
        for i in 0..500 {
            let s: f32 = ex.stems.iter().map(|c| c.channel(0)[i]).sum();
            assert!((ex.mixture.channel(0)[i] - s).abs() < 1e-6);
        }
        if !gain {
            for (k, &(track, offset)) in ex.sources.iter().enumerate() {
                assert_eq!(ex.stems[k].channel(0), &data.tracks[track].stems[k].channel(0)[offset..offset + 500]);
            }
        }
    }
}

#[test]
fn condition_draws_are_uniform_and_targets_match() {
    let data = make_toy_dataset::<f32>(2, 0.1, 8000, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = 10_000;
    let mut hist = [0usize; 4];
    for _ in 0..draws {
        let ex = sample_example(&data, 64, &mut rng, &BatchOptions::default()).unwrap();
        hist[ex.condition.id()] += 1;
        assert_eq!(ex.target(), &ex.stems[ex.condition.id()]);
    }
    let (mean, sd) = (draws as f64 / 4.0, (draws as f64 * 0.25 * 0.75).sqrt());
    for h in hist {
        assert!((h as f64 - mean).abs() <= 3.0 * sd, "{hist:?}");
    }
}

#[test]
fn aligned_track_draws_share_one_offset() {
    let data = make_toy_dataset::<f32>(2, 0.1, 8000, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = BatchOptions { random_gain: false, aligned_track: Some(1) };
    let ex = sample_example(&data, 100, &mut rng, &opts).unwrap();
    assert!(ex.sources.iter().all(|&s| s == ex.sources[0] && s.0 == 1));
    let bad = BatchOptions { aligned_track: Some(2), ..opts };
    assert!(matches!(sample_example(&data, 100, &mut rng, &bad), Err(Error::Input(_))));
}

#[test]
fn oversized_segment_is_rejected() {
    let data = make_toy_dataset::<f32>(2, 0.1, 8000, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(sample_example(&data, 801, &mut rng, &BatchOptions::default()), Err(Error::Input(_))));
    assert!(matches!(sample_example(&data, 0, &mut rng, &BatchOptions::default()), Err(Error::Input(_))));
    assert!(make_toy_dataset::<f32>(1, 0.1, 8000, 6).is_err());
}

#[test]
fn batch_shapes() {
    let b = small_batch(0);
    assert_eq!(b.mixture.shape(), &[2, 2, 16, 7]);
    assert_eq!(b.mixture.shape(), b.target.shape());
    assert_eq!(b.conditions.len(), 2);
}

#[test]
fn step_streams_are_deterministic_and_distinct() {
    let cfg = TrainConfig::desk();
    let draw = |mut r: ChaCha8Rng| (0..4).map(|_| r.gen::<u64>()).collect::<Vec<_>>();
    assert_eq!(draw(cfg.step_rng(5)), draw(cfg.step_rng(5)));
    assert_ne!(draw(cfg.step_rng(5)), draw(cfg.step_rng(6)));
    assert_ne!(draw(cfg.step_rng(0)), draw(cfg.validation_rng()));
    let other = TrainConfig { seed: 1, ..cfg };
    assert_ne!(draw(cfg.step_rng(5)), draw(other.step_rng(5)));
}

#[test]
fn train_config_validation() {
    let base = TrainConfig::desk();
    assert!(base.validate().is_ok());
    assert_eq!(base.segment_samples(8000), 6000);
    for bad in [
        TrainConfig { batch_size: 0, ..base },
        TrainConfig { learning_rate: -1.0, ..base },
        TrainConfig { momentum: 1.0, ..base },
        TrainConfig { segment_seconds: 0.0, ..base },
        TrainConfig { validate_every: 0, ..base },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn validation_loss_is_eval_mode_mse() {
    let model = small_model();
    let batch = small_batch(8);
    let est = model.forward_batch(&batch.mixture, &batch.conditions).unwrap();
    assert_eq!(validation_loss(&model, &batch).unwrap(), mse_loss(&est, &batch.target).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mse_is_nonnegative_and_symmetric(seed in 0u64..1000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::from_fn(&[n], |_| rng.gen_range(-3.0..3.0));
        let b = Tensor::<f64>::from_fn(&[n], |_| rng.gen_range(-3.0..3.0));
        let (ab, ba) = (mse_loss(&a, &b).unwrap(), mse_loss(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
    }
}
