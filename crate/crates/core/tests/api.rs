use lightsaft_core::eval::{sdr, OracleSeparator, Separator, SDR_EPS};
use lightsaft_core::model::{separate_track, Condition, Model, ModelConfig, SeparationConfig, Variant};
use lightsaft_core::numerics::Tensor;
use lightsaft_core::train::{make_toy_dataset, sample_batch, train_step, Optimizer, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(cfg: &ModelConfig, frames: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[cfg.spec_channels(), cfg.freq_bins(), frames], |_| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Relabelling conditions by permuting embedding rows relabels outputs.
    #[test]
    fn embedding_row_permutation(seed in 0u64..1000, variant in 0usize..3) {
        let cfg = ModelConfig { seed, ..ModelConfig::gradcheck(Variant::ALL[variant]) };
        let model = Model::<f64>::build(&cfg).unwrap();
        let mut perm: Vec<usize> = (0..cfg.num_conditions).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let name = "embedding.table";
        let table = model.store.param(model.store.find(name).unwrap()).clone();
        let dk = table.shape()[1];
        let permuted = Tensor::from_fn(table.shape(), |i| table.data()[perm[i / dk] * dk + i % dk]);
        let mut relabelled = model.clone();
        relabelled.store.set(name, permuted).unwrap();
        let x = input(&cfg, 5, seed + 1);
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(relabelled.forward_id(&x, i).unwrap(), model.forward_id(&x, p).unwrap());
        }
    }
}

#[test]
fn separation_preserves_length_and_oracle_wins() {
    let cfg = ModelConfig::gradcheck(Variant::LightsaftPlus);
    let model = Model::<f32>::build(&cfg).unwrap();
    let data = make_toy_dataset::<f32>(2, 0.6, 8000, 3).unwrap();
    let track = &data.tracks[0];
    let mix = track.mixture();
    let sep = SeparationConfig { chunk_seconds: 0.2, overlap_fraction: 0.25 };
    for c in Condition::ALL {
        let est = separate_track(&model, &mix, c, &sep).unwrap();
        assert_eq!(est.num_samples(), mix.num_samples());
        let oracle = OracleSeparator.separate(track, &mix, c).unwrap();
        assert!(sdr(track.stem(c), &oracle, SDR_EPS).unwrap() > sdr(track.stem(c), &est, SDR_EPS).unwrap());
    }
}

#[test]
fn repeated_steps_on_one_batch_reduce_loss() {
    let cfg = ModelConfig::gradcheck(Variant::Lightsaft);
    let mut model = Model::<f32>::build(&cfg).unwrap();
    let train = TrainConfig { batch_size: 2, ..TrainConfig::desk() };
    let mut opt = Optimizer::from_config(&train, &model.store);
    let data = make_toy_dataset::<f32>(2, 0.5, 8000, 5).unwrap();
    let batch = sample_batch(&data, 2, 1024, &cfg.stft, &mut train.step_rng(0), &train.batch_options()).unwrap();
    let first = train_step(&mut model, &mut opt, &batch).unwrap();
    let mut last = first;
    for _ in 0..30 {
        last = train_step(&mut model, &mut opt, &batch).unwrap();
    }
    assert!(last < 0.8 * first, "{first} -> {last}");
}
