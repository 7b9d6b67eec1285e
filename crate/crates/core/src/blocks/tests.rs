use super::*;
use crate::numerics::GradCheckOptions;
use crate::params::{grad_check_store, Mode};
use alloc::string::String;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Explicit loops: `w_l = exp(s_l) / sum exp(s)`, `s_l = q.k_l / sqrt(d_k)`.
fn oracle_weights(q: &[f64], k: &[f64], l: usize, dk: usize) -> Vec<f64> {
    let scores: Vec<f64> = (0..l)
        .map(|li| (0..dk).map(|j| q[j] * k[li * dk + j]).sum::<f64>() / (dk as f64).sqrt())
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    scores.iter().map(|s| s.exp() / z).collect()
}

#[test]
fn attention_matches_weighted_sum_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, dk) = (rng.gen_range(1..7), rng.gen_range(1..9));
        let (c, f, t) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..5));
        let q = rand_tensor(&[1, dk], &mut rng).map(|v| 3.0 * v);
        let k = rand_tensor(&[l, dk], &mut rng).map(|v| 3.0 * v);
        let v = rand_tensor(&[l, c, f, t], &mut rng);
        let got = attention_aggregate_tensors(&q, &k, &v).unwrap();
        assert_eq!(got.shape(), &[c, f, t]);
        let w = oracle_weights(q.data(), k.data(), l, dk);
        let d = c * f * t;
        for j in 0..d {
            let want: f64 = (0..l).map(|li| w[li] * v.data()[li * d + j]).sum();
            assert!((got.data()[j] - want).abs() < 1e-6, "seed {seed} elem {j}");
        }
    }
}

#[test]
fn zero_query_gives_uniform_weights_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for l in 1..9 {
        let k = rand_tensor(&[l, 5], &mut rng);
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(Tensor::zeros(&[1, 5])), g.constant(k));
        let w = attention_weights(&mut g, qv, kv).unwrap();
        assert!(g.value(w).data().iter().all(|&x| x == 1.0 / l as f64));

        let v = rand_tensor(&[l, 2, 3, 2], &mut rng);
        let out = attention_aggregate_tensors(&Tensor::zeros(&[1, 5]), g.value(kv), &v).unwrap();
        for j in 0..12 {
            let mut want = 0.0;
            for li in 0..l {
                want += (1.0 / l as f64) * v.data()[li * 12 + j];
            }
            assert_eq!(out.data()[j], want);
        }
    }
}

#[test]
fn single_latent_source_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = rand_tensor(&[1, 4], &mut rng).map(|v| 50.0 * v);
    let k = rand_tensor(&[1, 4], &mut rng);
    let v = rand_tensor(&[1, 3, 4, 5], &mut rng);
    let out = attention_aggregate_tensors(&q, &k, &v).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn attention_rejects_mismatched_latent_axis() {
    let k = Tensor::<f64>::zeros(&[3, 2]);
    let v = Tensor::<f64>::zeros(&[4, 1, 1, 1]);
    assert!(matches!(
        attention_aggregate_tensors(&Tensor::zeros(&[1, 2]), &k, &v),
        Err(Error::Dimension { .. })
    ));
}

proptest! {
    #[test]
    fn attention_weights_sum_to_one(seed in 0u64..10_000, l in 1usize..12, dk in 1usize..16, scale in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&[3, dk], &mut rng).map(|v| scale * v);
        let k = rand_tensor(&[l, dk], &mut rng).map(|v| scale * v);
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(q), g.constant(k));
        let w = attention_weights(&mut g, qv, kv).unwrap();
        for row in g.value(w).data().chunks(l) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}

#[test]
fn fc_block_count_matches_store() {
    let mut b = ParamBuilder::<f64>::new(0);
    let fc = FcBlock::new(&mut b, "fc", 7, 5);
    let store = b.finish();
    assert_eq!(fc.num_params(), 7 * 5 + 5 + 5 + 5);
    assert_eq!(store.num_scalars(), fc.num_params());
}

#[test]
fn latent_ft_counts_by_hand() {
    let (f, bf, l, dk) = (64, 8, 4, 6);
    let h = f / bf;
    for (variant, phase2) in [
        (SaftVariant::Lasaft, (l * h) * (l * f) + 3 * l * f),
        (SaftVariant::Lightsaft, h * f + 3 * f),
    ] {
        let spec = SaftSpec { variant, freq_dim: f, bottleneck: bf, num_latent: l, key_dim: dk };
        let mut b = ParamBuilder::<f64>::new(0);
        let ft = SaftFt::new(&mut b, "ft", spec).unwrap();
        let bank = LatentSourceBank::new(&mut b, "ft", l, dk).unwrap();
        let store = b.finish();
        let phase1 = f * l * h + 3 * l * h;
        assert_eq!(ft.num_params(), phase1 + phase2, "{variant:?}");
        assert_eq!(store.num_scalars(), phase1 + phase2 + l * dk);
        assert_eq!(bank.num_params(), l * dk);
    }
}

#[test]
fn tfc_and_tdf_counts_by_hand() {
    let spec = TfcSpec { in_channels: 2, growth: 4, num_layers: 3, kernel: (3, 3) };
    let mut b = ParamBuilder::<f64>::new(0);
    let tfc = Tfc::new(&mut b, "tfc", spec).unwrap();
    let tdf = Tdf::new(&mut b, "tdf", TdfSpec { freq_dim: 32, bottleneck: 4 }).unwrap();
    let store = b.finish();
    let conv = |cin: usize| 4 * cin * 9 + 4 + 2 * 4;
    assert_eq!(tfc.num_params(), conv(2) + conv(6) + conv(10));
    assert_eq!(tdf.num_params(), (32 * 8 + 3 * 8) + (8 * 32 + 3 * 32));
    assert_eq!(store.num_scalars(), tfc.num_params() + tdf.num_params());
}

#[test]
fn even_tfc_kernel_rejected() {
    let mut b = ParamBuilder::<f64>::new(0);
    let spec = TfcSpec { in_channels: 1, growth: 2, num_layers: 1, kernel: (2, 3) };
    assert!(matches!(Tfc::new(&mut b, "t", spec), Err(Error::Config(_))));
}

#[test]
fn out_of_range_condition_rejected() {
    let mut b = ParamBuilder::<f64>::new(0);
    let emb = ConditionEmbedding::new(&mut b, "embedding", 4, 3).unwrap();
    let store = b.finish();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Mode::Eval);
    assert!(matches!(make_query(&mut ctx, &emb, &[0, 4]), Err(Error::Condition { id: 4, count: 4 })));
    let q = make_query(&mut ctx, &emb, &[2, 0]).unwrap();
    assert_eq!(&g.value(q).data()[..3], &store.param(emb.table).data()[6..9]);
}

fn x_input(seed: u64, shape: &[usize]) -> (String, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    (String::from("x"), rand_tensor(shape, &mut rng))
}

/// Random projection so the objective is not symmetric in the output.
fn project(ctx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let p = rand_tensor(ctx.graph.shape(y), &mut rng);
    let p = ctx.graph.constant(p);
    let prod = ctx.graph.mul(y, p)?;
    Ok(ctx.graph.sum(prod))
}

const BLOCK_TOL: f64 = 1e-4;

#[test]
fn tdf_gradcheck() {
    for seed in 0..10 {
        let mut b = ParamBuilder::<f64>::new(seed);
        let tdf = Tdf::new(&mut b, "tdf", TdfSpec { freq_dim: 8, bottleneck: 2 }).unwrap();
        let store = b.finish();
        let r = grad_check_store(
            &store,
            Mode::Train,
            &[x_input(seed, &[2, 2, 8, 3])],
            |ctx, xs| {
                let y = tdf.forward(ctx, xs[0])?;
                project(ctx, y, seed)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < BLOCK_TOL, "seed {seed}: {:?}", r.entries);
    }
}

#[test]
fn tfc_gradcheck() {
    for seed in 0..10 {
        let mut b = ParamBuilder::<f64>::new(seed);
        let spec = TfcSpec { in_channels: 2, growth: 3, num_layers: 2, kernel: (3, 3) };
        let tfc = Tfc::new(&mut b, "tfc", spec).unwrap();
        let store = b.finish();
        let r = grad_check_store(
            &store,
            Mode::Train,
            &[x_input(seed, &[2, 2, 5, 4])],
            |ctx, xs| {
                let y = tfc.forward(ctx, xs[0])?;
                project(ctx, y, seed)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < BLOCK_TOL, "seed {seed}: {:?}", r.entries);
    }
}

fn saft_gradcheck(variant: SaftVariant) {
    for seed in 0..10 {
        let mut b = ParamBuilder::<f64>::new(seed);
        let spec = SaftSpec { variant, freq_dim: 8, bottleneck: 4, num_latent: 3, key_dim: 4 };
        let tfc = TfcSpec { in_channels: 2, growth: 2, num_layers: 1, kernel: (3, 3) };
        let block = Block::saft(&mut b, "blk", tfc, spec).unwrap();
        let emb = ConditionEmbedding::new(&mut b, "embedding", 4, 4).unwrap();
        let store = b.finish();
        let r = grad_check_store(
            &store,
            Mode::Train,
            &[x_input(seed, &[2, 2, 8, 3])],
            |ctx, xs| {
                let q = make_query(ctx, &emb, &[1, 3])?;
                let y = block.forward(ctx, xs[0], q)?;
                project(ctx, y, seed)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < BLOCK_TOL, "{variant:?} seed {seed}: {:?}", r.entries);
    }
}

#[test]
fn lasaft_block_gradcheck() {
    saft_gradcheck(SaftVariant::Lasaft);
}

#[test]
fn lightsaft_block_gradcheck() {
    saft_gradcheck(SaftVariant::Lightsaft);
}

fn saft_setup(variant: SaftVariant, seed: u64) -> (SaftFt, LatentSourceBank, ParamStore<f64>) {
    let mut b = ParamBuilder::<f64>::new(seed);
    let spec = SaftSpec { variant, freq_dim: 12, bottleneck: 3, num_latent: 5, key_dim: 4 };
    let ft = SaftFt::new(&mut b, "ft", spec).unwrap();
    let bank = LatentSourceBank::new(&mut b, "ft", 5, 4).unwrap();
    let mut store = b.finish();
    // non-trivial running statistics so eval-mode batch norm is not the identity
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
    for i in 0..store.buffers().len() {
        let t = store.buffer_mut(i);
        let var = i % 2 == 1;
        t.data_mut().iter_mut().for_each(|v| *v = if var { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.3..0.3) });
    }
    (ft, bank, store)
}

fn ft_eval(ft: &SaftFt, bank: &LatentSourceBank, store: &ParamStore<f64>, x: &Tensor<f64>, q: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, mode);
    let xv = ctx.graph.constant(x.clone());
    let qv = ctx.graph.constant(q.clone());
    let y = ft.forward(&mut ctx, xv, qv, bank).unwrap();
    g.value(y).clone()
}

#[test]
fn lightsaft_swap_is_bit_exact_in_eval() {
    for seed in 0..5 {
        let (ft, bank, store) = saft_setup(SaftVariant::Lightsaft, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, 2, 12, 3], &mut rng);
        let q = rand_tensor(&[2, 4], &mut rng);
        let mut swapped = store.clone();
        ft.permute_latent(&mut swapped, &bank, &[1, 0, 2, 3, 4]).unwrap();
        assert_ne!(swapped.flat(), store.flat());
        let before = ft_eval(&ft, &bank, &store, &x, &q, Mode::Eval);
        let after = ft_eval(&ft, &bank, &swapped, &x, &q, Mode::Eval);
        assert_eq!(before.data(), after.data(), "seed {seed}");
        // batch statistics of the shared phase 2 are summed over latent sources
        let before = ft_eval(&ft, &bank, &store, &x, &q, Mode::Train);
        let after = ft_eval(&ft, &bank, &swapped, &x, &q, Mode::Train);
        assert!(before.max_abs_diff(&after) < 1e-12, "seed {seed}");
    }
}

#[test]
fn general_permutation_is_equivariant() {
    let perms: [[usize; 5]; 3] = [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 2, 3, 4, 0]];
    for variant in [SaftVariant::Lightsaft, SaftVariant::Lasaft] {
        for (seed, perm) in perms.iter().enumerate() {
            let (ft, bank, store) = saft_setup(variant, seed as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let x = rand_tensor(&[2, 2, 12, 3], &mut rng);
            let q = rand_tensor(&[2, 4], &mut rng);
            let before = ft_eval(&ft, &bank, &store, &x, &q, Mode::Eval);
            let mut permuted = store.clone();
            ft.permute_latent(&mut permuted, &bank, perm).unwrap();
            let after = ft_eval(&ft, &bank, &permuted, &x, &q, Mode::Eval);
            assert!(before.max_abs_diff(&after) < 1e-12, "{variant:?} {perm:?}");
        }
    }
}

#[test]
fn invalid_permutation_rejected() {
    let (ft, bank, mut store) = saft_setup(SaftVariant::Lightsaft, 0);
    assert!(ft.permute_latent(&mut store, &bank, &[0, 0, 1, 2, 3]).is_err());
    assert!(ft.permute_latent(&mut store, &bank, &[0, 1, 2]).is_err());
}

/// LightSAFT's latent value `i` reads only phase-1 block `i`; LaSAFT's reads all.
#[test]
fn lightsaft_has_no_inter_source_connections() {
    for (variant, coupled) in [(SaftVariant::Lightsaft, false), (SaftVariant::Lasaft, true)] {
        let (ft, _bank, store) = saft_setup(variant, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&[1, 1, 12, 2], &mut rng);
        let values = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, store, Mode::Eval);
            let xv = ctx.graph.constant(x.clone());
            let v = ft.latent_values(&mut ctx, xv).unwrap();
            g.value(v).clone()
        };
        let base = values(&store);
        let mut bumped = store.clone();
        // shift the phase-1 bias of latent source 2 only
        let h = ft.spec.hidden();
        let bias = bumped.param_mut(ft.phase1.bias);
        for j in 2 * h..3 * h {
            bias.data_mut()[j] += 0.5;
        }
        let after = values(&bumped);
        let (rows, l, f) = (2, 5, 12);
        for r in 0..rows {
            for li in 0..l {
                let s = (r * l + li) * f;
                let changed = base.data()[s..s + f] != after.data()[s..s + f];
                if li == 2 {
                    assert!(changed, "{variant:?}: own source unaffected");
                } else {
                    assert_eq!(changed, coupled, "{variant:?}: source {li}");
                }
            }
        }
    }
}

