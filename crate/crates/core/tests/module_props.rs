//! Cross-module properties: CSA reference equivalence, batch-norm
//! statistics, permutation invariance, label freedom, and metric laws.

use csa_core::csa::{AttnUpdate, CsaDims, CsaModule};
use csa_core::data::{make_example1, parse_ts, serialize_ts, znormalize, TsDataset};
use csa_core::eval::{chi2_sf_df1, dtw_distance};
use csa_core::model::{BackboneConfig, FcnCsaModel, ModelMeta, ModelVariant};
use csa_core::nn::{batch_stats, standardize, Binding, ParamStore};
use csa_core::reference;
use csa_core::tensor::{grad_check, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn fresh_csa(
    dims: CsaDims,
    use_cd: bool,
    seed: u64,
) -> (CsaModule<f64>, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = CsaModule::new(&mut store, &mut rng, dims, AttnUpdate::Latest, use_cd).unwrap();
    (m, store)
}

#[test]
fn csa_forward_matches_scalar_reference_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..25 {
        let c = rng.random_range(2..=5);
        let t = rng.random_range(1..=16);
        let f = rng.random_range(1..=10);
        let f_a = rng.random_range(1..=6);
        let b = rng.random_range(1..=6);
        let dims = CsaDims { f, f_a, c, t };
        let (mut module, mut store) = fresh_csa(dims, case % 2 == 0, case as u64);
        // nonzero sigma so the attention path matters
        store.value_mut(module.sigma).data_mut()[0] = rng.random_range(-1.0..1.0);
        let l = random_tensor(&[b, t, f], &mut rng);
        // labels may omit classes; the reference handles absence identically
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false);
        let lv = tape.constant(l.clone());
        let out = module.forward_train(&mut tape, &binding, lv, &labels).unwrap();

        let reference = reference::csa_scalar_reference(
            &l,
            &labels,
            store.value(module.w_k),
            store.value(module.w_q),
            store.value(module.w_v),
            store.value(module.sigma).data()[0],
            c,
            module.use_cd,
        );
        let diff_o = tape.value(out.o_csa).max_abs_diff(&reference.o_csa);
        let diff_s = tape.value(out.s).max_abs_diff(&reference.s);
        let diff_a = tape.value(out.attention).max_abs_diff(&reference.attention);
        assert!(
            diff_o < 1e-9 && diff_s < 1e-9 && diff_a < 1e-9,
            "case {case}: diffs o={diff_o} s={diff_s} a={diff_a}"
        );
    }
}

#[test]
fn batch_permutation_leaves_attention_unchanged_and_permutes_output() {
    let dims = CsaDims {
        f: 5,
        f_a: 3,
        c: 3,
        t: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = 6;
    let l = random_tensor(&[b, dims.t, dims.f], &mut rng);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let perm = vec![4, 0, 5, 2, 1, 3];

    let run = |l: &Tensor<f64>, labels: &[usize], seed: u64| {
        let (mut module, mut store) = fresh_csa(dims, true, seed);
        store.value_mut(module.sigma).data_mut()[0] = 0.7;
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false);
        let lv = tape.constant(l.clone());
        let out = module.forward_train(&mut tape, &binding, lv, labels).unwrap();
        (
            tape.value(out.s).clone(),
            tape.value(out.s_cd).clone(),
            tape.value(out.attention).clone(),
            tape.value(out.o_csa).clone(),
        )
    };

    let (s1, scd1, a1, o1) = run(&l, &labels, 11);
    let mut l_perm_data = Vec::new();
    let row = dims.t * dims.f;
    for &p in &perm {
        l_perm_data.extend_from_slice(&l.data()[p * row..(p + 1) * row]);
    }
    let l_perm = Tensor::new(vec![b, dims.t, dims.f], l_perm_data).unwrap();
    let labels_perm: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
    let (s2, scd2, a2, o2) = run(&l_perm, &labels_perm, 11);

    assert!(s1.max_abs_diff(&s2) < 1e-12);
    assert!(scd1.max_abs_diff(&scd2) < 1e-12);
    assert!(a1.max_abs_diff(&a2) < 1e-12);
    // o2[i] corresponds to o1[perm[i]]
    let slice = dims.c * dims.t * dims.f;
    for (i, &p) in perm.iter().enumerate() {
        let got = &o2.data()[i * slice..(i + 1) * slice];
        let want = &o1.data()[p * slice..(p + 1) * slice];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn csa_nocd_equals_csa_when_all_class_slices_agree() {
    // All instances identical: per-class averages coincide, so the CD step
    // is exactly the identity and both variants produce the same output.
    let dims = CsaDims {
        f: 4,
        f_a: 3,
        c: 2,
        t: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let one = random_tensor(&[1, dims.t, dims.f], &mut rng);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let l = Tensor::new(vec![2, dims.t, dims.f], data).unwrap();
    let labels = vec![0, 1];

    let run = |use_cd: bool| {
        let (mut module, mut store) = fresh_csa(dims, use_cd, 77);
        store.value_mut(module.sigma).data_mut()[0] = 0.9;
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false);
        let lv = tape.constant(l.clone());
        let out = module.forward_train(&mut tape, &binding, lv, &labels).unwrap();
        (
            tape.value(out.s_cd).clone(),
            tape.value(out.o_csa).clone(),
        )
    };
    let (scd_with, o_with) = run(true);
    let (scd_without, o_without) = run(false);
    assert!(scd_with.max_abs_diff(&scd_without) < 1e-12);
    assert!(o_with.max_abs_diff(&o_without) < 1e-12);
}

#[test]
fn gradients_flow_through_conv_block_and_cross_entropy() {
    use csa_core::nn::ConvBlock;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let block = ConvBlock::new(&mut store, &mut rng, "b", 2, 3, 3);
    let head = store.add("w", random_tensor(&[3, 2], &mut rng));
    let x = random_tensor(&[3, 2, 5], &mut rng);
    let labels = vec![0, 1, 0];
    let params = store.values();
    let report = grad_check(
        |tape, vars| {
            let binding = Binding::from_vars(vars.to_vec());
            let mut blk = block.clone();
            let xv = tape.constant(x.clone());
            let h = blk.forward_train(tape, &binding, xv)?;
            let g = tape.reduce_mean_axis(h, 2)?;
            let logits = tape.matmul(g, binding.var(head))?;
            tape.cross_entropy(logits, &labels)
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(
        report.passed(),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn batch_norm_training_statistics_standardize() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // N*T = 8*4 = 32 >= 16
    let y_t = Tensor::from_fn(&[8, 3, 4], |_| rng.random_range(-3.0..5.0));
    let mut tape = Tape::new();
    let y = tape.constant(y_t);
    let (mu, var) = batch_stats(&mut tape, y).unwrap();
    let xhat = standardize(&mut tape, y, mu, var, 1e-5).unwrap();
    let out = tape.value(xhat);
    for c in 0..3 {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut count = 0.0f64;
        for n in 0..8 {
            for t in 0..4 {
                let v = out.at(&[n, c, t]);
                sum += v;
                sumsq += v * v;
                count += 1.0;
            }
        }
        let mean = sum / count;
        let variance = sumsq / count - mean * mean;
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        assert!((variance - 1.0).abs() < 1e-4, "channel {c} var {variance}");
    }
}

#[test]
fn head_gradient_is_isolated_per_class() {
    // d logit[n, c] / d G[n, c'] must vanish for c' != c.
    let meta = ModelMeta {
        variant: ModelVariant::Csa,
        class_names: vec!["a".into(), "b".into(), "c".into()],
        num_vars: 1,
        seq_len: 4,
        backbone: BackboneConfig::tiny(6),
        f_a: 3,
        attn_update: AttnUpdate::Latest,
    };
    let model = FcnCsaModel::<f64>::new(meta, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g_val = random_tensor(&[2, 3, 6], &mut rng);
    for target_class in 0..3 {
        let mut tape = Tape::new();
        let binding = model.store.bind(&mut tape, false);
        let g = tape.leaf(g_val.clone(), true);
        let logits = model
            .head_forward(&mut tape, &binding, g)
            .unwrap();
        // select logits[:, target_class] via a constant mask
        let mask = Tensor::from_fn(&[2, 3], |i| if i % 3 == target_class { 1.0 } else { 0.0 });
        let mv = tape.constant(mask);
        let masked = tape.mul(logits, mv).unwrap();
        let loss = tape.sum_all(masked);
        tape.backward(loss).unwrap();
        let grad = tape.grad(g).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for f in 0..6 {
                    let gval = grad[(n * 3 + c) * 6 + f];
                    if c == target_class {
                        continue;
                    }
                    assert_eq!(gval, 0.0, "leak into class {c} from {target_class}");
                }
            }
        }
    }
}

#[test]
fn end_to_end_gradcheck_all_variants() {
    // Smaller than the acceptance model; every variant must pass.
    for (variant, seed) in [
        (ModelVariant::Baseline, 3u64),
        (ModelVariant::Csa, 3),
        (ModelVariant::CsaNoCd, 3),
    ] {
        let meta = ModelMeta {
            variant,
            class_names: vec!["a".into(), "b".into()],
            num_vars: 1,
            seq_len: 5,
            backbone: BackboneConfig {
                filters: [4, 4, 4],
                kernels: [3, 3, 3],
            },
            f_a: 2,
            attn_update: AttnUpdate::Latest,
        };
        let model = FcnCsaModel::<f64>::new(meta, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random_tensor(&[4, 1, 5], &mut rng);
        let labels = vec![0, 1, 0, 1];
        let params = model.store.values();
        let report = grad_check(
            |tape, vars| {
                let mut m = model.clone();
                let binding = Binding::from_vars(vars.to_vec());
                m.loss_train(tape, &binding, &x, &labels)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "{variant:?}: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn default_backbone_yields_128_features_and_export_shapes() {
    let meta = ModelMeta {
        variant: ModelVariant::Csa,
        class_names: vec!["a".into(), "b".into()],
        num_vars: 3,
        seq_len: 40,
        backbone: BackboneConfig::default(),
        f_a: 64,
        attn_update: AttnUpdate::Latest,
    };
    assert_eq!(meta.backbone.filters, [128, 256, 128]);
    assert_eq!(meta.backbone.kernels, [8, 5, 3]);
    let mut model = FcnCsaModel::<f32>::new(meta, 2).unwrap();
    if let Some(csa) = &mut model.csa {
        csa.class_seen = vec![true, true];
    }
    let x = Tensor::<f32>::from_fn(&[2, 3, 40], |i| (i as f32 * 0.05).sin());
    // trailing feature width is 128 and the time extent is preserved
    let mut tape = Tape::new();
    let binding = model.store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let l = model.backbone.forward_eval(&mut tape, &binding, xv).unwrap();
    assert_eq!(tape.shape(l), &[2, 40, 128]);
    // eval twice agrees bitwise (frozen running statistics)
    let l2 = model.backbone.forward_eval(&mut tape, &binding, xv).unwrap();
    assert_eq!(tape.value(l).data(), tape.value(l2).data());
    // pooled feature matrices: [B, F] and [B, C, F]
    let (p_l, p_o) = model.feature_matrices(&x).unwrap();
    assert_eq!(p_l.shape(), &[2, 128]);
    assert_eq!(p_o.shape(), &[2, 2, 128]);
    // sigma is 0 at init, so every class slice of P_O equals P_L
    for b in 0..2 {
        for c in 0..2 {
            for f in 0..128 {
                assert_eq!(p_o.at(&[b, c, f]), p_l.at(&[b, f]));
            }
        }
    }
}

#[test]
fn cross_entropy_is_nonnegative_and_margin_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..50 {
        let n = rng.random_range(1..5);
        let c = rng.random_range(2..5);
        let logits = random_tensor(&[n, c], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let loss = tape.cross_entropy(lv, &labels).unwrap();
        assert!(tape.value(loss).item().unwrap() >= 0.0);
    }
    // growing the correct logit strictly decreases the loss
    let mut prev = f64::INFINITY;
    for margin in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![margin, 0.0]).unwrap());
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!(v < prev, "loss must fall as the correct-class margin grows");
        prev = v;
    }
}

#[test]
fn eval_predictions_are_independent_of_batch_composition() {
    let ds = make_example1::<f32>(4, 8, 0.2, 3).unwrap();
    let settings = csa_core::trainer::TrainSettings {
        epochs: 3,
        batch_size: 6,
        lr: 1e-3,
        seed: 1,
        f_a: 4,
        attn_update: AttnUpdate::Latest,
        backbone: BackboneConfig::tiny(8),
    };
    let out = csa_core::trainer::train(ModelVariant::Csa, &ds, &settings).unwrap();
    // single-instance logits equal the batched logits, bit for bit
    let full = out.model.logits_eval(&ds.x).unwrap();
    for i in 0..ds.len() {
        let single = out
            .model
            .logits_eval(&ds.instance(i).reshape(&[1, 1, 8]).unwrap())
            .unwrap();
        for c in 0..3 {
            assert_eq!(single.at(&[0, c]), full.at(&[i, c]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cd_output_never_decreases(data in proptest::collection::vec(-5.0f64..5.0, 8..48)) {
        let n = data.len();
        let c = if n % 3 == 0 { 3 } else { 2 };
        prop_assume!(n % c == 0);
        let tt = n / c;
        // factor tt into t*t when possible, else 1 x tt
        let t = (1..=tt).rev().find(|t| t * t == tt);
        let (t1, t2) = match t {
            Some(t) => (t, t),
            None => (1, tt),
        };
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![c, t1, t2], data).unwrap());
        let out = CsaModule::class_differentiate(&mut tape, s).unwrap();
        for (cd, raw) in tape.value(out).data().iter().zip(tape.value(s).data()) {
            prop_assert!(cd >= raw);
        }
    }

    #[test]
    fn chi_square_p_decreases_with_statistic(a in 0.01f64..30.0, b in 0.01f64..30.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(chi2_sf_df1(lo) >= chi2_sf_df1(hi));
    }

    #[test]
    fn dtw_symmetric_nonnegative_and_euclidean_at_t1(
        av in proptest::collection::vec(-3.0f64..3.0, 1..4),
        bv in proptest::collection::vec(-3.0f64..3.0, 1..4),
    ) {
        prop_assume!(av.len() == bv.len());
        let v = av.len();
        let a = Tensor::new(vec![v, 1], av.clone()).unwrap();
        let b = Tensor::new(vec![v, 1], bv.clone()).unwrap();
        let d_ab = dtw_distance(&a, &b).unwrap();
        let d_ba = dtw_distance(&b, &a).unwrap();
        prop_assert!(d_ab >= 0.0);
        prop_assert!((d_ab - d_ba).abs() < 1e-12);
        let euclid_sq: f64 = av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum();
        prop_assert!((d_ab - euclid_sq).abs() < 1e-12);
    }

    #[test]
    fn dtw_dp_matches_brute_force(
        t1 in 1usize..5, t2 in 1usize..5, v in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&[v, t1], &mut rng);
        let b = random_tensor(&[v, t2], &mut rng);
        let fast = dtw_distance(&a, &b).unwrap();
        let brute = reference::dtw_brute_force(&a, &b);
        prop_assert!((fast - brute).abs() < 1e-10, "fast {fast} brute {brute}");
    }

    #[test]
    fn ts_serialisation_round_trips(
        n in 1usize..5, v in 1usize..3, t in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class_names = vec!["cls_a".to_string(), "cls_b".to_string()];
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let ds = TsDataset {
            name: "prop".into(),
            x: random_tensor(&[n, v, t], &mut rng),
            labels,
            class_names,
        };
        let text = serialize_ts(&ds);
        let back = parse_ts::<f64>(&text).unwrap();
        prop_assert_eq!(back.x.shape(), ds.x.shape());
        prop_assert_eq!(back.x.data(), ds.x.data());
        prop_assert_eq!(back.labels, ds.labels);
        prop_assert_eq!(back.class_names, ds.class_names);
    }

    #[test]
    fn znormalize_idempotent_property(
        n in 1usize..4, t in 2usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = TsDataset {
            name: "prop".into(),
            x: Tensor::from_fn(&[n, 1, t], |_| rng.random_range(-10.0..10.0)),
            labels: vec![0; n],
            class_names: vec!["a".into()],
        };
        let once = znormalize(&ds);
        let twice = znormalize(&once);
        prop_assert!(once.x.max_abs_diff(&twice.x) < 1e-6);
    }
}
