use mhrul::attention::{attention_weights, AttentionConfig, AttentionMode, ScoreKind, SelfAttentionLayer};
use mhrul::data::{
    apply_minmax, fit_minmax, generate_windows, parse_cmapss_str, piecewise_rul, select_features, synthetic_dataset,
    unit_lengths, Subset, SyntheticConfig,
};
use mhrul::layers::init::InitRng;
use mhrul::metrics::{rmse, score};
use mhrul::model::{build_model, count_params, HeadMode, HeadSpec, HeadType, ModelSpec};
use mhrul::tensor::ParamStore;
use mhrul::train::batch_loss;
use mhrul::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

fn head_type() -> impl Strategy<Value = HeadType> {
    prop::sample::select(HeadType::ALL.to_vec())
}

fn small_spec(ht: HeadType, mode: HeadMode, n: usize, t: usize, attn: Option<ScoreKind>, seed: u64) -> ModelSpec {
    let mut head = HeadSpec::default_for(ht);
    head.layer_sizes = vec![3];
    if let Some(c) = head.conv.as_mut() {
        c.channels = 2;
        c.kernel_width = 3;
    }
    if let Some(k) = attn {
        head = head.with_attention(AttentionConfig {
            units: 4,
            ..AttentionConfig::new(k, AttentionMode::Soft)
        });
    }
    let mut s = ModelSpec::new(mode, head, n);
    s.window_length = t;
    s.trunk_sizes = vec![4, 1];
    s.seed = seed;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attention_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = InitRng::seed_from_u64(seed);
        for _ in 0..rows {
            let s: Vec<f64> = (0..cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let w = attention_weights(&Tensor::vector(&s)).unwrap();
            prop_assert!((w.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(w.data().iter().all(|&v| v >= 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hard_context_is_an_input_row(
        kind in prop::sample::select(ScoreKind::ALL.to_vec()),
        t in 1usize..6,
        d in 1usize..5,
        seed in any::<u64>(),
        xs in prop::collection::vec(0.05f64..1.0, 2 * 5 * 4),
    ) {
        let mut store = ParamStore::new();
        let mut rng = InitRng::seed_from_u64(seed);
        let layer = SelfAttentionLayer::new(&mut store, &mut rng, "a", d, AttentionConfig::new(kind, AttentionMode::Hard));
        let x = Tensor::new(vec![2, t, d], xs[..2 * t * d].to_vec()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (ctx, _) = layer.forward(&mut tape, &store, xv).unwrap();
        let c = tape.value(ctx);
        for b in 0..2 {
            for r in 0..t {
                let out = &c.data()[(b * t + r) * d..(b * t + r + 1) * d];
                let hit = (0..t).any(|s| &x.data()[(b * t + s) * d..(b * t + s + 1) * d] == out);
                prop_assert!(hit, "row {r} of batch {b} is not an input row");
            }
        }
    }

    #[test]
    fn uniform_scores_give_row_mean(
        kind in prop::sample::select(vec![ScoreKind::Additive, ScoreKind::General, ScoreKind::MulEq25, ScoreKind::AddEq25, ScoreKind::LocationBased]),
        t in 1usize..7,
        d in 1usize..5,
        xs in prop::collection::vec(-1.0f64..1.0, 6 * 4),
    ) {
        let mut store = ParamStore::new();
        let mut rng = InitRng::seed_from_u64(0);
        let layer = SelfAttentionLayer::new(&mut store, &mut rng, "a", d, AttentionConfig::new(kind, AttentionMode::Soft));
        layer.zero_params(&mut store);
        let x = Tensor::new(vec![1, t, d], xs[..t * d].to_vec()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (ctx, _) = layer.forward(&mut tape, &store, xv).unwrap();
        for j in 0..d {
            let mean = (0..t).map(|s| x.data()[s * d + j]).sum::<f64>() / t as f64;
            for r in 0..t {
                prop_assert!((tape.value(ctx).data()[r * d + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_counted_in_closed_form(
        ht in head_type(),
        multi in any::<bool>(),
        n in 1usize..4,
        attn in prop::option::of(prop::sample::select(ScoreKind::ALL.to_vec())),
    ) {
        let mode = if multi { HeadMode::MultiHead } else { HeadMode::SingleHead };
        let m = build_model(&small_spec(ht, mode, n, 5, attn, 0)).unwrap();
        let walk: usize = m.store.ids().map(|id| m.store.get(id).numel()).sum();
        prop_assert_eq!(count_params(&m), walk);
    }

    #[test]
    fn outputs_finite_on_unit_inputs(
        ht in head_type(),
        multi in any::<bool>(),
        attn in prop::option::of(prop::sample::select(ScoreKind::ALL.to_vec())),
        seed in 0u64..1000,
        xs in prop::collection::vec(0.0f64..=1.0, 3 * 6 * 3),
    ) {
        let mode = if multi { HeadMode::MultiHead } else { HeadMode::SingleHead };
        let mut m = build_model(&small_spec(ht, mode, 3, 6, attn, seed)).unwrap();
        let x = Tensor::new(vec![3, 6, 3], xs).unwrap();
        for training in [true, false] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            match m.forward(&mut tape, xv, training) {
                Ok(f) => {
                    prop_assert_eq!(tape.shape(f.output), &[3, 1]);
                    prop_assert!(tape.value(f.output).is_finite());
                }
                // cosine scores are undefined for all-zero rows
                Err(mhrul::Error::Numeric(_)) if attn == Some(ScoreKind::ContentBased) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }

    #[test]
    fn heads_are_independent(
        ht in head_type(),
        i in 0usize..3,
        attn in prop::option::of(Just(ScoreKind::Additive)),
        xs in prop::collection::vec(0.0f64..=1.0, 2 * 5 * 3),
    ) {
        let mut m = build_model(&small_spec(ht, HeadMode::MultiHead, 3, 5, attn, 4)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![2, 5, 3], xs).unwrap());
        let (feats, _) = m.head_features(&mut tape, xv, true).unwrap();
        let loss = tape.sum(feats[i]).unwrap();
        tape.backward(loss).unwrap();
        for j in 0..3 {
            for id in m.head_param_ids(j) {
                let g = tape.param_var(id).and_then(|v| tape.grad(v)).map(|g| g.iter().any(|&v| v != 0.0));
                if j != i {
                    prop_assert!(g != Some(true), "head {j} received gradient from head {i}'s loss");
                }
            }
        }
        let shared: Vec<_> = (0..3).flat_map(|j| m.head_param_ids(j)).collect();
        let mut sorted = shared.clone();
        sorted.sort_by_key(|id| id.index());
        sorted.dedup();
        prop_assert_eq!(sorted.len(), shared.len());
    }

    #[test]
    fn same_seed_same_first_loss(ht in head_type(), seed in 0u64..500) {
        let x = Tensor::full(&[2, 4, 2], 0.3);
        let mut losses = Vec::new();
        for _ in 0..2 {
            let mut m = build_model(&small_spec(ht, HeadMode::MultiHead, 2, 4, None, seed)).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (l, _) = batch_loss(&mut m, &mut tape, xv, &[10.0, 20.0], 1e-4, true).unwrap();
            losses.push(tape.scalar(l));
        }
        prop_assert_eq!(losses[0].to_bits(), losses[1].to_bits());
    }

    #[test]
    fn san_collapses_to_window_means(perm_seed in any::<u64>(), xs in prop::collection::vec(0.0f64..=1.0, 5 * 2)) {
        use rand::seq::SliceRandom;
        let mut m = build_model(&small_spec(HeadType::San, HeadMode::SingleHead, 2, 5, Some(ScoreKind::Additive), 0)).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            if m.store.kind(id).is_attention() {
                let n = m.store.get(id).numel();
                m.store.set_data(id, &vec![0.0; n]).unwrap();
            }
        }
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut InitRng::seed_from_u64(perm_seed));
        let shuffled: Vec<f64> = order.iter().flat_map(|&t| xs[t * 2..t * 2 + 2].to_vec()).collect();
        let a = m.predict(&Tensor::new(vec![1, 5, 2], xs).unwrap(), 1).unwrap();
        let b = m.predict(&Tensor::new(vec![1, 5, 2], shuffled).unwrap(), 1).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-10);
    }

    #[test]
    fn metrics_permutation_invariant(pairs in prop::collection::vec((0.0f64..130.0, 0.0f64..130.0), 1..20), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut InitRng::seed_from_u64(seed));
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let tt: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        prop_assert!((rmse(&p, &t).unwrap() - rmse(&pp, &tt).unwrap()).abs() < 1e-9);
        prop_assert!((score(&p, &t).unwrap() - score(&pp, &tt).unwrap()).abs() < 1e-6 * score(&p, &t).unwrap().max(1.0));
        let s = score(&p, &t).unwrap();
        prop_assert!(s >= 0.0);
        prop_assert_eq!(s == 0.0, p == t);
        prop_assert_eq!(rmse(&p, &t).unwrap() == 0.0, p == t);
    }

    #[test]
    fn pipeline_invariants(seed in 0u64..200, units in 1usize..6, seq_l in 1usize..40) {
        let ds = synthetic_dataset(&SyntheticConfig {
            train_units: units,
            test_units: 1,
            min_life: 20,
            max_life: 60,
            seed,
            ..Default::default()
        });
        let text: String = ds
            .train
            .iter()
            .map(|r| {
                let mut s = format!("{} {}", r.unit_id, r.cycle);
                for v in r.settings.iter().chain(&r.sensors) {
                    s += &format!(" {v}");
                }
                s + "\n"
            })
            .collect();
        let recs = parse_cmapss_str(&text).unwrap();
        let lengths = unit_lengths(&recs);
        prop_assert_eq!(&lengths, &unit_lengths(&ds.train));
        let raw = select_features(&recs, Subset::Fd001);
        let sc = fit_minmax(&raw).unwrap();
        let f = apply_minmax(&raw, &sc).unwrap();
        prop_assert_eq!(f.n_rows(), recs.len());
        prop_assert!(f.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let targets = piecewise_rul(&f, 130.0);
        prop_assert!(targets.iter().all(|&t| (0.0..=130.0).contains(&t)));
        for (_, start, len) in f.units() {
            prop_assert_eq!(targets[start + len - 1], 0.0);
        }
        let w = generate_windows(&f, seq_l, &targets).unwrap();
        let expected: usize = lengths.values().map(|&l| (l + 1).saturating_sub(seq_l)).sum();
        prop_assert_eq!(w.len(), expected);
    }
}

#[test]
fn single_step_san_is_a_dense_stack() {
    // with one timestep every attention layer returns its input
    let mut m = build_model(&small_spec(
        HeadType::San,
        HeadMode::SingleHead,
        2,
        1,
        Some(ScoreKind::Additive),
        3,
    ))
    .unwrap();
    let x = Tensor::new(vec![2, 1, 2], vec![0.1, 0.7, 0.4, 0.2]).unwrap();
    let full = m.predict(&x, 2).unwrap();
    for id in m.store.ids().collect::<Vec<_>>() {
        if m.store.kind(id).is_attention() {
            let shape = m.store.get(id).shape().to_vec();
            let n: usize = shape.iter().product();
            m.store.set_data(id, &vec![3.0; n]).unwrap();
        }
    }
    assert_eq!(full, m.predict(&x, 2).unwrap());
}
