use kvm_core::checks::check_state_invariants;
use kvm_core::kvm::{
    append_rows, init_state, merge_rows, merge_targets, plan_budget, prepare_memory_key, readout_views, KvmConfig,
    KvmLayerParams, KvmState, StateSchedule,
};
use kvm_core::numerics::{layer_norm, masked_softmax, rope_partial, row_norms, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_state(heads: usize, rows: usize, dh: usize, sinks: usize, seed: u64) -> KvmState<f64> {
    let mut r = rng(seed);
    let sk = Tensor::randn([heads, rows, dh], 1.0, &mut r);
    let sv = Tensor::randn([heads, rows, dh], 1.0, &mut r);
    let rho = Tensor::new([heads, rows], row_norms(&sv)).unwrap();
    KvmState::new(sk, sv, rho, sinks).unwrap()
}

fn schedule() -> impl Strategy<Value = StateSchedule> {
    prop_oneof![
        (1usize..40).prop_map(|size| StateSchedule::Fixed { size }),
        (0.5f64..8.0, 0.1f64..1.0).prop_map(|(coefficient, exponent)| StateSchedule::PowerLaw { coefficient, exponent }),
        (1usize..200, 0.5f64..8.0).prop_map(|(cap, coefficient)| StateSchedule::Saturating {
            cap,
            coefficient,
            exponent: 0.5
        }),
        Just(StateSchedule::Unbounded),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let logits = Tensor::<f64>::randn([rows, cols], 3.0, &mut r);
        let hidden: Vec<f64> = (0..rows * cols)
            .map(|i| if i % cols != 0 && (i * 7 + seed as usize) % 3 == 0 { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        let mask = Tensor::new([rows, cols], hidden.clone()).unwrap();
        let p = masked_softmax(&logits, Some(&mask)).unwrap();
        for (row, m) in p.data().chunks(cols).zip(hidden.chunks(cols)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (x, h) in row.iter().zip(m) {
                if h.is_infinite() {
                    prop_assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..5, d in 2usize..12, scale in 0.01f64..100.0, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn([rows, d], scale, &mut rng(seed));
        let y = layer_norm(&x, &Tensor::ones([d]), &Tensor::zeros([d]), 0.0).unwrap();
        for row in y.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rope_preserves_pair_norms(half in 0usize..4, extra in 0usize..4, pos in 0usize..10_000, seed in any::<u64>()) {
        let (r, d) = (2 * half, 2 * half + extra + 1);
        let x = Tensor::<f64>::randn([3, d], 1.0, &mut rng(seed));
        let y = rope_partial(&x, pos, r, 10_000.0).unwrap();
        for (a, b) in x.data().chunks(d).zip(y.data().chunks(d)) {
            for j in 0..half {
                let na = a[2 * j].hypot(a[2 * j + 1]);
                let nb = b[2 * j].hypot(b[2 * j + 1]);
                prop_assert!((na - nb).abs() <= 1e-12 * na.max(1.0));
            }
            prop_assert_eq!(&a[r..], &b[r..]);
        }
    }

    #[test]
    fn memory_keys_ignore_source_position(heads in 1usize..3, half in 1usize..3, p0 in 0usize..500, p1 in 0usize..500, seed in any::<u64>()) {
        let dh = 4 * half;
        let r = 2 * half;
        let mut g = rng(seed);
        let k = Tensor::<f64>::randn([heads, 1, dh], 1.0, &mut g);
        let params = KvmLayerParams::random(6, heads, dh, &mut g);
        let at = |p: usize| prepare_memory_key(&rope_partial(&k, p, r, 10_000.0).unwrap(), &params, r).unwrap();
        let (a, b) = (at(p0), at(p1));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn merge_targets_ignore_positive_rescaling(
        heads in 1usize..3,
        k in 1usize..6,
        m in 2usize..9,
        sinks in 0usize..2,
        gain in 1e-3f64..1e3,
        seed in any::<u64>(),
    ) {
        let dh = 4;
        let mut g = rng(seed);
        let keys = Tensor::<f64>::randn([heads, k, dh], 1.0, &mut g);
        let view = Tensor::<f64>::randn([heads, m, dh], 1.0, &mut g);
        let scaled = Tensor::new(keys.shape().to_vec(), keys.data().iter().map(|x| x * gain).collect()).unwrap();
        let a = merge_targets(&keys, &view, sinks).unwrap();
        prop_assert_eq!(&a, &merge_targets(&scaled, &view, sinks).unwrap());
        prop_assert!(a.iter().flatten().all(|&t| t >= sinks && t < m));
    }

    #[test]
    fn merges_keep_radii_and_sinks(
        heads in 1usize..3,
        m in 2usize..8,
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let dh = 4;
        let state = random_state(heads, m, dh, 1, seed);
        let mut g = rng(seed ^ 1);
        let keys = Tensor::<f64>::randn([heads, k, dh], 1.0, &mut g);
        let values = Tensor::<f64>::randn([heads, k, dh], 1.0, &mut g);
        let targets = merge_targets(&keys, state.keys(), state.sinks()).unwrap();
        let merged = merge_rows(&state, &keys, &values, &targets).unwrap();
        prop_assert_eq!(merged.rows(), m);
        prop_assert_eq!(merged.radii(), state.radii());
        for h in 0..heads {
            let row0 = h * m * dh..h * m * dh + dh;
            prop_assert_eq!(&merged.keys().data()[row0.clone()], &state.keys().data()[row0.clone()]);
            prop_assert_eq!(&merged.values().data()[row0.clone()], &state.values().data()[row0]);
        }
    }

    #[test]
    fn appends_extend_without_touching_rows(heads in 1usize..3, m in 1usize..6, n in 0usize..5, seed in any::<u64>()) {
        let dh = 3;
        let state = random_state(heads, m, dh, 1, seed);
        let mut g = rng(seed ^ 2);
        let keys = Tensor::<f64>::randn([heads, n, dh], 1.0, &mut g);
        let values = Tensor::<f64>::randn([heads, n, dh], 1.0, &mut g);
        let grown = append_rows(&state, &keys, &values).unwrap();
        prop_assert_eq!(grown.rows(), m + n);
        for h in 0..heads {
            prop_assert_eq!(&grown.radii().data()[h * (m + n)..h * (m + n) + m], &state.radii().data()[h * m..(h + 1) * m]);
            prop_assert_eq!(
                &grown.values().data()[h * (m + n) * dh..(h * (m + n) + m) * dh],
                &state.values().data()[h * m * dh..(h + 1) * m * dh]
            );
        }
    }

    #[test]
    fn readout_values_have_the_row_radius(heads in 1usize..3, m in 2usize..7, k in 1usize..9, seed in any::<u64>()) {
        let dh = 4;
        let cfg = KvmConfig { chunk_len: m, rotary_width: 2, ..KvmConfig::default() };
        let mut g = rng(seed);
        let init = init_state(
            &Tensor::<f64>::randn([heads, m, dh], 1.0, &mut g),
            &Tensor::<f64>::randn([heads, m, dh], 1.0, &mut g),
            &cfg,
        )
        .unwrap();
        let keys = Tensor::<f64>::randn([heads, k, dh], 1.0, &mut g);
        let values = Tensor::<f64>::randn([heads, k, dh], 1.0, &mut g);
        let targets = merge_targets(&keys, init.keys(), init.sinks()).unwrap();
        let state = merge_rows(&init, &keys, &values, &targets).unwrap();
        let params = KvmLayerParams::random(6, heads, dh, &mut g);
        let (_, v) = readout_views(&state, &params, &cfg).unwrap();
        let raw = row_norms(state.values());
        for ((n, rho), raw) in row_norms(&v).iter().zip(state.radii().data()).zip(raw) {
            if raw > cfg.eps_norm {
                prop_assert!((n - rho).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn budget_never_overshoots(sched in schedule(), e in 0usize..100_000, m in 1usize..400, c in 1usize..64) {
        let n = plan_budget(&sched, e, m, c);
        prop_assert!(n <= c);
        let b = sched.budget(e);
        if n > 0 {
            prop_assert!(((m + n) as f64) <= b.floor().max(m as f64));
        }
    }

    #[test]
    fn recurrence_keeps_state_invariants(seed in any::<u64>()) {
        let (row, stats) = check_state_invariants(20, seed).unwrap();
        prop_assert!(row.pass, "{row} {stats:?}");
        prop_assert!(stats.recurrence_steps >= 20);
    }
}
