//! Randomised properties across the public API.

use metascale_core::forecaster::{seasonal_persistence, Normalizer};
use metascale_core::harness::rcs;
use metascale_core::meta::{AnpConfig, AnpModel, ObservationPair};
use metascale_core::scaler::{
    apply_action, one_step_oracle, reward, transition, Action, AnalyticCpu, CpuModel, PolicyConfig,
    PolicyModel, RewardParams, ScalingState, A_MAX, A_MIN, GRID_STEP,
};
use metascale_core::tensor::Tape;
use metascale_core::workload::{round_vm_count, CpuResponse, TimeCovariate};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn response() -> CpuResponse {
    CpuResponse {
        weights: vec![2e-3, 4e-3],
        bias: 0.06,
        cap: 0.95,
        curvature: 0.01,
    }
}

fn cov() -> impl Strategy<Value = TimeCovariate> {
    (0u8..7, 0u8..24).prop_map(|(d, h)| TimeCovariate::new(d, h).unwrap())
}

fn state() -> impl Strategy<Value = ScalingState> {
    (cov(), 1.0f64..200.0, 50.0f64..2000.0, 10.0f64..800.0).prop_map(|(cov, l, x0, x1)| {
        let model = AnalyticCpu {
            response: response(),
        };
        let unit = vec![x0 / l, x1 / l];
        ScalingState {
            cov,
            c_hat: model.predict(cov, &unit).unwrap(),
            unit_workload: unit,
            z: vec![],
            l,
        }
    })
}

fn observation() -> impl Strategy<Value = ObservationPair> {
    (cov(), 0.0f64..50.0, 0.0f64..10.0, 0.0f64..1.0).prop_map(|(cov, a, b, cpu)| ObservationPair {
        cov,
        unit_workload: vec![a, b],
        cpu,
    })
}

fn tiny_anp(seed: u64) -> AnpModel {
    let cfg = AnpConfig {
        repr: 4,
        latent: 2,
        hidden: 5,
        heads: 2,
        context_len: 8,
        target_len: 2,
        ..AnpConfig::default()
    };
    AnpModel::new(cfg, 2, seed).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let v = tape.constant(vec![3, 4], x).unwrap().softmax(1).unwrap().value();
        for row in v.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn scalar_broadcast_matches_scale(x in proptest::collection::vec(-5.0f64..5.0, 6), k in -3.0f64..3.0) {
        let tape = Tape::new();
        let a = tape.constant(vec![2, 3], x.clone()).unwrap();
        let by_mul = a.mul(tape.scalar(k)).unwrap().value();
        let by_scale = a.scale(k).unwrap().value();
        prop_assert_eq!(by_mul, by_scale);
    }

    #[test]
    fn normalizer_inverts(rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1e4, 3), 2..20)) {
        let n = Normalizer::fit(&rows).unwrap();
        for r in &rows {
            let back = n.invert(&n.apply(r));
            prop_assert!(max_diff(&back, r) <= 1e-9 * (1.0 + r.iter().cloned().fold(0.0, f64::max)));
        }
    }

    #[test]
    fn persistence_is_exact_on_periodic_series(period in 1usize..10, reps in 2usize..5, h in 1usize..20) {
        let base: Vec<Vec<f64>> = (0..period).map(|i| vec![i as f64 * 1.5 + 1.0]).collect();
        let values: Vec<Vec<f64>> = (0..period * reps + h).map(|t| base[t % period].clone()).collect();
        let origin = period * reps;
        let f = seasonal_persistence(&values, origin, h, period).unwrap();
        for (k, row) in f.iter().enumerate() {
            prop_assert_eq!(row, &values[origin + k]);
        }
    }

    #[test]
    fn context_order_and_duplication_do_not_matter(
        ctx in proptest::collection::vec(observation(), 1..12),
        query in observation(),
        seed in 0u64..8,
        shuffle in any::<u64>(),
    ) {
        let m = tiny_anp(seed);
        let mut perm = ctx.clone();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let doubled: Vec<_> = ctx.iter().chain(&ctx).cloned().collect();
        let r = m.encode_deterministic(&ctx, &query).unwrap();
        let z = m.task_embedding(&ctx).unwrap();
        for v in [&perm, &doubled] {
            prop_assert!(max_diff(&r, &m.encode_deterministic(v, &query).unwrap()) <= 1e-10);
            prop_assert!(max_diff(&z, &m.task_embedding(v).unwrap()) <= 1e-10);
        }
    }

    #[test]
    fn predicted_utilisation_is_a_probability(ctx in proptest::collection::vec(observation(), 1..10), q in observation()) {
        let m = tiny_anp(3);
        let (mean, std) = m.predict(&ctx, &[q]).unwrap()[0];
        prop_assert!((0.0..=1.0).contains(&mean));
        prop_assert!(std > 0.0);
    }

    #[test]
    fn actions_outside_bounds_are_rejected(a in -5.0f64..5.0) {
        prop_assert_eq!(Action::new(a).is_ok(), (A_MIN..=A_MAX).contains(&a));
    }

    #[test]
    fn policy_output_stays_in_bounds(s in state(), seed in 0u64..16) {
        let cfg = PolicyConfig { hidden: 8, ..PolicyConfig::default() };
        let mut p = PolicyModel::new(cfg, 2, 0, seed).unwrap();
        // blow the weights up so the squash saturates
        let big: Vec<f64> = p.params().flat_values().iter().map(|v| v * 50.0).collect();
        p.params_mut().set_flat_values(&big).unwrap();
        let a = p.policy_forward(&s).unwrap();
        prop_assert!((A_MIN..=A_MAX).contains(&a));
    }

    #[test]
    fn transition_scales_vms_and_keeps_total_workload(s in state(), a in A_MIN..A_MAX) {
        let model = AnalyticCpu { response: response() };
        let total = s.total_workload();
        let next = transition(&s, a, &total, s.cov, &model).unwrap();
        prop_assert_eq!(next.l, apply_action(s.l, Action::new(a).unwrap()).unwrap());
        for (u, x) in next.unit_workload.iter().zip(&total) {
            prop_assert!((u * next.l - x).abs() <= 4.0 * f64::EPSILON * x.abs());
        }
        prop_assert_eq!(&next.z, &s.z);
        prop_assert!((0.0..=1.0).contains(&next.c_hat));
    }

    #[test]
    fn reward_is_never_positive(s in state(), a in A_MIN..A_MAX, eta in 0.0f64..1e-3) {
        let model = AnalyticCpu { response: response() };
        let params = RewardParams { eta, ..RewardParams::default() };
        prop_assert!(reward(&s, a, &model, &params).unwrap() <= 0.0);
    }

    #[test]
    fn oracle_beats_every_grid_action(s in state(), k in 0usize..2500) {
        let model = AnalyticCpu { response: response() };
        let params = RewardParams::default();
        let best = one_step_oracle(&s, &model, &params).unwrap();
        let other = (A_MIN + k as f64 * GRID_STEP).min(A_MAX);
        prop_assert!(reward(&s, best, &model, &params).unwrap() >= reward(&s, other, &model, &params).unwrap());
    }

    #[test]
    fn rcs_is_a_fraction(cpu in proptest::collection::vec(0.0f64..1.0, 1..100), band in 0.001f64..0.2) {
        let r = rcs(&cpu, 0.4, band).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let inside: Vec<f64> = cpu.iter().map(|c| 0.4 + (c - 0.5) * band).collect();
        prop_assert_eq!(rcs(&inside, 0.4, band).unwrap(), 1.0);
    }

    #[test]
    fn vm_rounding_never_drops_below_one(requested in -10.0f64..1e6) {
        let (vms, clamped) = round_vm_count(requested);
        prop_assert!(vms >= 1);
        prop_assert_eq!(clamped, requested < 1.0);
        if requested >= 1.0 {
            prop_assert!((f64::from(vms) - requested).abs() <= 0.5);
        }
    }
}
