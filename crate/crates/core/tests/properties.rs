use ics_core::charpoly::affine_split;
use ics_core::cumulants::{cumulants_from_charpoly, fano_factor, model_cumulants_exact, CumulantVector};
use ics_core::hypothesis::predict_next_cumulant;
use ics_core::inverse::independent_cumulants;
use ics_core::io::{model_hash, parse_json, to_json, ModelFile};
use ics_core::model::fixtures::{ring, two_state};
use ics_core::model::{build_generator, embed_classical, ModelSpec, Transition};
use ics_core::recovery::two_state_closed_form;
use ics_core::sim::k_statistics;
use proptest::prelude::*;

fn cumulants(spec: &ModelSpec, order: usize) -> CumulantVector {
    cumulants_from_charpoly(&affine_split(&build_generator(spec).unwrap()).unwrap(), order).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn classical(n: usize, rates: &[f64]) -> ModelSpec {
    let mut spec = ModelSpec::classical(n, Transition::new(1, 2));
    let mut it = rates.iter();
    for from in 1..=n {
        for to in 1..=n {
            if from != to {
                spec = spec.with_rate(from, to, *it.next().unwrap());
            }
        }
    }
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ring_statistics_ignore_rate_order(rates in prop::collection::vec(0.2f64..5.0, 4), shuffle in Just(()).prop_perturb(|_, mut rng| {
        let mut p = vec![0, 1, 2, 3];
        for i in (1..4).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        p
    })) {
        let permuted: Vec<f64> = shuffle.iter().map(|&i| rates[i]).collect();
        let a = cumulants(&ring(&rates), 4);
        let b = cumulants(&ring(&permuted), 4);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(close(*x, *y, 1e-9), "{x} vs {y}");
        }
    }

    #[test]
    fn rescaling_time_scales_cumulants(rates in prop::collection::vec(0.2f64..5.0, 6), lambda in 0.1f64..10.0) {
        let base = classical(3, &rates);
        let scaled = classical(3, &rates.iter().map(|r| r * lambda).collect::<Vec<_>>());
        let (a, b) = (cumulants(&base, 4), cumulants(&scaled, 4));
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(close(lambda * x, *y, 1e-9), "{x} vs {y}");
        }
    }

    #[test]
    fn fano_factor_is_c2_over_c1(rates in prop::collection::vec(0.2f64..5.0, 6)) {
        let spec = classical(3, &rates);
        let pair = affine_split(&build_generator(&spec).unwrap()).unwrap();
        let c = cumulants_from_charpoly(&pair, 2).unwrap();
        prop_assert!(close(fano_factor(&pair).unwrap(), c.get(2) / c.get(1), 1e-12));
    }

    #[test]
    fn embedding_preserves_counting_statistics(rates in prop::collection::vec(0.2f64..5.0, 6)) {
        let spec = classical(3, &rates);
        let a = cumulants(&spec, 5);
        let b = cumulants(&embed_classical(&spec).unwrap(), 5);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!(close(*x, *y, 1e-8), "{x} vs {y}");
        }
    }

    #[test]
    fn classical_models_predict_their_next_cumulant(n in 2usize..=3, rates in prop::collection::vec(0.3f64..4.0, 6)) {
        let spec = classical(n, &rates[..n * (n - 1)]);
        let n_p = independent_cumulants(n);
        let c = model_cumulants_exact(&spec, n_p + 1).unwrap();
        let predicted = predict_next_cumulant(&c.truncated(n_p), n).unwrap();
        prop_assert!(close(predicted, c.get(n_p + 1), 1e-6), "{predicted} vs {}", c.get(n_p + 1));
    }

    #[test]
    fn two_state_rates_are_recovered(k21 in 0.1f64..10.0, k12 in 0.1f64..10.0) {
        let c = cumulants(&two_state(k21, k12), 2);
        let sols = two_state_closed_form(c.get(1), c.get(2)).unwrap();
        prop_assert!(sols.iter().any(|s| close(s[0], k21, 1e-6) && close(s[1], k12, 1e-6)), "{sols:?}");
    }

    #[test]
    fn model_documents_round_trip(rates in prop::collection::vec(0.01f64..5.0, 6)) {
        let spec = classical(3, &rates);
        let text = to_json(&ModelFile::from_spec(&spec));
        let back = parse_json::<ModelFile>(&text, "model").unwrap().to_spec().unwrap();
        prop_assert_eq!(model_hash(&back), model_hash(&spec));
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn k_statistics_beyond_the_mean_are_shift_invariant(sample in prop::collection::vec(0u32..50, 8..60), shift in 0u32..1000) {
        let x: Vec<f64> = sample.iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + shift as f64).collect();
        let (a, b) = (k_statistics(&x, 4), k_statistics(&y, 4));
        prop_assert!(close(a[0] + shift as f64, b[0], 1e-12));
        let scale = x.iter().map(|v| v * v).sum::<f64>().max(1.0);
        for (p, q) in a[1..].iter().zip(&b[1..]) {
            prop_assert!((p - q).abs() <= 1e-9 * scale * scale, "{p} vs {q}");
        }
    }
}
