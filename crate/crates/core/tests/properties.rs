use adafl::control::{convergence_bound, estimate_node_params, h, EstimatedParams, Flag};
use adafl::data::{generate_synthetic, partition, Case};
use adafl::engine::{run_fixed_tau, FixedTauConfig, Init, Mode};
use adafl::harness::{read_trace, trace_to_string, TraceRecord};
use adafl::models::{LossModel, ModelKind, Sample};
use adafl::param::weighted_mean;
use proptest::prelude::*;

fn direct_h(x: u64, eta: f64, beta: f64, delta: f64) -> f64 {
    delta / beta * ((1.0 + eta * beta).powf(x as f64) - 1.0) - eta * delta * x as f64
}

proptest! {
    #[test]
    fn h_matches_closed_form(x in 2u64..150, eta in 0.01f64..0.5, beta in 0.1f64..3.0, delta in 0.0f64..5.0) {
        let got = h(x, eta, beta, delta).unwrap();
        let want = direct_h(x, eta, beta, delta);
        // the closed form loses digits to cancellation when the result is small
        let scale = delta / beta * (1.0 + eta * beta).powf(x as f64);
        prop_assert!((got - want).abs() <= 1e-9 * scale.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn h_grows_with_beta(x in 2u64..100, eta in 0.001f64..0.2, beta in 0.1f64..2.0, bump in 0.0f64..1.0, delta in 0.1f64..2.0) {
        let lo = h(x, eta, beta, delta).unwrap();
        let hi = h(x, eta, beta + bump, delta).unwrap();
        prop_assert!(hi >= lo * (1.0 - 1e-12));
    }

    #[test]
    fn bound_decreases_with_iterations(t in 1u64..10_000, extra in 1u64..10_000, tau in 1u64..50) {
        let p = EstimatedParams::new(0.5, 0.8, 0.3);
        let a = convergence_bound(t, tau, 0.01, 0.05, &p).unwrap();
        let b = convergence_bound(t + extra, tau, 0.01, 0.05, &p).unwrap();
        prop_assert!(b <= a);
    }

    #[test]
    fn weighted_mean_of_identical_vectors_is_exact(v in prop::collection::vec(-1e6f64..1e6, 1..8), w in prop::collection::vec(0.1f64..100.0, 1..6)) {
        let views: Vec<&[f64]> = w.iter().map(|_| v.as_slice()).collect();
        let m = weighted_mean(&views, &w).unwrap();
        prop_assert_eq!(m.as_slice(), v.as_slice());
    }

    #[test]
    fn weighted_mean_stays_in_the_hull(a in prop::collection::vec(-10f64..10.0, 3), b in prop::collection::vec(-10f64..10.0, 3), wa in 0.1f64..10.0, wb in 0.1f64..10.0) {
        let m = weighted_mean(&[&a, &b], &[wa, wb]).unwrap();
        for k in 0..3 {
            let (lo, hi) = (a[k].min(b[k]), a[k].max(b[k]));
            prop_assert!(m[k] >= lo - 1e-12 && m[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn regression_beta_estimate_below_smoothness(
        xs in prop::collection::vec(prop::collection::vec(-2f64..2.0, 3), 2..10),
        w in prop::collection::vec(-1f64..1.0, 3),
        step in prop::collection::vec(-1f64..1.0, 3),
    ) {
        let samples: Vec<Sample> = xs.iter().map(|x| Sample::new(x.clone(), x.iter().sum())).collect();
        let model = LossModel::LinearRegression;
        let w2: Vec<f64> = w.iter().zip(&step).map(|(a, b)| a + b).collect();
        let f = |v: &[f64]| model.subset_loss(v, &samples, None).unwrap();
        let g = |v: &[f64]| model.subset_gradient(v, &samples, None).unwrap();
        let (_, beta) = estimate_node_params(&w2, &w, f(&w2), f(&w), &g(&w2), &g(&w)).unwrap();
        let bound = model.smoothness_bound(&samples).unwrap();
        prop_assert!(beta <= bound + 1e-6, "{beta} > {bound}");
    }

    #[test]
    fn trace_round_trips(
        rows in prop::collection::vec((0u64..1000, 0u32..200, prop::option::of(-1e3f64..1e3), prop::collection::vec(0f64..50.0, 1..3), any::<bool>()), 0..20)
    ) {
        let records: Vec<TraceRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (t, tau, loss, consumed, stop))| TraceRecord {
                round: i as u64,
                t: *t,
                tau: *tau,
                loss: *loss,
                accuracy: None,
                rho: *loss,
                beta: None,
                delta: loss.map(f64::abs),
                c_hat: consumed.clone(),
                b_hat: consumed.clone(),
                consumed: consumed.clone(),
                flags: if *stop { vec![Flag::Stop, Flag::Final] } else { vec![] },
            })
            .collect();
        let text = trace_to_string(&records).unwrap();
        prop_assert_eq!(read_trace(text.as_bytes()).unwrap(), records);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn best_loss_never_increases(seed in 0u64..1000, tau in 1u32..12, case in 1u8..=4) {
        let ds = generate_synthetic(ModelKind::SquaredSvm, 120, 4, seed).unwrap();
        let parts = partition(&ds, 3, Case::from_index(case).unwrap(), seed).unwrap();
        let model = LossModel::svm(0.05).unwrap();
        let cfg = FixedTauConfig {
            tau,
            iterations: 60,
            eta: 0.2,
            mode: Mode::Sgd { batch_size: 8 },
            init: Init::Gaussian { std: 1.0 },
            seed,
            parallel: false,
        };
        let run = run_fixed_tau(&cfg, &parts, &model).unwrap();
        let best = run.trace.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
        prop_assert!(run.state.f_w_f <= best);
        let wf_loss = model.global_loss(&run.state.w_f, &parts).unwrap();
        prop_assert_eq!(wf_loss, run.state.f_w_f);
    }
}
