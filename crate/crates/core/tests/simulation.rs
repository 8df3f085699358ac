use cbps_core::inference::Method;
use cbps_core::propensity::expit;
use cbps_core::simulation::{
    bias_oracle_b, draw_replication, optimal_f, replication_rng, run_monte_carlo, run_replication, DgpSpec,
    McOptions, OracleWeighting, Scenario, X1Spread,
};
use cbps_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn true_ate_matches_direct_simulation() {
    // independent draw of E[L(X)] from the covariate law
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x1 = Normal::new(3.0, 2f64.sqrt()).unwrap();
    let draws: Vec<f64> = (0..400_000).map(|_| x1.sample(&mut rng)).collect();
    let n = draws.len() as f64;
    for (scenario, l) in [(Scenario::BothCorrect, 1), (Scenario::OutcomeMisspecified, 2)] {
        let values: Vec<f64> = draws.iter().map(|x| 27.4 * x.powi(l)).collect();
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let truth = DgpSpec::new(scenario, 1000, 0.0).true_ate();
        assert!((mean - truth).abs() < 4.0 * sd / n.sqrt(), "{scenario}: {mean} vs {truth}");
    }
    assert!((DgpSpec::new(Scenario::BothCorrect, 1000, 0.0).true_ate() - 82.2).abs() < 1e-12);
    assert!((DgpSpec::new(Scenario::BothMisspecified, 1000, 0.0).true_ate() - 301.4).abs() < 1e-12);
    let mut wide = DgpSpec::new(Scenario::OutcomeMisspecified, 1000, 0.0);
    wide.x1_spread = X1Spread::Sd;
    assert!((wide.true_ate() - 27.4 * 13.0).abs() < 1e-9);
}

#[test]
fn correct_design_uses_the_logistic_propensity() {
    let spec = DgpSpec::new(Scenario::BothCorrect, 500, 0.67);
    let draw = spec.draw_with_rng(&mut replication_rng(5, 0)).unwrap();
    for i in 0..draw.sample.n() {
        let x = draw.sample.row(i);
        let p = expit(-0.67 * x[0] + 0.5 * x[1] - 0.25 * x[2] - 0.1 * x[3]);
        assert!((draw.pi_true[i] - p).abs() < 1e-15);
    }
    assert_eq!(draw.cap_events, 0);
}

#[test]
fn local_tilt_is_capped() {
    let mut spec = DgpSpec::new(Scenario::PsLocal, 2000, 1.0);
    spec.xi = Some(0.2);
    let draw = spec.draw_with_rng(&mut replication_rng(5, 0)).unwrap();
    assert!(draw.pi_true.iter().all(|&p| p > 0.0 && p <= 0.95));
    let at_cap = draw.pi_true.iter().filter(|&&p| p == 0.95).count();
    assert!(draw.cap_events > 0);
    assert_eq!(at_cap, draw.cap_events);
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut spec = DgpSpec::new(Scenario::BothCorrect, 1000, 0.0);
    spec.xi = Some(0.1);
    assert!(matches!(spec.validate(), Err(Error::Config(_))));
    assert!(matches!(DgpSpec::new(Scenario::PsLocal, 5, 0.0).validate(), Err(Error::Config(_))));
    let bad: Result<DgpSpec, _> = serde_json::from_str(r#"{"scenario": "ps-local", "sample_size": 10}"#);
    assert!(bad.is_err());
    let ok: DgpSpec = serde_json::from_str(r#"{"scenario": "ps-local", "n": 300, "beta1": 0.33}"#).unwrap();
    assert_eq!((ok.scenario, ok.n, ok.beta1), (Scenario::PsLocal, 300, 0.33));
}

#[test]
fn replications_can_be_regenerated_alone() {
    let spec = DgpSpec::new(Scenario::PsMisspecified, 200, 1.0);
    let rep = run_replication(&spec, &[Method::Ocbps], 7, 42, &McOptions::default());
    let again = spec.draw_with_rng(&mut replication_rng(42, 7)).unwrap();
    assert_eq!(rep.draw.unwrap().sample, again.sample);
    assert_eq!(draw_replication(&spec, 42).unwrap(), spec.draw_with_rng(&mut replication_rng(42, 0)).unwrap().sample);
}

#[test]
fn summaries_do_not_depend_on_the_thread_count() {
    let spec = DgpSpec::new(Scenario::PsLocal, 300, 0.33);
    let methods = [Method::True, Method::Glm, Method::Cbps, Method::Ocbps, Method::Aipw];
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&spec, &methods, 40, 3).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(3));
}

#[test]
fn single_replication_has_zero_spread() {
    let spec = DgpSpec::new(Scenario::BothCorrect, 500, 0.0);
    let summary = run_monte_carlo(&spec, &[Method::True, Method::Glm, Method::Cbps, Method::Ocbps], 1, 1).unwrap();
    assert!(summary.rows.iter().all(|r| r.sd == 0.0 && r.failures == 0));
}

#[test]
fn oracle_separates_optimal_and_generic_balancing() {
    let spec = DgpSpec::new(Scenario::PsLocal, 1000, 0.33);
    let generic = |x: &[f64]| vec![1.0, x[0], x[1], x[2], x[3]];
    let optimal = |x: &[f64]| optimal_f(&spec, x);
    for weighting in [OracleWeighting::Identity, OracleWeighting::InverseOmega] {
        let g = bias_oracle_b(&spec, &generic, 40_000, 8, weighting).unwrap();
        let o = bias_oracle_b(&spec, &optimal, 40_000, 8, weighting).unwrap();
        assert!(g.b.abs() > 5.0 * g.std_error, "{g:?}");
        assert!(o.b.abs() <= 3.0 * o.std_error, "{o:?}");
    }
}
