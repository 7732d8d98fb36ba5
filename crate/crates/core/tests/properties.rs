use mvlap_core::control::{canonicalize_policy, ControlPolicy, PolicyFamily};
use mvlap_core::diag::{generator_apply, TestFunction};
use mvlap_core::laplace::{estimate_cost, estimate_laplace, importance_sample_laplace, mean_and_se, Functional};
use mvlap_core::measures::{occupation_measure, relaxed_moments};
use mvlap_core::model::{CoefficientModel, InitialCondition, InitialLaw, MeasureFeatures, SimConfig};
use mvlap_core::sim::{simulate_controlled, simulate_mckean_vlasov, simulate_uncontrolled, simulate_with, MeasureSource};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_policy_matches_uncontrolled_bitwise(seed in any::<u64>(), n in 1usize..12, steps in 1usize..24, x0 in -2.0f64..2.0) {
        let cfg = SimConfig::scalar(n, 1.0, steps, x0, seed);
        let model = CoefficientModel::curie_weiss(1, 1.0, 0.7, 0.9);
        let a = simulate_uncontrolled(&cfg, &model).unwrap();
        let b = simulate_controlled(&cfg, &model, &ControlPolicy::zero(1), None).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(a.states.values()), bits(b.states.values()));
        prop_assert!(b.controls.unwrap().values().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn occupation_cost_is_mean_second_moment(seed in any::<u64>(), n in 1usize..10, c in -2.0f64..2.0) {
        let cfg = SimConfig::scalar(n, 1.0, 10, 0.0, seed);
        let model = CoefficientModel::mean_field_ou(1, 1.0, 0.5, 1.0);
        let out = simulate_controlled(&cfg, &model, &ControlPolicy::constant(vec![c]), None).unwrap();
        let occ = occupation_measure(&out).unwrap();
        prop_assert_eq!(occ.particles(), n);
        let rec = out.controls.as_ref().unwrap();
        let direct: f64 = (0..n).map(|i| relaxed_moments(rec, i).unwrap().second).sum::<f64>() / n as f64;
        prop_assert!((occ.control_cost() - direct).abs() <= 1e-12);
        prop_assert!((occ.control_cost() - c * c).abs() <= 1e-12);
    }

    #[test]
    fn canonicalization_obeys_jensen(seed in any::<u64>(), cells in 1usize..6) {
        let cfg = SimConfig::scalar(8, 1.0, 12, 0.3, seed);
        let model = CoefficientModel::mean_field_ou(1, 1.0, 1.0, 1.0);
        let fb = PolicyFamily::FeedbackAffine { cells: 3 }.instantiate(&[1.5, -2.0, 0.5, 0.2, -0.3, 0.9], 1.0, 1, 1).unwrap();
        let rec = simulate_controlled(&cfg, &model, &fb, None).unwrap().controls.unwrap();
        let before = occupation_energy(&rec);
        for collapse in [false, true] {
            let canon = canonicalize_policy(&rec, cells, collapse).unwrap();
            let replay = simulate_controlled(&cfg, &model, &canon, None).unwrap();
            prop_assert!(occupation_energy(replay.controls.as_ref().unwrap()) <= before + 1e-12);
        }
    }
}

fn occupation_energy(rec: &mvlap_core::measures::ControlRecord) -> f64 {
    mvlap_core::laplace::control_energy(rec)
}

#[test]
fn cost_bounds_laplace_from_above() {
    let cfg = SimConfig::scalar(3, 1.0, 8, 0.5, 17);
    let model = CoefficientModel::mean_field_ou(1, 1.0, 0.5, 1.0);
    let f = Functional::terminal_linear(vec![1.0]).with_clip(2.0);
    let laplace = estimate_laplace(&cfg, &model, &f, 100_000).unwrap();
    let policies = [
        ControlPolicy::zero(1),
        ControlPolicy::constant(vec![-0.5]),
        ControlPolicy::constant(vec![0.8]),
        PolicyFamily::FeedbackAffine { cells: 2 }.instantiate(&[-1.0, 0.3, -0.2, -0.6], 1.0, 1, 1).unwrap(),
    ];
    for p in &policies {
        let cost = estimate_cost(&cfg, &model, p, &f, 20_000).unwrap();
        let joint = (cost.std_error.powi(2) + laplace.std_error.powi(2)).sqrt();
        assert!(cost.value >= laplace.value - 3.0 * joint, "{p:?}: {} < {}", cost.value, laplace.value);
    }
}

#[test]
fn importance_sampling_is_consistent_under_refinement() {
    let model = CoefficientModel::mean_field_ou(1, 1.0, 1.0, 1.0);
    let f = Functional::terminal_linear(vec![1.0]).with_clip(3.0);
    let fb = PolicyFamily::FeedbackAffine { cells: 2 }.instantiate(&[-0.5, -0.5, -0.4, -0.2], 1.0, 1, 1).unwrap();
    for steps in [8, 16] {
        let cfg = SimConfig::scalar(4, 1.0, steps, 0.2, 3);
        let r = importance_sample_laplace(&cfg, &model, &fb, &f, 50_000).unwrap();
        let joint = (r.estimate.std_error.powi(2) + r.naive.std_error.powi(2)).sqrt();
        assert!((r.estimate.value - r.naive.value).abs() <= 3.0 * joint, "steps {steps}: {r:?}");
    }
}

#[test]
fn generator_matches_one_step_expectation() {
    let model = CoefficientModel::curie_weiss(1, 1.0, 0.5, 0.7);
    let n = 100_000;
    let x0 = 0.6;
    let y = 0.4;
    let z = 0.3;
    let dt = 1e-3;
    let frozen = vec![MeasureFeatures::dirac(&[0.2])];
    let cfg = SimConfig::new(n, 1, 1, dt, 1, InitialCondition::Constant { value: vec![x0] }, 99);
    let out = simulate_with(&cfg, &model, Some(&ControlPolicy::constant(vec![y])), None, MeasureSource::Frozen(&frozen)).unwrap();
    for f in TestFunction::monomials() {
        let exact = generator_apply(&model, &f, 0.0, &[x0], &[y], &[z], &frozen[0]).unwrap();
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let x1 = out.states.state(i, 1);
                let z1 = z + out.noise.increment(i, 0)[0];
                (f.value(x1, &[z1]) - f.value(&[x0], &[z])) / dt
            })
            .collect();
        let (mean, se) = mean_and_se(&samples);
        assert!((mean - exact).abs() <= 3.0 * se + 1e-9, "{f:?}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn particle_system_tracks_mean_field_limit() {
    let cfg = SimConfig::new(
        4000,
        1,
        1,
        1.0,
        50,
        InitialCondition::Iid(InitialLaw::Normal {
            mean: vec![0.5],
            std: vec![0.7],
        }),
        12,
    );
    let model = CoefficientModel::curie_weiss(1, 1.0, 1.0, 0.8);
    let mv = simulate_mckean_vlasov(&cfg, &model, 8).unwrap();
    assert!(!mv.non_convergence);
    assert!(mv.residual < 1e-6, "{:?}", mv.residual_history);
    let mut c = cfg.clone();
    c.seed = 1234;
    let ps = simulate_uncontrolled(&c, &model).unwrap();
    let a = ps.states.marginal(cfg.steps).unwrap();
    let b = &mv.flow[cfg.steps];
    let d = mvlap_core::measures::wasserstein1(&a, b).unwrap();
    assert!(d < 0.08, "W1 = {d}");
}
