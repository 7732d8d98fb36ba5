//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use mvlap_core::control::{
    optimize_control, rate_function_estimate, ControlPolicy, FlowSource, PolicyFamily, RateSettings, SearchSettings,
    TargetFlow,
};
use mvlap_core::diag::{martingale_residual, monomial_suite, PrefixStatistic, TestFunction, TruncationSpec};
use mvlap_core::experiment::{execute, ExperimentKind, ExperimentSpec, RunOptions, TargetSpec};
use mvlap_core::laplace::{control_energy, estimate_laplace, importance_sample_laplace, running_cost, Functional};
use mvlap_core::measures::{bounded_lipschitz, occupation_measure, wasserstein1_report, DiscreteMeasure, TransportMethod};
use mvlap_core::model::{CoefficientModel, InitialCondition, InitialLaw, ModelSpec, SimConfig};
use mvlap_core::rng::{domain, CounterRng};
use mvlap_core::sim::{simulate_controlled, simulate_delay, simulate_mckean_vlasov, simulate_uncontrolled};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn schilder(n: usize, steps: usize, seed: u64) -> (SimConfig, CoefficientModel) {
    (SimConfig::scalar(n, 1.0, steps, 0.0, seed), CoefficientModel::zero_drift(1, 1, 1.0))
}

fn criterion_1() -> Outcome {
    let (cfg, model) = schilder(5, 8, 2024);
    let f = Functional::terminal_linear(vec![1.0]);
    let a = estimate_laplace(&cfg, &model, &f, 1_000_000).unwrap();
    let settings = SearchSettings::default();
    let b = optimize_control(&cfg, &model, &f, PolicyFamily::OpenLoop { cells: 8 }, 2000, 64, &settings).unwrap();
    let gap = b.best_cost.value - a.value;
    let pass_a = (a.value + 0.5).abs() <= 0.01;
    let pass_b = (-0.55..=-0.45).contains(&b.best_cost.value);
    let pass_c = gap >= -0.02;
    outcome(
        pass_a && pass_b && pass_c,
        format!(
            "laplace={:.5}±{:.5} [{}], optimized={:.5}±{:.5} [{}] (evals {}, params {:?}), gap={:.5} [{}]",
            a.value,
            a.std_error,
            pass_a,
            b.best_cost.value,
            b.best_cost.std_error,
            pass_b,
            b.evals,
            b.best_params.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            gap,
            pass_c
        ),
    )
}

fn criterion_2() -> Outcome {
    let steps = 20;
    let cfg = SimConfig::scalar(200, 1.0, steps, 0.0, 77);
    let grid: Vec<f64> = (0..=steps).map(|k| cfg.time(k)).collect();
    let settings = RateSettings::default();
    let family = PolicyFamily::OpenLoop { cells: 4 };

    let wiener = CoefficientModel::zero_drift(1, 1, 1.0);
    let tilted = TargetFlow::gaussian_1d(&grid, 500, |t| t, f64::sqrt).unwrap();
    let r = rate_function_estimate(&tilted, &cfg, &wiener, family, &settings).unwrap();
    let pass_tilt = (0.425..=0.575).contains(&r.i_hat.value) && !r.unreachable;

    let ou = CoefficientModel::mean_field_ou(1, 1.0, 1.0, 1.0);
    let mut mv_cfg = cfg.clone();
    mv_cfg.particles = 20_000;
    mv_cfg.seed = 5;
    let mv = simulate_mckean_vlasov(&mv_cfg, &ou, 6).unwrap();
    let typical = TargetFlow::new(mv.flow, FlowSource::FromEnsemble).unwrap();
    let z = rate_function_estimate(&typical, &cfg, &ou, family, &settings).unwrap();
    let pass_typ = z.i_hat.value <= 0.05;
    outcome(
        pass_tilt && pass_typ,
        format!(
            "tilted I_hat={:.4}±{:.4} match={:.4} (threshold {}) [{}]; typical I_hat={:.4} match={:.4} [{}]",
            r.i_hat.value, r.i_hat.std_error, r.match_error, r.match_threshold, pass_tilt, z.i_hat.value, z.match_error, pass_typ
        ),
    )
}

fn ou_spec(kind: ExperimentKind, particles: usize, steps: usize, seed: u64) -> ExperimentSpec {
    let mut model = ModelSpec::family("mean_field_ou");
    model.rate = Some(1.0);
    model.couple = Some(1.0);
    ExperimentSpec {
        kind,
        sim: SimConfig::new(
            particles,
            1,
            1,
            1.0,
            steps,
            InitialCondition::Iid(InitialLaw::Normal {
                mean: vec![1.0],
                std: vec![0.5],
            }),
            seed,
        ),
        model,
        functional: None,
        policy: None,
        family: None,
        options: Default::default(),
    }
}

fn criterion_3() -> Outcome {
    let mut spec = ou_spec(ExperimentKind::LlnSweep, 50, 50, 31);
    spec.options.particle_counts = vec![50, 200, 800];
    spec.options.replicates = 20;
    spec.options.mv_particles = 20_000;
    let out = mvlap_core::experiment::run_experiment(&spec, &Default::default(), false).unwrap();
    let medians: Vec<f64> = serde_json::from_value(out.results["medians"].clone()).unwrap();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let halved = medians[2] < 0.5 * medians[0];
    outcome(decreasing && halved, format!("medians {medians:?}: decreasing={decreasing}, halved={halved}"))
}

fn criterion_4() -> Outcome {
    let model = CoefficientModel::mean_field_ou(1, 1.0, 1.0, 1.0);
    let spec = TruncationSpec::new(10.0, 0.0).unwrap();
    let w = PrefixStatistic::Constant { value: 1.0 };
    let cfg = ou_spec(ExperimentKind::MartingaleSuite, 10_000, 512, 404).sim;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut failures = Vec::new();
    for (name, policy) in [("zero", ControlPolicy::zero(1)), ("constant", ControlPolicy::constant(vec![0.5]))] {
        let out = simulate_controlled(&cfg, &model, &policy, None).unwrap();
        for r in monomial_suite(&out, &model, &spec, &w).unwrap() {
            count += 1;
            let z = if r.std_error > 0.0 { r.residual.abs() / r.std_error } else { 0.0 };
            worst = worst.max(z);
            if !r.within(3.0) {
                failures.push(format!("{name}:{}[{},{}] z={z:.2}", r.f, r.t0, r.t1));
            }
        }
    }
    // deterministic dynamics: residual is the Euler defect, first order in dt
    let det = CoefficientModel::mean_field_ou(1, 1.0, 0.5, 0.0);
    let f = TestFunction::XX { j: 0, k: 0 };
    let residual = |steps: usize| {
        let mut c = cfg.clone();
        c.particles = 200;
        c.steps = steps;
        let out = simulate_uncontrolled(&c, &det).unwrap();
        martingale_residual(&out, &det, &f, 0.0, 1.0, &spec, &w).unwrap().residual
    };
    let (coarse, fine) = (residual(512), residual(1024));
    let ratio = coarse / fine;
    let halving = (1.5..=3.0).contains(&ratio);
    outcome(
        failures.is_empty() && halving,
        format!(
            "{count} residuals, max |z|={worst:.2}, outside 3SE: {failures:?}; deterministic ratio {ratio:.3} ({coarse:.3e}/{fine:.3e})"
        ),
    )
}

fn criterion_5() -> Outcome {
    let (cfg, model) = schilder(5, 8, 55);
    let f = Functional::terminal_linear(vec![1.0]);
    let r = importance_sample_laplace(&cfg, &model, &ControlPolicy::constant(vec![-1.0]), &f, 100_000).unwrap();
    let close = (r.estimate.value + 0.5).abs() <= 0.02;
    let ratio_ok = r.weight_variance * 100.0 <= r.naive_variance;
    outcome(
        close && ratio_ok,
        format!(
            "IS={:.6} naive={:.5} variance ratio={:.3e}",
            r.estimate.value, r.naive.value, r.variance_ratio
        ),
    )
}

fn criterion_6() -> Outcome {
    let cfg = SimConfig::scalar(1, 1.0, 1000, 1.0, 0);
    let model = CoefficientModel::delayed_linear(1, 0.5, 1.0, 0.0);
    let out = simulate_delay(&cfg, &model, None).unwrap();
    let oracle = |t: f64| {
        if t <= 0.5 {
            1.0 - t
        } else {
            0.5 - (1.5 * (t - 0.5) - (t * t - 0.25) / 2.0)
        }
    };
    let err = (0..=cfg.steps)
        .map(|k| (out.states.state(0, k)[0] - oracle(cfg.time(k))).abs())
        .fold(0.0, f64::max);
    outcome(err <= 5.0 * cfg.dt(), format!("max deviation {err:.3e} vs bound {:.3e}", 5.0 * cfg.dt()))
}

fn small_spec(kind: ExperimentKind) -> ExperimentSpec {
    let mut s = ou_spec(kind, 300, 16, 9);
    s.options.reps = 200;
    s.options.budget = 60;
    s.options.reps_per_eval = 8;
    s.options.search.final_reps = 64;
    s.options.rate.budget_per_level = 32;
    s.options.rate.penalty_schedule = vec![1.0, 8.0];
    s.options.rate.final_reps = 4;
    s.options.particle_counts = vec![20, 80];
    s.options.replicates = 4;
    s.options.mv_particles = 2000;
    s.options.constant_control = Some(vec![0.3]);
    match kind {
        ExperimentKind::LaplaceEstimate | ExperimentKind::ImportanceSample | ExperimentKind::CostEstimate => {
            s.sim.particles = 4;
            s.functional = Some(Functional::terminal_linear(vec![1.0]).with_clip(5.0));
            s.policy = Some(ControlPolicy::constant(vec![-0.5]));
        }
        ExperimentKind::OptimizeControl => {
            s.sim.particles = 4;
            s.functional = Some(Functional::terminal_linear(vec![1.0]).with_clip(5.0));
            s.family = Some(PolicyFamily::FeedbackAffine { cells: 2 });
        }
        ExperimentKind::RateFunction => {
            s.sim.initial = InitialCondition::Constant { value: vec![0.0] };
            s.options.target = Some(TargetSpec::TiltedWiener {
                drift: 1.0,
                sigma: 1.0,
                atoms: 200,
            });
        }
        _ => {}
    }
    s
}

fn criterion_7() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for kind in ExperimentKind::ALL {
        let spec = small_spec(kind);
        let mut bytes = Vec::new();
        for threads in [1usize, 4] {
            let dir = root.path().join(format!("{kind:?}-{threads}"));
            let summary = execute(
                spec.clone(),
                &RunOptions {
                    out_dir: dir.clone(),
                    seed_override: None,
                    threads: Some(threads),
                    dump_paths: false,
                },
            );
            if summary.exit_code > 0 && summary.exit_code != 4 {
                mismatched.push(format!("{kind:?} exited {} ({:?})", summary.exit_code, summary.message));
            }
            bytes.push(std::fs::read(dir.join("results.json")).unwrap_or_default());
        }
        if bytes[0].is_empty() || bytes[0] != bytes[1] {
            mismatched.push(format!("{kind:?} differs"));
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("{} kinds at 1 and 4 threads; problems: {mismatched:?}", ExperimentKind::ALL.len()),
    )
}

fn random_measure(rng: &mut CounterRng) -> DiscreteMeasure {
    let n = 1 + (rng.next_u64() % 64) as usize;
    let atoms: Vec<f64> = (0..2 * n).map(|_| 4.0 * rng.uniform() - 2.0).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.01).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let drift: f64 = 1.0 - weights.iter().sum::<f64>();
    weights[0] += drift;
    DiscreteMeasure::new(2, atoms, weights).unwrap()
}

fn criterion_8() -> Outcome {
    let mut rng = CounterRng::new(8, domain::SAMPLING, 0);
    let (mut worst_tri, mut worst_bl) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut non_exact = 0;
    for _ in 0..1000 {
        let m = [random_measure(&mut rng), random_measure(&mut rng), random_measure(&mut rng)];
        let w = |i: usize, j: usize| {
            let r = wasserstein1_report(&m[i], &m[j]).unwrap();
            (r.value, r.method)
        };
        let (ab, mab) = w(0, 1);
        let (bc, mbc) = w(1, 2);
        let (ac, mac) = w(0, 2);
        for method in [mab, mbc, mac] {
            if !matches!(method, TransportMethod::ExactTransport | TransportMethod::ExactQuantile) {
                non_exact += 1;
            }
        }
        worst_tri = worst_tri.max(ac - ab - bc);
        for (i, j, wij) in [(0, 1, ab), (1, 2, bc), (0, 2, ac)] {
            let bl = bounded_lipschitz(&m[i], &m[j]).unwrap();
            worst_bl = worst_bl.max(bl - wij.min(2.0));
        }
    }
    outcome(
        worst_tri <= 1e-9 && worst_bl <= 1e-12 && non_exact == 0,
        format!("max triangle excess {worst_tri:.3e}, max BL - min(W1,2) {worst_bl:.3e}, non-exact solves {non_exact}"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = CounterRng::new(9, domain::SAMPLING, 0);
    let mut mismatches = 0;
    for run in 0..100 {
        let n = 2 + (rng.next_u64() % 30) as usize;
        let steps = 4 + (rng.next_u64() % 40) as usize;
        let family = PolicyFamily::FeedbackAffine { cells: 3 };
        let params: Vec<f64> = (0..6).map(|_| 3.0 * rng.uniform() - 1.5).collect();
        let policy = family.instantiate(&params, 1.0, 1, 1).unwrap();
        let cfg = SimConfig::new(
            n,
            1,
            1,
            1.0,
            steps,
            InitialCondition::Iid(InitialLaw::Uniform {
                low: vec![-1.0],
                high: vec![1.0],
            }),
            run,
        );
        let model = CoefficientModel::curie_weiss(1, 1.0, 0.5, 0.8);
        let out = simulate_controlled(&cfg, &model, &policy, None).unwrap();
        let occ = occupation_measure(&out).unwrap().control_cost();
        let energy = control_energy(out.controls.as_ref().unwrap());
        let running = running_cost(&out).unwrap();
        if occ.to_bits() != energy.to_bits() || (0.5 * occ).to_bits() != running.to_bits() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 100 runs differ"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 variational identity", criterion_1),
        ("2 rate function on tilted Wiener", criterion_2),
        ("3 law of large numbers sweep", criterion_3),
        ("4 martingale suite", criterion_4),
        ("5 importance sampling", criterion_5),
        ("6 delay correctness", criterion_6),
        ("7 determinism across threads", criterion_7),
        ("8 metric sanity", criterion_8),
        ("9 occupation cost identity", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.starts_with(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
