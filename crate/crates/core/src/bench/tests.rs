use super::*;

/// Twelve points on a line in two nests, best at the right end.
fn small_problem() -> Problem {
    let n = 12;
    let instances: Vec<Instance> =
        (0..n).map(|i| Instance::new(i, vec![i as f64 / (n - 1) as f64], usize::from(i < n / 2))).collect();
    let values: Vec<f64> = (0..n).map(|i| 3.0 * i as f64 / (n - 1) as f64).collect();
    Problem {
        name: "line".into(),
        instances,
        utilities: values.clone(),
        truth: values,
        nest_count: 2,
        lambdas: LambdaSource::Fixed(vec![0.8, 0.7]),
    }
}

fn quick_config(budget: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        scenarios: 2,
        budget,
        baseline_repetitions: 40,
        models: vec![SurrogateKind::Gp],
        seed: 11,
        ..ExperimentConfig::default()
    };
    cfg.model.fit.max_iterations = 300;
    cfg.model.fit.warm_max_iterations = 60;
    cfg
}

#[test]
fn gap_is_zero_at_best_and_one_at_worst() {
    let p = small_problem();
    assert_eq!(p.gap(11), 0.0);
    assert_eq!(p.gap(0), 1.0);
    assert!((p.gap(5) - 6.0 / 11.0).abs() < 1e-12);
    let f = Problem::from_function(LatentFunction::F2d);
    let best = crate::gp::argmax(&f.truth);
    assert_eq!(f.gap(best), 0.0);
}

#[test]
fn curves_have_budget_rows_per_method() {
    let p = small_problem();
    let cfg = quick_config(4);
    let report = run_benchmark(&cfg, &p, &mut |_| {}).unwrap();
    for m in ["gp+pi", RANDOM_LABEL] {
        let c = report.curve(m);
        assert_eq!(c.len(), 4, "{m}");
        assert!(c.iter().all(|pt| (0.0..=1.0).contains(&pt.mean_gap)));
    }
    assert_eq!(report.curve(RANDOM_LABEL)[0].n, 80);
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.baseline_runs.len(), 2);
}

#[test]
fn outputs_are_byte_identical_under_replay() {
    let p = small_problem();
    let cfg = quick_config(3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_benchmark(&cfg, &p, &mut |_| {}).unwrap().write_outputs(d.path()).unwrap();
    }
    for f in ["runs.csv", "curves.csv", "traces.csv", "failures.csv", "curves.svg"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, b, "{f}");
    }
    let curves = std::fs::read_to_string(dirs[0].path().join("curves.csv")).unwrap();
    assert!(curves.starts_with("method,t,mean_gap,std_err,n\n"));
    assert_eq!(curves.lines().count(), 1 + 2 * 3);
}

#[test]
fn random_baseline_improves_on_average() {
    let p = small_problem();
    let mut cfg = quick_config(6);
    cfg.baseline_repetitions = 400;
    let paths = random_baseline(&p, &cfg, 0).unwrap();
    let curve = summarize(RANDOM_LABEL, &paths);
    for w in curve.windows(2) {
        // the best-so-far can only be lost through noisy answers
        assert!(w[1].mean_gap <= w[0].mean_gap + 2.0 * (w[0].std_err + w[1].std_err), "{w:?}");
    }
    assert!(curve.last().unwrap().mean_gap < curve[0].mean_gap);
}

#[test]
fn methods_share_the_initialization() {
    let p = small_problem();
    let mut cfg = quick_config(2);
    cfg.models = vec![SurrogateKind::Gp, SurrogateKind::Dgp1];
    let a = run_method(&p, cfg.methods()[0], &cfg, 0).unwrap();
    let b = run_method(&p, cfg.methods()[1], &cfg, 0).unwrap();
    assert_eq!(a.records[0].incumbent, b.records[0].incumbent);
}

#[test]
fn two_instances_leave_no_active_queries() {
    let p = Problem {
        name: "pair".into(),
        instances: vec![Instance::new(0, vec![0.0], 0), Instance::new(1, vec![1.0], 0)],
        utilities: vec![0.0, 1.0],
        truth: vec![0.0, 1.0],
        nest_count: 1,
        lambdas: LambdaSource::Fixed(vec![0.8]),
    };
    let cfg = quick_config(1);
    let run = run_method(&p, cfg.methods()[0], &cfg, 0).unwrap();
    assert!(run.records.is_empty());
    assert_eq!(run.gaps.len(), 1);
    assert!(run.failure.is_none());
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = ExperimentConfig { target: BenchTarget::Itinerary, models: vec![SurrogateKind::Dgp5], ..Default::default() };
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
    let parsed: ExperimentConfig = toml::from_str("target = \"6d\"\nmodels = [\"gp\", \"dgp5\"]\nacquisitions = [\"ucb\"]\n").unwrap();
    assert_eq!(parsed.target, BenchTarget::F6d);
    assert_eq!(parsed.methods().len(), 2);
    assert_eq!(parsed.methods()[1].label(), "dgp5+ucb");
    assert!(toml::from_str::<ExperimentConfig>("budgett = 3").is_err());
    assert!(ExperimentConfig { budget: 0, ..Default::default() }.validate().is_err());
}

#[test]
fn scenario_seeds_are_distinct_and_stable() {
    let seeds: Vec<u64> = (0..50).map(|s| scenario_seed(7, s)).collect();
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 50);
    assert_eq!(scenario_seed(7, 3), seeds[3]);
    assert_ne!(scenario_seed(8, 3), seeds[3]);
}

#[test]
fn itinerary_problem_shape() {
    let p = Problem::itinerary_default();
    assert_eq!(p.instances.len(), 543);
    assert_eq!(p.instances[0].features.len(), 17);
    assert_eq!(p.lambdas, LambdaSource::Fixed(vec![0.792; 6]));
    assert!((p.truth.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn queries_to_reach_is_one_based() {
    assert_eq!(queries_to_reach(&[0.5, 0.3, 0.1], 0.3), Some(2));
    assert_eq!(queries_to_reach(&[0.5], 0.1), None);
}

#[test]
fn svg_has_one_polyline_per_method() {
    let curves = summarize("a", &[vec![0.5, 0.2]]).into_iter().chain(summarize("b", &[vec![0.6, 0.6]])).collect::<Vec<_>>();
    let svg = write_curves_svg(&curves, "t<1>");
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("t&lt;1&gt;"));
}

#[test]
fn benchmark_model_only_tightens_the_lengthscale_cap() {
    let bench = bench_model_config();
    let default = SurrogateConfig::default();
    assert_eq!(bench.fit.lengthscale_bounds, (0.05, 0.3));
    assert_eq!(bench.dgp.top_lengthscale_bounds, (0.05, 0.3));
    assert!(bench.fit.lengthscale_bounds.1 < default.fit.lengthscale_bounds.1);
    assert!(bench.dgp.top_lengthscale_bounds.1 < default.dgp.top_lengthscale_bounds.1);
    assert_eq!(bench.fit.warm_max_iterations, 150);
    assert_eq!(bench.fit.max_iterations, default.fit.max_iterations);
    assert_eq!(ExperimentConfig::default().model, bench);
}
