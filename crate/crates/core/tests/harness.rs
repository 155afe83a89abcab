use proptest::prelude::*;
use shelf_search::environment::{sample_scenario, TaskParameterization};
use shelf_search::harness::*;
use shelf_search::heuristic::{Heuristic, HeuristicError, HeuristicOutput, HeuristicSpec};
use shelf_search::observation::{History, Observation};
use std::sync::Arc;

fn scripted() -> HeuristicBundle {
    HeuristicBundle::from_spec(&HeuristicSpec::Scripted).unwrap()
}

fn small_suite() -> SuiteConfig {
    SuiteConfig {
        master_seed: 11,
        episodes: 10,
        methods: vec![Method::Greedy, Method::StochasticGen],
        clutter_bins: vec![ClutterBin { min: 0, max: 0 }, ClutterBin { min: 1, max: 2 }],
        step_limit: 25,
        ..SuiteConfig::default()
    }
}

#[test]
fn suite_produces_one_cell_per_method_and_bin() {
    let result = evaluate_suite(&small_suite(), &scripted()).unwrap();
    assert_eq!(result.traces.len(), 40);
    assert_eq!(result.report.cells.len(), 4);
    for c in &result.report.cells {
        assert_eq!(c.episodes, 10);
    }
    let names: Vec<_> = result.report.cells.iter().map(|c| (c.method.as_str(), c.clutter_bin.as_str())).collect();
    assert_eq!(
        names,
        [("greedy", "0-0"), ("greedy", "1-2"), ("stochastic_gen", "0-0"), ("stochastic_gen", "1-2")]
    );
}

#[test]
fn same_master_seed_gives_identical_metrics_serial_or_parallel() {
    let mut config = small_suite();
    config.episodes = 4;
    let a = evaluate_suite(&config, &scripted()).unwrap();
    config.parallel = false;
    let b = evaluate_suite(&config, &scripted()).unwrap();
    assert_eq!(a.report.to_csv(), b.report.to_csv());
    let ha: Vec<_> = a.traces.iter().map(|t| t.hash()).collect();
    let hb: Vec<_> = b.traces.iter().map(|t| t.hash()).collect();
    assert_eq!(ha, hb);
    config.master_seed += 1;
    let c = evaluate_suite(&config, &scripted()).unwrap();
    assert_ne!(ha, c.traces.iter().map(|t| t.hash()).collect::<Vec<_>>());
}

#[test]
fn cell_without_successes_reports_zero() {
    let config = SuiteConfig {
        episodes: 3,
        methods: vec![Method::Greedy],
        clutter_bins: vec![ClutterBin { min: 0, max: 1 }],
        step_limit: 1,
        ..SuiteConfig::default()
    };
    let result = evaluate_suite(&config, &scripted()).unwrap();
    let cell = &result.report.cells[0];
    assert_eq!(cell.successes, 0);
    assert_eq!(cell.success_rate, 0.0);
    assert_eq!(cell.avg_actions_per_task, 1.0);
    assert!(result.report.to_csv().contains(",0,0.000000,1.000000\n"));
    assert!(result.traces.iter().all(|t| t.outcome == Outcome::StepLimit));
}

#[test]
fn report_regenerates_byte_identically_from_saved_traces() {
    let mut config = small_suite();
    config.episodes = 3;
    config.plots = true;
    let result = evaluate_suite(&config, &scripted()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_suite(&result, &config, dir.path()).unwrap();
    let traces = load_traces(&dir.path().join("traces")).unwrap();
    assert_eq!(traces.len(), 12);
    let again = MetricsReport::from_traces(&traces);
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    assert_eq!(again.to_csv().as_bytes(), read("metrics.csv"));
    assert_eq!(again.to_json().as_bytes(), read("report.json"));
    assert_eq!(again.timing_csv().as_bytes(), read("timing.csv"));
    assert!(String::from_utf8(read("timing.csv")).unwrap().starts_with("# "));
    assert!(dir.path().join("plots/success_rate_noise0.png").exists());
    let saved = SuiteConfig::parse(&String::from_utf8(read("suite.json")).unwrap()).unwrap();
    assert_eq!(saved, config);
}

#[test]
fn successful_episodes_collect_minus_one_per_step() {
    let config = SuiteConfig {
        episodes: 6,
        methods: vec![Method::Greedy],
        clutter_bins: vec![ClutterBin { min: 0, max: 0 }],
        ..SuiteConfig::default()
    };
    let result = evaluate_suite(&config, &scripted()).unwrap();
    let mut successes = 0;
    for t in &result.traces {
        if t.success() {
            successes += 1;
            assert_eq!(t.total_reward(), -(t.steps.len() as f64));
            assert!(t.steps.last().unwrap().terminal);
            assert!(t.steps.len() <= 50);
        }
    }
    assert!(successes > 0);
}

fn one_trace() -> EpisodeTrace {
    let sc = sample_scenario(&TaskParameterization::obstacles(1, 2), 4).unwrap();
    let settings = EpisodeSettings::default();
    run_episode(Method::Greedy, &sc, &settings, &scripted(), 9).unwrap()
}

#[test]
fn traces_round_trip_through_jsonl() {
    let t = one_trace();
    let text = t.to_jsonl();
    assert_eq!(text.lines().count(), t.steps.len() + 2);
    let back = EpisodeTrace::from_jsonl(&text).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.to_jsonl(), text);
    let step: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    for key in ["t", "action", "reward", "terminal", "visible_ids", "gripper_pose"] {
        assert!(step.get(key).is_some(), "missing {key}");
    }
    assert_eq!(step["action"].as_array().unwrap().len(), 4);
}

#[test]
fn tampered_traces_are_rejected() {
    let t = one_trace();
    let text = t.to_jsonl();
    let tampered = text.replacen("\"reward\":-1.0", "\"reward\":-2.0", 1);
    assert_ne!(tampered, text);
    assert!(EpisodeTrace::from_jsonl(&tampered).is_err());
    let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    assert!(EpisodeTrace::from_jsonl(&truncated).is_err());
}

#[test]
fn hash_ignores_timing() {
    let t = one_trace();
    let mut u = t.clone();
    for s in &mut u.steps {
        s.plan_seconds += 1.0;
    }
    u.planning_seconds += 5.0;
    u.wall_clock += 5.0;
    assert_eq!(t.hash(), u.hash());
    u.steps[0].action[0] += 1e-9;
    assert_ne!(t.hash(), u.hash());
}

#[test]
fn replay_reproduces_recorded_observations() {
    let t = one_trace();
    for k in [0, 1, t.steps.len()] {
        let obs = replay_observation(&t, k).unwrap();
        if k > 0 {
            let rec = &t.steps[k - 1];
            assert_eq!(obs.visible_ids(), rec.visible_ids);
            let p = obs.gripper_pose();
            assert_eq!([p.x, p.y, p.theta], rec.gripper_pose);
        }
    }
    assert!(replay_observation(&t, t.steps.len() + 1).is_err());
}

struct Broken;

impl Heuristic<Observation> for Broken {
    fn evaluate(&self, _: &History<Observation>) -> Result<HeuristicOutput, HeuristicError> {
        Err(HeuristicError::RemoteUnavailable("connection refused".into()))
    }
}

#[test]
fn heuristic_failures_are_excluded_from_metrics() {
    let broken: SharedHeuristic = Arc::new(Broken);
    let bundle = HeuristicBundle {
        spec: HeuristicSpec::Remote("127.0.0.1:1".into()),
        primary: broken.clone(),
        without_generative_head: broken,
    };
    let config = SuiteConfig {
        episodes: 2,
        methods: vec![Method::Greedy, Method::Hybrid { m: 2, h: 2 }],
        clutter_bins: vec![ClutterBin { min: 0, max: 0 }],
        ..SuiteConfig::default()
    };
    let result = evaluate_suite(&config, &bundle).unwrap();
    for t in &result.traces {
        assert_eq!(t.outcome, Outcome::InfrastructureFailure);
        assert!(t.error.as_deref().unwrap().contains("connection refused"));
    }
    for c in &result.report.cells {
        assert_eq!(c.infrastructure_failures, 2);
        assert_eq!(c.success_rate, 0.0);
    }
}

#[test]
fn config_errors_carry_line_numbers() {
    let syntax = "{\n  \"episodes\": 3,\n  \"methods\": [\"greedy\",]\n}";
    assert_eq!(SuiteConfig::parse(syntax).unwrap_err().line, 3);
    let unknown = "{\n  \"episodes\": 3,\n\n  \"episods\": 4\n}";
    assert_eq!(SuiteConfig::parse(unknown).unwrap_err().line, 4);
    let method = "{\n  \"methods\": [\n    \"hybrid(4,4)\",\n    \"beam\"\n  ]\n}";
    let err = SuiteConfig::parse(method).unwrap_err();
    assert!(err.message.contains("unknown method"), "{err}");
    let zero = "{\n  \"master_seed\": 1,\n  \"episodes\": 0\n}";
    assert_eq!(SuiteConfig::parse(zero).unwrap_err().line, 3);
    let bins = "{\n  \"clutter_bins\": [[5, 2]]\n}";
    assert_eq!(SuiteConfig::parse(bins).unwrap_err().line, 2);
    let ok = SuiteConfig::parse("{\"methods\": [\"hybrid_limited(2,3)\", \"hierarchical\"]}").unwrap();
    assert_eq!(ok.methods, [Method::HybridLimited { m: 2, h: 3 }, Method::Hierarchical]);
    assert_eq!(ok.episodes, SuiteConfig::default().episodes);
}

#[test]
fn scenarios_are_shared_across_methods_and_noise() {
    let mut config = small_suite();
    config.noise_levels = vec![0.0, 0.15];
    config.episodes = 1;
    config.clutter_bins.truncate(1);
    let result = evaluate_suite(&config, &scripted()).unwrap();
    assert_eq!(result.traces.len(), 4);
    let first = &result.traces[0].header.scenario;
    assert!(result.traces.iter().all(|t| &t.header.scenario == first));
    assert_ne!(result.traces[0].header.seed, result.traces[1].header.seed);
}

proptest! {
    #[test]
    fn method_names_round_trip(kind in 0usize..6, m in 1usize..9, h in 1usize..9) {
        let method = Method::from_name(Method::NAMES[kind], m, h).unwrap();
        let text = method.to_string();
        prop_assert_eq!(text.parse::<Method>().unwrap(), method);
        let json = serde_json::to_string(&method).unwrap();
        prop_assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), method);
    }

    #[test]
    fn derived_seeds_differ_across_indices(master in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(master, &[a]), derive_seed(master, &[b]));
        prop_assert_ne!(derive_seed(master, &[a, b]), derive_seed(master, &[b, a]));
    }
}

#[test]
fn exhausted_wall_clock_budget_ends_with_time_limit() {
    let sc = sample_scenario(&TaskParameterization::obstacles(0, 0), 4).unwrap();
    let mut settings = EpisodeSettings::default();
    settings.time_limit = 0.0;
    let t = run_episode(Method::Hybrid { m: 2, h: 2 }, &sc, &settings, &scripted(), 1).unwrap();
    assert_eq!(t.outcome, Outcome::TimeLimit);
    assert!(!t.success());
    assert!(t.steps.is_empty());
}
