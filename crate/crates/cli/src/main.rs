use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use shelf_search::environment::{sample_scenario, Scenario, TargetRegion, TaskParameterization};
use shelf_search::harness::{
    evaluate_suite, load_traces, replay_observation, run_episode, trace_file_name, write_suite, EpisodeSettings,
    EpisodeTrace, HeuristicBundle, Method, MetricsReport, SuiteConfig, SuiteResult,
};
use shelf_search::heuristic::HeuristicSpec;
use std::path::{Path, PathBuf};

const HEURISTIC_ENV: &str = "SHELF_SEARCH_HEURISTIC";

#[derive(Parser)]
#[command(name = "shelf-search", version, about = "Object search and retrieval on a simulated shelf")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its trace.
    Run(RunArgs),
    /// Run an evaluation suite and write metrics, traces and plots.
    Evaluate(EvaluateArgs),
    /// Render the observation at a trace step as a PNG.
    Render(RenderArgs),
    /// Sample a random scenario file.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long, required_unless_present = "print_config")]
    scenario: Option<PathBuf>,
    /// hybrid, hybrid_limited, greedy, stochastic, stochastic_gen, hierarchical or e.g. hybrid(4,4).
    #[arg(long, default_value = "hybrid")]
    method: String,
    /// Rollouts per root for the hybrid methods.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Rollout horizon for the hybrid methods.
    #[arg(long, default_value_t = 4)]
    h: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// scripted, scripted-noheatmap, remote:HOST:PORT or stdio:COMMAND; overridden by SHELF_SEARCH_HEURISTIC.
    #[arg(long, default_value = "scripted")]
    heuristic: String,
    /// Trace output (JSON lines).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Episode settings JSON (environment, planner, budgets); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Standard deviation of the execution noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Evaluate rollouts on a single thread.
    #[arg(long)]
    serial: bool,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Suite configuration JSON file.
    #[arg(long, required_unless_present_any = ["print_config", "from_traces"])]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Rebuild the report from a directory of saved traces instead of running.
    #[arg(long)]
    from_traces: Option<PathBuf>,
    /// Heuristic for every method; overridden by SHELF_SEARCH_HEURISTIC.
    #[arg(long)]
    heuristic: Option<String>,
    /// Print the effective suite configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Number of executed actions before the rendered observation.
    #[arg(long, default_value_t = 0)]
    step: usize,
    #[arg(long)]
    png: PathBuf,
    /// Pixel magnification of the 64×64 raster.
    #[arg(long, default_value_t = 8)]
    scale: u32,
}

#[derive(Args)]
struct GenerateArgs {
    /// Obstacle count range, e.g. 3-5.
    #[arg(long, default_value = "0-2")]
    obstacles: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Place the target in the back half of the shelf.
    #[arg(long)]
    back_half: bool,
    #[arg(long)]
    out: PathBuf,
}

fn heuristic_spec(flag: &str) -> Result<HeuristicSpec> {
    let text = match std::env::var(HEURISTIC_ENV) {
        Ok(v) if !v.trim().is_empty() => v,
        _ => flag.to_string(),
    };
    text.trim().parse().map_err(anyhow::Error::msg)
}

fn parse_method(name: &str, m: usize, h: usize) -> Result<Method> {
    if name.contains('(') {
        name.parse().map_err(anyhow::Error::msg)
    } else {
        Method::from_name(name, m, h).map_err(anyhow::Error::msg)
    }
}

fn run(args: RunArgs) -> Result<()> {
    let method = parse_method(&args.method, args.m, args.h)?;
    let spec = heuristic_spec(&args.heuristic)?;
    let mut settings = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<EpisodeSettings>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => EpisodeSettings::default(),
    };
    if let Some(sigma) = args.noise {
        settings.env.noise.sigma = sigma;
    }
    settings.planner.parallel = !args.serial;
    if args.print_config {
        let config = serde_json::json!({
            "method": method,
            "heuristic": spec,
            "seed": args.seed,
            "settings": settings,
        });
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let path = args.scenario.expect("required by clap");
    let scenario = Scenario::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let bundle = HeuristicBundle::from_spec(&spec)?;
    let trace = run_episode(method, &scenario, &settings, &bundle, args.seed)?;
    if let Some(out) = &args.trace {
        trace.save(out).with_context(|| format!("writing {}", out.display()))?;
    }
    let summary = trace.summary();
    println!(
        "{} {}: {} after {} actions, return {}, planning {:.3} s, hash {}",
        method,
        path.display(),
        summary.outcome.as_str(),
        summary.steps,
        summary.total_reward,
        summary.planning_seconds,
        summary.hash
    );
    if let Some(e) = &trace.error {
        bail!("heuristic failure: {e}");
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => SuiteConfig::load(path).with_context(|| format!("{}", path.display()))?,
        None => SuiteConfig::default(),
    };
    if let Some(flag) = &args.heuristic {
        config.heuristic = heuristic_spec(flag)?;
    } else if std::env::var(HEURISTIC_ENV).is_ok_and(|v| !v.trim().is_empty()) {
        config.heuristic = heuristic_spec("")?;
    }
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let out = args.out.expect("required by clap");
    if let Some(dir) = &args.from_traces {
        let traces = load_traces(dir).with_context(|| format!("loading traces from {}", dir.display()))?;
        if traces.is_empty() {
            bail!("no traces in {}", dir.display());
        }
        let report = MetricsReport::from_traces(&traces);
        report.write(&out)?;
        print_report(&report);
        return Ok(());
    }
    let bundle = HeuristicBundle::from_spec(&config.heuristic)?;
    let result = evaluate_suite(&config, &bundle)?;
    write_suite(&result, &config, &out)?;
    print_report(&result.report);
    report_failures(&result, &out);
    Ok(())
}

fn print_report(report: &MetricsReport) {
    println!("# {}", report.note);
    println!("method,clutter_bin,noise,episodes,success_rate,avg_actions_per_task,avg_time_per_task");
    for c in &report.cells {
        println!(
            "{},{},{},{},{:.3},{:.2},{:.3}",
            c.method, c.clutter_bin, c.noise, c.episodes, c.success_rate, c.avg_actions_per_task, c.avg_time_per_task
        );
    }
}

fn report_failures(result: &SuiteResult, out: &Path) {
    for t in result.traces.iter().filter(|t| t.error.is_some()) {
        log::warn!(
            "{}: infrastructure failure ({})",
            out.join("traces").join(trace_file_name(t)).display(),
            t.error.as_deref().unwrap_or_default()
        );
    }
}

fn render(args: RenderArgs) -> Result<()> {
    let trace = EpisodeTrace::load(&args.trace).with_context(|| format!("loading {}", args.trace.display()))?;
    let obs = replay_observation(&trace, args.step)?;
    let png = obs.raster().to_png(args.scale.max(1))?;
    std::fs::write(&args.png, png).with_context(|| format!("writing {}", args.png.display()))?;
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let (lo, hi) = match args.obstacles.split_once('-') {
        Some((a, b)) => (a.trim().parse()?, b.trim().parse()?),
        None => {
            let n: usize = args.obstacles.trim().parse()?;
            (n, n)
        }
    };
    if lo > hi {
        bail!("empty obstacle range {lo}-{hi}");
    }
    let mut param = TaskParameterization::obstacles(lo, hi);
    if args.back_half {
        param.target_region = TargetRegion::BackHalf;
    }
    let scenario = sample_scenario(&param, args.seed)?;
    scenario.save(&args.out)?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Render(a) => render(a),
        Command::Generate(a) => generate(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
