//! Closed-loop episode runner, JSONL traces, evaluation suites and metric
//! reports.

use crate::baselines::{greedy_action, stochastic_action, HierarchicalConfig, HierarchicalController};
use crate::environment::{
    sample_scenario, EnvConfig, Environment, NoiseModel, Scenario, ScenarioError, TargetRegion, TaskParameterization,
    Terminal,
};
use crate::heuristic::{Heuristic, HeuristicError, HeuristicSpec, RemoteConfig, RemoteHeuristic, ScriptedHeuristic};
use crate::observation::Observation;
use crate::planner::{hybrid_plan, HybridMode, PlannerConfig, PlannerError, ShelfSim};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

pub const TRACE_VERSION: u32 = 1;

/// Stated wherever planning time is reported.
pub const TIMING_NOTE: &str =
    "avg_time_per_task is the wall clock spent in planning calls; execution is simulated and not timed";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Hybrid { m: usize, h: usize },
    /// Hybrid planner restricted to the most likely target hypothesis.
    HybridLimited { m: usize, h: usize },
    Greedy,
    Stochastic,
    StochasticGen,
    Hierarchical,
}

impl Method {
    pub const NAMES: [&'static str; 6] = ["hybrid", "hybrid_limited", "greedy", "stochastic", "stochastic_gen", "hierarchical"];

    /// Builds a method from its name, using `m` and `h` for the hybrid variants.
    pub fn from_name(name: &str, m: usize, h: usize) -> Result<Self, String> {
        match name {
            "hybrid" => Ok(Method::Hybrid { m, h }),
            "hybrid_limited" => Ok(Method::HybridLimited { m, h }),
            "greedy" => Ok(Method::Greedy),
            "stochastic" => Ok(Method::Stochastic),
            "stochastic_gen" => Ok(Method::StochasticGen),
            "hierarchical" => Ok(Method::Hierarchical),
            other => Err(format!("unknown method `{other}` (expected one of {})", Self::NAMES.join(", "))),
        }
    }

    /// Heuristic configuration the method runs with. Stochastic uses the
    /// variant without the generative head, Stochastic_gen the one with it.
    pub fn heuristic_variant(&self) -> HeuristicVariant {
        match self {
            Method::Stochastic => HeuristicVariant::WithoutGenerativeHead,
            _ => HeuristicVariant::Primary,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Hybrid { m, h } => write!(f, "hybrid({m},{h})"),
            Method::HybridLimited { m, h } => write!(f, "hybrid_limited({m},{h})"),
            Method::Greedy => write!(f, "greedy"),
            Method::Stochastic => write!(f, "stochastic"),
            Method::StochasticGen => write!(f, "stochastic_gen"),
            Method::Hierarchical => write!(f, "hierarchical"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    /// Accepts `name` or `name(m,h)`; hybrid variants default to m = h = 4.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let defaults = PlannerConfig::default();
        match s.split_once('(') {
            None => Method::from_name(s, defaults.m, defaults.h),
            Some((name, rest)) => {
                let args = rest.strip_suffix(')').ok_or_else(|| format!("missing `)` in `{s}`"))?;
                let (m, h) = args.split_once(',').ok_or_else(|| format!("expected `{name}(m,h)`"))?;
                let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
                let method = Method::from_name(name.trim(), parse(m)?, parse(h)?)?;
                match method {
                    Method::Hybrid { .. } | Method::HybridLimited { .. } => Ok(method),
                    _ => Err(format!("method `{name}` takes no parameters")),
                }
            }
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeuristicVariant {
    Primary,
    WithoutGenerativeHead,
}

pub type SharedHeuristic = Arc<dyn Heuristic<Observation>>;

/// The heuristic configurations a run may need.
#[derive(Clone)]
pub struct HeuristicBundle {
    pub spec: HeuristicSpec,
    pub primary: SharedHeuristic,
    pub without_generative_head: SharedHeuristic,
}

impl fmt::Debug for HeuristicBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeuristicBundle").field("spec", &self.spec).finish()
    }
}

impl HeuristicBundle {
    /// A remote service serves a single configuration, used for both variants.
    pub fn from_spec(spec: &HeuristicSpec) -> Result<Self, HeuristicError> {
        let (primary, without): (SharedHeuristic, SharedHeuristic) = match spec {
            HeuristicSpec::Scripted => (
                Arc::new(ScriptedHeuristic::default()),
                Arc::new(ScriptedHeuristic::without_heatmap()),
            ),
            HeuristicSpec::ScriptedNoHeatmap => {
                let h: SharedHeuristic = Arc::new(ScriptedHeuristic::without_heatmap());
                (h.clone(), h)
            }
            HeuristicSpec::Remote(_) | HeuristicSpec::Stdio(_) => {
                let config = RemoteConfig::from_spec(spec)
                    .ok_or_else(|| HeuristicError::RemoteUnavailable(format!("bad endpoint {spec}")))?;
                let h: SharedHeuristic = Arc::new(RemoteHeuristic::connect(config)?);
                (h.clone(), h)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            primary,
            without_generative_head: without,
        })
    }

    pub fn get(&self, variant: HeuristicVariant) -> &SharedHeuristic {
        match variant {
            HeuristicVariant::Primary => &self.primary,
            HeuristicVariant::WithoutGenerativeHead => &self.without_generative_head,
        }
    }
}

/// SplitMix64 over a sequence of words.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

const ENV_STREAM: u64 = 1;
const PLAN_STREAM: u64 = 2;
const POLICY_STREAM: u64 = 3;
const CONTROLLER_STREAM: u64 = 4;
const SCENARIO_STREAM: u64 = 5;
const EPISODE_STREAM: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    pub env: EnvConfig,
    pub planner: PlannerConfig,
    pub hierarchical: HierarchicalSettings,
    /// Wall-clock budget per episode in seconds.
    pub time_limit: f64,
}

/// Subset of the hierarchical configuration persisted with a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchicalSettings {
    pub waypoints: usize,
    pub sweep_y: f64,
    pub rrt_budget: usize,
}

impl Default for HierarchicalSettings {
    fn default() -> Self {
        let d = HierarchicalConfig::default();
        Self {
            waypoints: d.waypoints,
            sweep_y: d.sweep_y,
            rrt_budget: d.rrt.budget,
        }
    }
}

impl HierarchicalSettings {
    pub fn to_config(self) -> HierarchicalConfig {
        let mut c = HierarchicalConfig {
            waypoints: self.waypoints,
            sweep_y: self.sweep_y,
            ..HierarchicalConfig::default()
        };
        c.rrt.budget = self.rrt_budget;
        c
    }
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            planner: PlannerConfig::default(),
            hierarchical: HierarchicalSettings::default(),
            time_limit: 120.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Dropped,
    StepLimit,
    TimeLimit,
    /// The heuristic service failed; excluded from metrics.
    InfrastructureFailure,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Dropped => "dropped",
            Outcome::StepLimit => "step_limit",
            Outcome::TimeLimit => "time_limit",
            Outcome::InfrastructureFailure => "infrastructure_failure",
        }
    }
}

/// Position of an episode inside an evaluation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    pub method_index: usize,
    pub bin_index: usize,
    pub noise_index: usize,
    pub episode: usize,
    pub clutter_bin: String,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub method: Method,
    pub heuristic: HeuristicSpec,
    pub seed: u64,
    pub settings: EpisodeSettings,
    pub scenario: Scenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<CellRef>,
}

/// One executed action and the observation that followed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub action: [f64; 4],
    pub reward: f64,
    pub terminal: bool,
    pub visible_ids: Vec<u32>,
    pub gripper_pose: [f64; 3],
    /// Wall clock of the planning call; not part of the trace hash.
    pub plan_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub outcome: Outcome,
    pub steps: usize,
    pub total_reward: f64,
    /// Planning wall clock in seconds.
    pub planning_seconds: f64,
    /// Episode wall clock in seconds, including simulation.
    pub wall_clock: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub planning_seconds: f64,
    pub wall_clock: f64,
    pub error: Option<String>,
}

#[derive(Serialize)]
struct HashedStep<'a> {
    t: usize,
    action: &'a [f64; 4],
    reward: f64,
    terminal: bool,
    visible_ids: &'a [u32],
    gripper_pose: &'a [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: TraceHeader,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: TraceSummary,
}

impl EpisodeTrace {
    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn actions(&self) -> usize {
        self.steps.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// SHA-256 over everything except timing.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.header).expect("header serializes"));
        for s in &self.steps {
            let view = HashedStep {
                t: s.t,
                action: &s.action,
                reward: s.reward,
                terminal: s.terminal,
                visible_ids: &s.visible_ids,
                gripper_pose: &s.gripper_pose,
            };
            h.update(b"\n");
            h.update(serde_json::to_vec(&view).expect("step serializes"));
        }
        h.update(b"\n");
        h.update(self.outcome.as_str().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            outcome: self.outcome,
            steps: self.steps.len(),
            total_reward: self.total_reward(),
            planning_seconds: self.planning_seconds,
            wall_clock: self.wall_clock,
            error: self.error.clone(),
            hash: self.hash(),
        }
    }

    /// Header line, one line per step, summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLine {
            header: self.header.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&SummaryLine { summary: self.summary() }).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |i: usize, e: serde_json::Error| HarnessError::Trace(format!("line {}: {e}", i + 1));
        let (i, first) = lines.next().ok_or_else(|| HarnessError::Trace("empty trace".into()))?;
        let header = serde_json::from_str::<HeaderLine>(first).map_err(|e| bad(i, e))?.header;
        let mut steps = Vec::new();
        let mut summary = None;
        for (i, line) in lines {
            if summary.is_some() {
                return Err(HarnessError::Trace(format!("line {}: content after summary", i + 1)));
            }
            if line.trim_start().starts_with("{\"summary\"") {
                summary = Some(serde_json::from_str::<SummaryLine>(line).map_err(|e| bad(i, e))?.summary);
            } else {
                steps.push(serde_json::from_str::<StepRecord>(line).map_err(|e| bad(i, e))?);
            }
        }
        let summary = summary.ok_or_else(|| HarnessError::Trace("missing summary line".into()))?;
        let trace = Self {
            header,
            steps,
            outcome: summary.outcome,
            planning_seconds: summary.planning_seconds,
            wall_clock: summary.wall_clock,
            error: summary.error,
        };
        if trace.hash() != summary.hash {
            return Err(HarnessError::Trace("hash does not match contents".into()));
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

enum Controller {
    Planner { sim: ShelfSim, mode: HybridMode, config: PlannerConfig },
    Greedy,
    Stochastic(ChaCha8Rng),
    Hierarchical(Box<HierarchicalController>),
}

/// Runs one observe / plan / execute episode to its end.
pub fn run_episode(
    method: Method,
    scenario: &Scenario,
    settings: &EpisodeSettings,
    heuristics: &HeuristicBundle,
    seed: u64,
) -> Result<EpisodeTrace, HarnessError> {
    let started = Instant::now();
    let mut env = Environment::new(scenario, settings.env, derive_seed(seed, &[ENV_STREAM]))?;
    let heuristic = heuristics.get(method.heuristic_variant()).clone();
    let physics = settings.env.physics;
    let mut controller = match method {
        Method::Hybrid { m, h } | Method::HybridLimited { m, h } => Controller::Planner {
            sim: ShelfSim {
                physics,
                reward: settings.env.reward,
                priors: env.priors().clone(),
            },
            mode: if matches!(method, Method::Hybrid { .. }) {
                HybridMode::AllRoots
            } else {
                HybridMode::MostLikely
            },
            config: PlannerConfig {
                m,
                h,
                gamma: settings.env.reward.gamma,
                ..settings.planner
            },
        },
        Method::Greedy => Controller::Greedy,
        Method::Stochastic | Method::StochasticGen => {
            Controller::Stochastic(ChaCha8Rng::seed_from_u64(derive_seed(seed, &[POLICY_STREAM])))
        }
        Method::Hierarchical => Controller::Hierarchical(Box::new(HierarchicalController::new(
            settings.hierarchical.to_config(),
            physics,
            env.priors().clone(),
            derive_seed(seed, &[CONTROLLER_STREAM]),
        ))),
    };

    let mut steps = Vec::new();
    let mut planning = 0.0;
    let mut error = None;
    let mut timed_out = false;
    while !env.terminal().is_terminal() {
        if started.elapsed().as_secs_f64() > settings.time_limit {
            timed_out = true;
            break;
        }
        let t = env.steps();
        let clock = Instant::now();
        let planned: Result<_, PlannerError> = match &mut controller {
            Controller::Planner { sim, mode, config } => hybrid_plan(
                sim,
                env.history(),
                config,
                heuristic.as_ref(),
                derive_seed(seed, &[PLAN_STREAM, t as u64]),
                *mode,
            )
            .map(|o| o.action),
            Controller::Greedy => greedy_action(env.history(), heuristic.as_ref(), &physics).map_err(Into::into),
            Controller::Stochastic(rng) => {
                stochastic_action(env.history(), heuristic.as_ref(), &physics, rng).map_err(Into::into)
            }
            Controller::Hierarchical(c) => Ok(c.next_action(env.history())),
        };
        let plan_seconds = clock.elapsed().as_secs_f64();
        planning += plan_seconds;
        let action = match planned {
            Ok(a) => a,
            Err(e) => {
                log::error!("episode {seed}: {e}");
                error = Some(e.to_string());
                break;
            }
        };
        let out = env.step(&action).expect("episode is active");
        let pose = out.observation.gripper_pose();
        steps.push(StepRecord {
            t: t + 1,
            action: action.clamped(&physics.limits).to_array(),
            reward: out.reward,
            terminal: out.terminal.is_terminal(),
            visible_ids: out.observation.visible_ids(),
            gripper_pose: [pose.x, pose.y, pose.theta],
            plan_seconds,
        });
    }
    let wall_clock = started.elapsed().as_secs_f64();
    let outcome = if error.is_some() {
        Outcome::InfrastructureFailure
    } else if timed_out || wall_clock > settings.time_limit {
        Outcome::TimeLimit
    } else {
        match env.terminal() {
            Terminal::Retrieved if steps.len() <= settings.env.step_limit => Outcome::Success,
            Terminal::Dropped => Outcome::Dropped,
            _ => Outcome::StepLimit,
        }
    };
    Ok(EpisodeTrace {
        header: TraceHeader {
            version: TRACE_VERSION,
            method,
            heuristic: heuristics.spec.clone(),
            seed,
            settings: *settings,
            scenario: scenario.clone(),
            cell: None,
        },
        steps,
        outcome,
        planning_seconds: planning,
        wall_clock,
        error,
    })
}

/// Re-simulates a trace up to `step` executed actions and returns the
/// observation at that point.
pub fn replay_observation(trace: &EpisodeTrace, step: usize) -> Result<Arc<Observation>, HarnessError> {
    if step > trace.steps.len() {
        return Err(HarnessError::Trace(format!("step {step} beyond the {} recorded steps", trace.steps.len())));
    }
    let h = &trace.header;
    let mut env = Environment::new(&h.scenario, h.settings.env, derive_seed(h.seed, &[ENV_STREAM]))?;
    for record in &trace.steps[..step] {
        let out = env
            .step(&crate::physics::Action::from_array(record.action))
            .map_err(|e| HarnessError::Trace(e.to_string()))?;
        let p = out.observation.gripper_pose();
        let drift = (p.x - record.gripper_pose[0]).abs() + (p.y - record.gripper_pose[1]).abs();
        if drift > 1e-9 {
            return Err(HarnessError::Trace(format!("replay diverges at step {}", record.t)));
        }
    }
    Ok(env.observation().clone())
}

/// Inclusive range of obstacle counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct ClutterBin {
    pub min: usize,
    pub max: usize,
}

impl From<[usize; 2]> for ClutterBin {
    fn from(v: [usize; 2]) -> Self {
        Self { min: v[0], max: v[1] }
    }
}

impl From<ClutterBin> for [usize; 2] {
    fn from(b: ClutterBin) -> Self {
        [b.min, b.max]
    }
}

impl fmt::Display for ClutterBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub master_seed: u64,
    pub episodes: usize,
    pub methods: Vec<Method>,
    pub clutter_bins: Vec<ClutterBin>,
    pub noise_levels: Vec<f64>,
    pub heuristic: HeuristicSpec,
    pub target_region: TargetRegion,
    pub step_limit: usize,
    pub time_limit_s: f64,
    pub planner: PlannerConfig,
    pub hierarchical: HierarchicalSettings,
    /// Run episodes on the rayon pool.
    pub parallel: bool,
    pub save_traces: bool,
    pub plots: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            episodes: 10,
            methods: vec![Method::Hybrid { m: 4, h: 4 }],
            clutter_bins: vec![
                ClutterBin { min: 0, max: 2 },
                ClutterBin { min: 3, max: 5 },
                ClutterBin { min: 6, max: 8 },
                ClutterBin { min: 9, max: 10 },
            ],
            noise_levels: vec![0.0],
            heuristic: HeuristicSpec::Scripted,
            target_region: TargetRegion::Anywhere,
            step_limit: 50,
            time_limit_s: 120.0,
            planner: PlannerConfig::default(),
            hierarchical: HierarchicalSettings::default(),
            parallel: true,
            save_traces: true,
            plots: false,
        }
    }
}

/// Configuration problem located in the source text (1-based line).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl SuiteConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: SuiteConfig = serde_json::from_str(text).map_err(|e| ConfigError {
            line: e.line().max(1),
            message: e.to_string().split(" at line ").next().unwrap_or_default().to_string(),
        })?;
        config.validate(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(Self::parse(&std::fs::read_to_string(path)?)?)
    }

    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let fail = |key: &str, message: String| ConfigError {
            line: key_line(text, key),
            message,
        };
        if self.episodes == 0 {
            return Err(fail("episodes", "`episodes` must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(fail("methods", "`methods` must not be empty".into()));
        }
        for m in &self.methods {
            if let Method::Hybrid { m, h } | Method::HybridLimited { m, h } = m {
                if *m == 0 || *h == 0 {
                    return Err(fail("methods", "hybrid methods need m >= 1 and h >= 1".into()));
                }
            }
        }
        if self.clutter_bins.is_empty() {
            return Err(fail("clutter_bins", "`clutter_bins` must not be empty".into()));
        }
        for b in &self.clutter_bins {
            if b.min > b.max || b.max > 20 {
                return Err(fail("clutter_bins", format!("bad clutter bin [{}, {}]", b.min, b.max)));
            }
        }
        if self.noise_levels.is_empty() {
            return Err(fail("noise_levels", "`noise_levels` must not be empty".into()));
        }
        if let Some(s) = self.noise_levels.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(fail("noise_levels", format!("noise level {s} must be finite and non-negative")));
        }
        if self.step_limit == 0 {
            return Err(fail("step_limit", "`step_limit` must be at least 1".into()));
        }
        if !(self.time_limit_s > 0.0) {
            return Err(fail("time_limit_s", "`time_limit_s` must be positive".into()));
        }
        if let Err(e) = self.planner.validate() {
            return Err(fail("planner", e.to_string()));
        }
        Ok(())
    }

    pub fn settings(&self, noise: f64) -> EpisodeSettings {
        let mut s = EpisodeSettings {
            planner: self.planner,
            hierarchical: self.hierarchical,
            time_limit: self.time_limit_s,
            ..EpisodeSettings::default()
        };
        s.env.step_limit = self.step_limit;
        s.env.noise = NoiseModel::with_sigma(noise);
        s
    }

    /// Scenario shared by every method and noise level for this bin and
    /// episode index.
    pub fn scenario(&self, bin_index: usize, episode: usize) -> Result<Scenario, HarnessError> {
        let bin = self.clutter_bins[bin_index];
        let mut param = TaskParameterization::obstacles(bin.min, bin.max);
        param.target_region = self.target_region;
        let seed = derive_seed(self.master_seed, &[SCENARIO_STREAM, bin_index as u64, episode as u64]);
        Ok(sample_scenario(&param, seed)?)
    }

    pub fn episode_seed(&self, bin_index: usize, noise_index: usize, episode: usize) -> u64 {
        derive_seed(
            self.master_seed,
            &[EPISODE_STREAM, bin_index as u64, noise_index as u64, episode as u64],
        )
    }
}

/// Line of the first occurrence of `"key"` in the text, or 1.
fn key_line(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub method: String,
    pub clutter_bin: String,
    pub noise: f64,
    /// Episodes run, including infrastructure failures.
    pub episodes: usize,
    pub infrastructure_failures: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub avg_actions_per_task: f64,
    pub avg_time_per_task: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub note: String,
    pub cells: Vec<CellMetrics>,
}

impl MetricsReport {
    /// Groups traces by their suite cell, in suite order. Traces without a
    /// cell reference form one cell per method.
    pub fn from_traces(traces: &[EpisodeTrace]) -> Self {
        let mut keyed: Vec<(&EpisodeTrace, (usize, usize, usize, usize))> = traces
            .iter()
            .map(|t| {
                let key = t
                    .header
                    .cell
                    .as_ref()
                    .map_or((0, 0, 0, 0), |c| (c.method_index, c.bin_index, c.noise_index, c.episode));
                (t, key)
            })
            .collect();
        keyed.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.header.method.cmp(&b.0.header.method)));
        let mut cells: Vec<(String, String, f64, Vec<&EpisodeTrace>)> = Vec::new();
        for (t, _) in keyed {
            let method = t.header.method.to_string();
            let (bin, noise) = t
                .header
                .cell
                .as_ref()
                .map_or((String::from("-"), t.header.settings.env.noise.sigma), |c| (c.clutter_bin.clone(), c.noise));
            match cells.iter_mut().find(|c| c.0 == method && c.1 == bin && c.2 == noise) {
                Some(c) => c.3.push(t),
                None => cells.push((method, bin, noise, vec![t])),
            }
        }
        let cells = cells
            .into_iter()
            .map(|(method, clutter_bin, noise, ts)| {
                let counted: Vec<_> = ts.iter().filter(|t| t.outcome != Outcome::InfrastructureFailure).collect();
                let n = counted.len();
                let mean = |f: &dyn Fn(&EpisodeTrace) -> f64| {
                    if n == 0 {
                        0.0
                    } else {
                        counted.iter().map(|t| f(t)).sum::<f64>() / n as f64
                    }
                };
                let successes = counted.iter().filter(|t| t.success()).count();
                CellMetrics {
                    method,
                    clutter_bin,
                    noise,
                    episodes: ts.len(),
                    infrastructure_failures: ts.len() - n,
                    successes,
                    success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
                    avg_actions_per_task: mean(&|t| t.actions() as f64),
                    avg_time_per_task: mean(&|t| t.planning_seconds),
                }
            })
            .collect();
        Self {
            note: TIMING_NOTE.to_string(),
            cells,
        }
    }

    /// Deterministic metrics; timing lives in [`MetricsReport::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,clutter_bin,noise,episodes,infrastructure_failures,successes,success_rate,avg_actions_per_task\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6}\n",
                c.method,
                c.clutter_bin,
                c.noise,
                c.episodes,
                c.infrastructure_failures,
                c.successes,
                c.success_rate,
                c.avg_actions_per_task
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = format!("# {TIMING_NOTE}\nmethod,clutter_bin,noise,avg_time_per_task\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{:.6}\n", c.method, c.clutter_bin, c.noise, c.avg_time_per_task));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Writes `metrics.csv`, `timing.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        std::fs::write(dir.join("timing.csv"), self.timing_csv())?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub report: MetricsReport,
    pub traces: Vec<EpisodeTrace>,
}

struct Job {
    method_index: usize,
    bin_index: usize,
    noise_index: usize,
    episode: usize,
}

/// Runs every method × clutter bin × noise level × episode of the suite.
pub fn evaluate_suite(config: &SuiteConfig, heuristics: &HeuristicBundle) -> Result<SuiteResult, HarnessError> {
    let mut jobs = Vec::new();
    for method_index in 0..config.methods.len() {
        for bin_index in 0..config.clutter_bins.len() {
            for noise_index in 0..config.noise_levels.len() {
                for episode in 0..config.episodes {
                    jobs.push(Job {
                        method_index,
                        bin_index,
                        noise_index,
                        episode,
                    });
                }
            }
        }
    }
    let run = |job: &Job| -> Result<EpisodeTrace, HarnessError> {
        let method = config.methods[job.method_index];
        let noise = config.noise_levels[job.noise_index];
        let scenario = config.scenario(job.bin_index, job.episode)?;
        let mut settings = config.settings(noise);
        // episodes already occupy the pool
        settings.planner.parallel = !config.parallel;
        let seed = config.episode_seed(job.bin_index, job.noise_index, job.episode);
        let mut trace = run_episode(method, &scenario, &settings, heuristics, seed)?;
        trace.header.cell = Some(CellRef {
            method_index: job.method_index,
            bin_index: job.bin_index,
            noise_index: job.noise_index,
            episode: job.episode,
            clutter_bin: config.clutter_bins[job.bin_index].to_string(),
            noise,
        });
        log::info!(
            "{} bin {} noise {} episode {}: {}",
            method,
            config.clutter_bins[job.bin_index],
            noise,
            job.episode,
            trace.outcome.as_str()
        );
        Ok(trace)
    };
    let traces = run_jobs(&jobs, config.parallel, &run).into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(SuiteResult {
        report: MetricsReport::from_traces(&traces),
        traces,
    })
}

#[cfg(feature = "parallel")]
fn run_jobs<T: Send>(jobs: &[Job], parallel: bool, f: &(dyn Fn(&Job) -> T + Sync)) -> Vec<T> {
    use rayon::prelude::*;
    if parallel {
        jobs.par_iter().map(f).collect()
    } else {
        jobs.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<T: Send>(jobs: &[Job], _parallel: bool, f: &(dyn Fn(&Job) -> T + Sync)) -> Vec<T> {
    jobs.iter().map(f).collect()
}

/// File name of a suite trace inside the traces directory.
pub fn trace_file_name(trace: &EpisodeTrace) -> String {
    match &trace.header.cell {
        Some(c) => format!("m{}_b{}_n{}_e{:04}.jsonl", c.method_index, c.bin_index, c.noise_index, c.episode),
        None => format!("episode_{}.jsonl", trace.header.seed),
    }
}

/// Writes the report, traces and optional plots under `dir`.
pub fn write_suite(result: &SuiteResult, config: &SuiteConfig, dir: &Path) -> Result<(), HarnessError> {
    result.report.write(dir)?;
    std::fs::write(
        dir.join("suite.json"),
        serde_json::to_string_pretty(config).expect("config serializes") + "\n",
    )?;
    if config.save_traces {
        let traces = dir.join("traces");
        std::fs::create_dir_all(&traces)?;
        for t in &result.traces {
            t.save(&traces.join(trace_file_name(t)))?;
        }
    }
    if config.plots {
        crate::plot::write_plots(&result.report, &dir.join("plots"))?;
    }
    Ok(())
}

/// Loads every `*.jsonl` trace in a directory, sorted by file name.
pub fn load_traces(dir: &Path) -> Result<Vec<EpisodeTrace>, HarnessError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| EpisodeTrace::load(p)).collect()
}
