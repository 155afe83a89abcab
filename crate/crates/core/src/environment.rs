//! Episode-level wrapper around the physics: scenario files and sampling,
//! parameter noise, rewards and termination.

use crate::geometry::{penetration, transform_polygon, CameraModel, ConvexPolygon, GeometryError, Pose2, Vec2};
use crate::observation::{render_observation, Observation, ObservationHistory, SemanticPalette, TaskPriors};
use crate::physics::{
    detect_terminal, graspable_near_walls, physics_step, Action, GripperGeometry, GripperState, ObjectState, ObjectStatus, PhysicalTerminal, PhysicsConfig, Shelf,
    ShelfState, StepEvents, GRASP_MARGIN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Objects wider than this in every direction cannot be grasped.
pub const MAX_TARGET_WIDTH: f64 = 0.07;
pub const TARGET_TYPE: u32 = 0;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("could not place all objects after {0} attempts")]
    SamplingExhausted(usize),
    #[error("object {index}: {source}")]
    Shape { index: usize, source: GeometryError },
    #[error("target type {0} must appear exactly once, found {1}")]
    TargetCount(u32, usize),
    #[error("objects {0} and {1} overlap")]
    Overlap(usize, usize),
    #[error("object {0} is not inside the shelf")]
    OutsideShelf(usize),
    #[error("object type {0} is used with two different shapes")]
    InconsistentType(u32),
    #[error("invalid shelf dimensions")]
    Shelf,
    #[error("invalid task parameterization: {0}")]
    Parameterization(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShelfSpec {
    pub width: f64,
    pub depth: f64,
}

impl Default for ShelfSpec {
    fn default() -> Self {
        let s = Shelf::default();
        Self {
            width: s.width,
            depth: s.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioObject {
    #[serde(rename = "type")]
    pub type_id: u32,
    pub vertices: Vec<[f64; 2]>,
    pub pose: [f64; 3],
}

/// Scenario file contents. Object ids are their indices in `objects`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub shelf: ShelfSpec,
    pub objects: Vec<ScenarioObject>,
    pub target_type: u32,
    pub seed: u64,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let s: Scenario = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn shelf(&self) -> Shelf {
        Shelf {
            width: self.shelf.width,
            depth: self.shelf.depth,
            ..Shelf::default()
        }
    }

    /// Body-frame shapes and poses. Vertex lists that are not centered on
    /// their centroid are recentered and the pose shifted accordingly.
    pub fn object_shapes(&self) -> Result<Vec<(ConvexPolygon, Pose2)>, ScenarioError> {
        self.objects
            .iter()
            .enumerate()
            .map(|(index, o)| {
                let pts: Vec<Vec2> = o.vertices.iter().map(|v| Vec2::new(v[0], v[1])).collect();
                if pts.iter().any(|p| !p.is_finite()) || o.pose.iter().any(|v| !v.is_finite()) {
                    return Err(ScenarioError::Shape {
                        index,
                        source: GeometryError::NonFinite,
                    });
                }
                let (shape, offset) =
                    ConvexPolygon::from_points(&pts).map_err(|source| ScenarioError::Shape { index, source })?;
                let raw = Pose2::new(o.pose[0], o.pose[1], o.pose[2]);
                let p = raw.transform_point(offset);
                Ok((shape, Pose2::from_position(p, raw.theta)))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.shelf.width > 0.0 && self.shelf.depth > 0.0) {
            return Err(ScenarioError::Shelf);
        }
        let n_target = self.objects.iter().filter(|o| o.type_id == self.target_type).count();
        if n_target != 1 {
            return Err(ScenarioError::TargetCount(self.target_type, n_target));
        }
        let shapes = self.object_shapes()?;
        let shelf = self.shelf();
        let ws = shelf.workspace();
        let polys: Vec<_> = shapes.iter().map(|(s, p)| transform_polygon(s, p)).collect();
        let mut types: BTreeMap<u32, &ConvexPolygon> = BTreeMap::new();
        for (i, o) in self.objects.iter().enumerate() {
            if let Some(prev) = types.insert(o.type_id, &shapes[i].0) {
                if !same_shape(prev, &shapes[i].0) {
                    return Err(ScenarioError::InconsistentType(o.type_id));
                }
            }
            if !polys[i].vertices.iter().all(|v| ws.contains(*v)) {
                return Err(ScenarioError::OutsideShelf(i));
            }
            for j in 0..i {
                if penetration(&polys[j], &polys[i]).is_some_and(|m| m.depth > 1e-9) {
                    return Err(ScenarioError::Overlap(j, i));
                }
            }
        }
        Ok(())
    }

    /// Task priors: shelf, target type and every object type's nominal shape.
    pub fn priors(&self, camera: CameraModel, palette: SemanticPalette, physics: &PhysicsConfig) -> Result<TaskPriors, ScenarioError> {
        let shapes = self.object_shapes()?;
        Ok(TaskPriors {
            shelf: self.shelf(),
            target_type: self.target_type,
            shapes: self
                .objects
                .iter()
                .zip(&shapes)
                .map(|(o, (s, _))| (o.type_id, s.clone()))
                .collect(),
            gripper: physics.gripper,
            camera,
            palette,
        })
    }

    /// Initial simulator state with nominal physical parameters.
    pub fn initial_state(&self, noise: &NoiseModel) -> Result<ShelfState, ScenarioError> {
        let shapes = self.object_shapes()?;
        let objects: Vec<ObjectState> = self
            .objects
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, (o, (shape, pose)))| ObjectState {
                id: i as u32,
                type_id: o.type_id,
                nominal_shape: shape.clone(),
                shape,
                pose,
                density: noise.mean_density,
                friction: noise.mean_friction,
                status: ObjectStatus::Free,
            })
            .collect();
        let target_id = objects
            .iter()
            .find(|o| o.type_id == self.target_type)
            .map(|o| o.id)
            .ok_or(ScenarioError::TargetCount(self.target_type, 0))?;
        Ok(ShelfState {
            shelf: self.shelf(),
            gripper: initial_gripper(),
            objects,
            target_id,
        })
    }
}

fn same_shape(a: &ConvexPolygon, b: &ConvexPolygon) -> bool {
    a.vertices().len() == b.vertices().len()
        && a.vertices().iter().zip(b.vertices()).all(|(p, q)| (*p - *q).norm() < 1e-9)
}

/// Gripper start: centered in front of the shelf, open, facing in.
pub fn initial_gripper() -> GripperState {
    GripperState {
        pose: Pose2::new(0.0, -0.08, 0.0),
        aperture: 1.0,
        grasp: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRegion {
    Anywhere,
    BackHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParameterization {
    /// Inclusive range of the total number of objects, target included.
    pub object_count: (usize, usize),
    pub target_region: TargetRegion,
}

impl TaskParameterization {
    pub fn level(level: Level) -> Self {
        match level {
            Level::L1 => Self {
                object_count: (1, 4),
                target_region: TargetRegion::Anywhere,
            },
            Level::L2 => Self {
                object_count: (5, 10),
                target_region: TargetRegion::Anywhere,
            },
            Level::L3 => Self {
                object_count: (7, 10),
                target_region: TargetRegion::BackHalf,
            },
        }
    }

    /// Target anywhere plus an inclusive range of obstacles.
    pub fn obstacles(min: usize, max: usize) -> Self {
        Self {
            object_count: (min + 1, max + 1),
            target_region: TargetRegion::Anywhere,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let (lo, hi) = self.object_count;
        if lo == 0 || lo > hi || hi > 30 {
            return Err(ScenarioError::Parameterization(format!("object count range {lo}..={hi}")));
        }
        Ok(())
    }
}

/// Random convex polygon with 4–8 vertices and circumradius in [0.02, 0.05].
pub fn random_shape(rng: &mut impl Rng) -> ConvexPolygon {
    loop {
        let n = rng.random_range(4..=8usize);
        let r = rng.random_range(0.02..=0.05);
        let step = std::f64::consts::TAU / n as f64;
        let phase = rng.random_range(0.0..step);
        let pts: Vec<Vec2> = (0..n)
            .map(|i| {
                let a = phase + step * (i as f64 + rng.random_range(-0.3..0.3));
                let rad = r * rng.random_range(0.75..=1.0);
                Vec2::from_angle(a) * rad
            })
            .collect();
        if let Ok((shape, _)) = ConvexPolygon::from_points(&pts) {
            if shape.vertices().len() >= 4 && shape.circumradius() <= 0.05 + 1e-12 {
                return shape;
            }
        }
    }
}

pub fn random_target_shape(rng: &mut impl Rng) -> ConvexPolygon {
    loop {
        let s = random_shape(rng);
        if s.min_width() <= MAX_TARGET_WIDTH {
            return s;
        }
    }
}

/// Random scenario: one target (type 0) and clutter objects of distinct
/// types, rejection-sampled until non-penetrating.
pub fn sample_scenario(param: &TaskParameterization, seed: u64) -> Result<Scenario, ScenarioError> {
    param.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shelf = Shelf::default();
    let (lo, hi) = param.object_count;
    let count = rng.random_range(lo..=hi);
    let mut shapes = vec![random_target_shape(&mut rng)];
    shapes.extend((1..count).map(|_| random_shape(&mut rng)));

    let ws = shelf.workspace();
    let margin = 0.002;
    let mut placed: Vec<(ConvexPolygon, Pose2)> = Vec::with_capacity(count);
    let mut attempts = 0;
    for (i, shape) in shapes.iter().enumerate() {
        let r = shape.circumradius();
        let y_min = if i == 0 && param.target_region == TargetRegion::BackHalf {
            shelf.depth / 2.0
        } else {
            0.0
        };
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(ScenarioError::SamplingExhausted(MAX_PLACEMENT_ATTEMPTS));
            }
            let pose = Pose2::new(
                rng.random_range(ws.min.x..ws.max.x),
                rng.random_range(y_min..ws.max.y),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            if pose.y <= y_min || r > shelf.width / 2.0 {
                continue;
            }
            let poly = transform_polygon(shape, &pose);
            let inside = poly.vertices.iter().all(|v| {
                v.x >= ws.min.x + margin && v.x <= ws.max.x - margin && v.y >= ws.min.y + margin && v.y <= ws.max.y - margin
            });
            if !inside {
                continue;
            }
            if i == 0 && !graspable_near_walls(&shelf, shape, &pose, &GripperGeometry::default(), GRASP_MARGIN) {
                continue;
            }
            let free = placed
                .iter()
                .all(|(s, p)| penetration(&transform_polygon(s, p), &poly).is_none());
            if free {
                placed.push((shape.clone(), pose));
                break;
            }
        }
    }
    Ok(Scenario {
        shelf: ShelfSpec {
            width: shelf.width,
            depth: shelf.depth,
        },
        objects: placed
            .iter()
            .enumerate()
            .map(|(i, (s, p))| ScenarioObject {
                type_id: i as u32,
                vertices: s.vertices().iter().map(|v| [v.x, v.y]).collect(),
                pose: [p.x, p.y, p.theta],
            })
            .collect(),
        target_type: TARGET_TYPE,
        seed,
    })
}

/// Gaussian perturbation of physical parameters, applied before each
/// executed action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub mean_density: f64,
    pub mean_friction: f64,
}

pub const MIN_NOISED_DENSITY: f64 = 0.051;

impl Default for NoiseModel {
    fn default() -> Self {
        Self::with_sigma(0.0)
    }
}

impl NoiseModel {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            mean_density: 1.0,
            mean_friction: 0.3,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=0.25).contains(&self.sigma) && self.mean_density > 0.0 && self.mean_friction >= 0.0
    }

    pub fn sample_friction(&self, rng: &mut impl Rng) -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        (self.mean_friction + self.sigma * n).max(0.0)
    }

    pub fn sample_density(&self, rng: &mut impl Rng) -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        (self.mean_density + self.sigma * n).max(MIN_NOISED_DENSITY)
    }

    /// Vertex noise is scaled by the shape's mean vertex radius.
    pub fn sample_shape(&self, nominal: &ConvexPolygon, rng: &mut impl Rng) -> ConvexPolygon {
        let verts = nominal.vertices();
        let scale = verts.iter().map(|v| v.norm()).sum::<f64>() / verts.len() as f64;
        let pts: Vec<Vec2> = verts
            .iter()
            .map(|v| {
                let nx: f64 = StandardNormal.sample(rng);
                let ny: f64 = StandardNormal.sample(rng);
                *v + Vec2::new(nx, ny) * (self.sigma * scale)
            })
            .collect();
        match ConvexPolygon::from_points(&pts) {
            Ok((shape, _)) => shape,
            Err(_) => nominal.clone(),
        }
    }
}

/// Resamples every object's density, friction and shape around the nominal
/// values. `sigma == 0` returns the state untouched without drawing.
pub fn apply_noise(state: &ShelfState, model: &NoiseModel, rng: &mut impl Rng) -> ShelfState {
    let mut s = state.clone();
    if model.sigma == 0.0 {
        return s;
    }
    for o in s.objects.iter_mut() {
        o.density = model.sample_density(rng);
        o.friction = model.sample_friction(rng);
        o.shape = model.sample_shape(&o.nominal_shape, rng);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub step_reward: f64,
    pub drop_penalty: f64,
    pub gamma: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            step_reward: -1.0,
            drop_penalty: -50.0,
            gamma: 0.995,
        }
    }
}

impl RewardSpec {
    pub fn reward(&self, dropped: bool) -> f64 {
        if dropped {
            self.step_reward + self.drop_penalty
        } else {
            self.step_reward
        }
    }

    /// Σ γ^(t−1) r_t.
    pub fn discounted_return(&self, rewards: &[f64]) -> f64 {
        rewards
            .iter()
            .enumerate()
            .map(|(t, r)| self.gamma.powi(t as i32) * r)
            .sum()
    }

    /// Closed form of the discounted return of a T-step episode with constant
    /// step reward and an optional drop on the last step.
    pub fn closed_form_return(&self, steps: usize, dropped: bool) -> f64 {
        let g = self.gamma;
        let geometric = (1.0 - g.powi(steps as i32)) / (1.0 - g);
        let drop = if dropped && steps > 0 {
            self.drop_penalty * g.powi(steps as i32 - 1)
        } else {
            0.0
        };
        self.step_reward * geometric + drop
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    None,
    Dropped,
    Retrieved,
    StepLimit,
}

impl Terminal {
    pub fn is_terminal(self) -> bool {
        self != Terminal::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::None => "none",
            Terminal::Dropped => "dropped",
            Terminal::Retrieved => "retrieved",
            Terminal::StepLimit => "step_limit",
        }
    }
}

impl From<PhysicalTerminal> for Terminal {
    fn from(t: PhysicalTerminal) -> Self {
        match t {
            PhysicalTerminal::None => Terminal::None,
            PhysicalTerminal::Dropped => Terminal::Dropped,
            PhysicalTerminal::Retrieved => Terminal::Retrieved,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub physics: PhysicsConfig,
    pub reward: RewardSpec,
    pub noise: NoiseModel,
    pub step_limit: usize,
    pub camera: CameraModel,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            physics: PhysicsConfig::default(),
            reward: RewardSpec::default(),
            noise: NoiseModel::default(),
            step_limit: 50,
            camera: CameraModel::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished ({0:?})")]
    EpisodeFinished(Terminal),
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Arc<Observation>,
    pub reward: f64,
    pub terminal: Terminal,
    pub events: StepEvents,
}

/// Execution environment for one episode.
#[derive(Debug)]
pub struct Environment {
    state: ShelfState,
    priors: Arc<TaskPriors>,
    config: EnvConfig,
    rng: ChaCha8Rng,
    steps: usize,
    terminal: Terminal,
    history: ObservationHistory,
}

impl Environment {
    /// `seed` drives the noise stream only.
    pub fn new(scenario: &Scenario, config: EnvConfig, seed: u64) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let priors = Arc::new(scenario.priors(config.camera, SemanticPalette::default(), &config.physics)?);
        let state = scenario.initial_state(&config.noise)?;
        Ok(Self::from_state(state, priors, config, seed))
    }

    pub fn from_state(state: ShelfState, priors: Arc<TaskPriors>, config: EnvConfig, seed: u64) -> Self {
        let obs = Arc::new(render_observation(&state, &priors));
        let mut history = ObservationHistory::new();
        history.push(obs);
        Self {
            state,
            priors,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
            terminal: Terminal::None,
            history,
        }
    }

    pub fn state(&self) -> &ShelfState {
        &self.state
    }

    pub fn priors(&self) -> &Arc<TaskPriors> {
        &self.priors
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn history(&self) -> &ObservationHistory {
        &self.history
    }

    pub fn observation(&self) -> &Arc<Observation> {
        self.history.last().expect("history starts with the initial observation")
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn terminal(&self) -> Terminal {
        self.terminal
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        if self.terminal.is_terminal() {
            return Err(EnvError::EpisodeFinished(self.terminal));
        }
        let noised = apply_noise(&self.state, &self.config.noise, &mut self.rng);
        let (next, events) = physics_step(&noised, action, &self.config.physics);
        self.state = next;
        self.steps += 1;
        let mut terminal = Terminal::from(detect_terminal(&self.state));
        if !terminal.is_terminal() && self.steps >= self.config.step_limit {
            terminal = Terminal::StepLimit;
        }
        let reward = self.config.reward.reward(terminal == Terminal::Dropped);
        self.terminal = terminal;
        let observation = Arc::new(render_observation(&self.state, &self.priors));
        self.history.push(observation.clone());
        Ok(StepOutcome {
            observation,
            reward,
            terminal,
            events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_target_scenario(pose: [f64; 3]) -> Scenario {
        let s = ConvexPolygon::rectangle(0.04, 0.04);
        Scenario {
            shelf: ShelfSpec::default(),
            objects: vec![ScenarioObject {
                type_id: 0,
                vertices: s.vertices().iter().map(|v| [v.x, v.y]).collect(),
                pose,
            }],
            target_type: 0,
            seed: 0,
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = TaskParameterization::level(Level::L1);
        let a = sample_scenario(&p, 7).unwrap();
        let b = sample_scenario(&p, 7).unwrap();
        assert_eq!(a, b);
        assert!((1..=4).contains(&a.objects.len()));
        a.validate().unwrap();
    }

    #[test]
    fn l3_targets_are_in_back_half() {
        let p = TaskParameterization::level(Level::L3);
        for seed in 0..30 {
            let s = sample_scenario(&p, seed).unwrap();
            assert!(s.objects.len() >= 7);
            let (_, pose) = &s.object_shapes().unwrap()[0];
            assert!(pose.y > s.shelf.depth / 2.0);
            s.validate().unwrap();
        }
    }

    #[test]
    fn sampled_shapes_respect_size_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s = random_shape(&mut rng);
            assert!((4..=8).contains(&s.vertices().len()));
            assert!(s.circumradius() <= 0.05 + 1e-12);
            assert!(s.circumradius() >= 0.015);
        }
        for _ in 0..100 {
            assert!(random_target_shape(&mut rng).min_width() <= MAX_TARGET_WIDTH);
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = sample_scenario(&TaskParameterization::level(Level::L2), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        s.save(&path).unwrap();
        assert_eq!(Scenario::load(&path).unwrap(), s);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(v["objects"][0]["type"].is_u64());
        assert_eq!(v["objects"][0]["pose"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn validation_rejects_bad_scenarios() {
        let mut s = single_target_scenario([0.0, 0.1, 0.0]);
        s.target_type = 3;
        assert!(matches!(s.validate(), Err(ScenarioError::TargetCount(3, 0))));
        let mut s = single_target_scenario([0.0, 0.1, 0.0]);
        s.objects.push(ScenarioObject {
            type_id: 1,
            ..s.objects[0].clone()
        });
        assert!(matches!(s.validate(), Err(ScenarioError::Overlap(0, 1))));
        let s = single_target_scenario([0.0, 0.005, 0.0]);
        assert!(matches!(s.validate(), Err(ScenarioError::OutsideShelf(0))));
    }

    #[test]
    fn off_center_vertices_are_recentered() {
        let mut s = single_target_scenario([0.0, 0.1, 0.0]);
        for v in s.objects[0].vertices.iter_mut() {
            v[0] += 0.01;
        }
        let shapes = s.object_shapes().unwrap();
        assert!((shapes[0].1.x - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_is_identity_and_consumes_nothing() {
        let s = sample_scenario(&TaskParameterization::level(Level::L2), 5).unwrap();
        let state = s.initial_state(&NoiseModel::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = apply_noise(&state, &NoiseModel::with_sigma(0.0), &mut rng);
        assert_eq!(serde_json::to_vec(&out).unwrap(), serde_json::to_vec(&state).unwrap());
        let mut fresh = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(rand::RngCore::next_u64(&mut rng), rand::RngCore::next_u64(&mut fresh));
    }

    #[test]
    fn noise_respects_clamps_and_convexity() {
        let s = sample_scenario(&TaskParameterization::level(Level::L2), 9).unwrap();
        let state = s.initial_state(&NoiseModel::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = NoiseModel::with_sigma(0.25);
        for _ in 0..50 {
            let out = apply_noise(&state, &model, &mut rng);
            for o in &out.objects {
                assert!(o.density > 0.05);
                assert!(o.friction >= 0.0);
                assert!(ConvexPolygon::new(o.shape.vertices().to_vec()).is_ok());
                assert_eq!(o.nominal_shape, state.object(o.id).unwrap().nominal_shape);
            }
        }
    }

    #[test]
    fn non_terminal_step_costs_one() {
        let s = single_target_scenario([0.0, 0.25, 0.0]);
        let mut env = Environment::new(&s, EnvConfig::default(), 0).unwrap();
        let out = env.step(&Action::new(0.0, 0.01, 0.0, 0.0)).unwrap();
        assert_eq!(out.reward, -1.0);
        assert_eq!(out.terminal, Terminal::None);
        assert_eq!(env.history().len(), 2);
    }

    #[test]
    fn step_limit_ends_episode() {
        let s = single_target_scenario([0.0, 0.25, 0.0]);
        let mut env = Environment::new(&s, EnvConfig::default(), 0).unwrap();
        for t in 1..=50 {
            let out = env.step(&Action::new(0.0, 0.0, 0.0, 0.0)).unwrap();
            assert_eq!(out.terminal == Terminal::StepLimit, t == 50);
        }
        assert_eq!(
            env.step(&Action::NONE).unwrap_err(),
            EnvError::EpisodeFinished(Terminal::StepLimit)
        );
    }

    #[test]
    fn dropping_costs_fifty_one() {
        let s = single_target_scenario([0.0, 0.025, 0.0]);
        let mut state = s.initial_state(&NoiseModel::default()).unwrap();
        // put the gripper behind the object and pull it over the edge with the palm
        state.gripper.pose = Pose2::new(0.0, 0.1, std::f64::consts::PI);
        let priors = Arc::new(s.priors(CameraModel::default(), SemanticPalette::default(), &PhysicsConfig::default()).unwrap());
        let mut env = Environment::from_state(state, priors, EnvConfig::default(), 0);
        let mut last = None;
        for _ in 0..5 {
            let out = env.step(&Action::new(0.0, 0.03, 0.0, 0.0)).unwrap();
            let done = out.terminal.is_terminal();
            last = Some(out);
            if done {
                break;
            }
        }
        let out = last.unwrap();
        assert_eq!(out.terminal, Terminal::Dropped);
        assert_eq!(out.reward, -51.0);
    }

    #[test]
    fn closed_form_matches_sum() {
        let r = RewardSpec::default();
        let mut rewards = vec![-1.0; 12];
        assert!((r.discounted_return(&rewards) - r.closed_form_return(12, false)).abs() < 1e-12);
        rewards[11] = -51.0;
        assert!((r.discounted_return(&rewards) - r.closed_form_return(12, true)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn episode_returns_match_closed_form(seed in 0u64..1000, actions in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..40)) {
            let s = sample_scenario(&TaskParameterization::level(Level::L1), seed).unwrap();
            let mut env = Environment::new(&s, EnvConfig::default(), seed).unwrap();
            let caps = env.config().physics.limits.caps();
            let mut rewards = Vec::new();
            let mut dropped = false;
            for (a, b, c) in actions {
                let out = env.step(&Action::new(a * caps[0], b * caps[1], c * caps[2], 0.0)).unwrap();
                rewards.push(out.reward);
                if out.terminal.is_terminal() {
                    dropped = out.terminal == Terminal::Dropped;
                    break;
                }
            }
            let spec = env.config().reward;
            prop_assert!((spec.discounted_return(&rewards) - spec.closed_form_return(rewards.len(), dropped)).abs() < 1e-9);
        }
    }
}
