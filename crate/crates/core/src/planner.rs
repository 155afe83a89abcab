//! Heat-map weighted receding-horizon planning: root hypotheses from the
//! target heat map, stochastic policy rollouts from each root, and selection
//! of the first action with the best likelihood-weighted return.

use crate::environment::RewardSpec;
use crate::geometry::{penetration, transform_polygon, Pose2, Region};
use crate::heuristic::{sample_action, HeatMap, Heuristic, HeuristicError, HEATMAP_SIZE};
use crate::observation::{render_observation, History, Observation, TaskPriors, VisibleObject};
use crate::physics::{
    detect_terminal, physics_step, Action, ActionLimits, ObjectId, ObjectState, ObjectStatus, PhysicalTerminal, PhysicsConfig,
    ShelfState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Id given to the hypothesized target when it has not been observed.
pub const HYPOTHESIS_TARGET_ID: ObjectId = u32::MAX;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("heat map maximum {0} is below 1e-6")]
    DegenerateHeatmap(f32),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error("invalid planner configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Rollouts per root state.
    pub m: usize,
    /// Horizon depth.
    pub h: usize,
    pub max_peaks: usize,
    /// Fraction of the heat-map maximum below which cells are ignored.
    pub peak_threshold: f32,
    pub gamma: f64,
    /// Run rollouts on the rayon pool when the feature is enabled. Results do
    /// not depend on it, so it is not persisted.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            m: 4,
            h: 4,
            max_peaks: 5,
            peak_threshold: 0.5,
            gamma: RewardSpec::default().gamma,
            parallel: true,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.m == 0 || self.h == 0 {
            return Err(PlannerError::Config("m and h must be at least 1".into()));
        }
        if self.max_peaks == 0 {
            return Err(PlannerError::Config("max_peaks must be at least 1".into()));
        }
        if !(self.peak_threshold > 0.0 && self.peak_threshold <= 1.0) {
            return Err(PlannerError::Config("peak_threshold must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(PlannerError::Config("gamma must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub value: f32,
    pub weight: f64,
}

/// One peak per 8-connected component of cells at or above
/// `threshold · max`, keeping the `max_peaks` highest.
pub fn extract_peaks(heatmap: &HeatMap, threshold: f32, max_peaks: usize) -> Result<Vec<Peak>, PlannerError> {
    let max = heatmap.max();
    if max < 1e-6 {
        return Err(PlannerError::DegenerateHeatmap(max));
    }
    let cut = threshold * max;
    let n = HEATMAP_SIZE;
    let mut label = vec![usize::MAX; n * n];
    let mut peaks: Vec<Peak> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n * n {
        if label[start] != usize::MAX || heatmap.values()[start] < cut {
            continue;
        }
        let id = peaks.len();
        label[start] = id;
        stack.push(start);
        let mut best = (heatmap.values()[start], start);
        while let Some(i) = stack.pop() {
            let v = heatmap.values()[i];
            if v > best.0 || (v == best.0 && i < best.1) {
                best = (v, i);
            }
            let (r, c) = ((i / n) as isize, (i % n) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                        continue;
                    }
                    let j = rr as usize * n + cc as usize;
                    if label[j] == usize::MAX && heatmap.values()[j] >= cut {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        peaks.push(Peak {
            row: best.1 / n,
            col: best.1 % n,
            value: best.0,
            weight: 0.0,
        });
    }
    peaks.sort_by(|a, b| b.value.total_cmp(&a.value).then((a.row, a.col).cmp(&(b.row, b.col))));
    peaks.truncate(max_peaks);
    let total: f64 = peaks.iter().map(|p| p.value as f64).sum();
    for p in peaks.iter_mut() {
        p.weight = p.value as f64 / total;
    }
    Ok(peaks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootSource {
    /// The target is in view; a single certain hypothesis.
    Visible,
    HeatmapPeak,
    /// The heat map was degenerate or every peak was infeasible.
    OccludedSample,
}

#[derive(Debug, Clone)]
pub struct RootHypothesis {
    pub state: ShelfState,
    pub weight: f64,
    pub peak_pixel: Option<(usize, usize)>,
    pub source: RootSource,
}

/// Simulator interface used by rollouts.
pub trait RolloutSim: Sync {
    type State: Clone + Send + Sync;
    type Obs: Send + Sync;

    fn observe(&self, state: &Self::State) -> Arc<Self::Obs>;
    fn step(&self, state: &Self::State, action: &Action) -> SimStep<Self::State, Self::Obs>;
    fn limits(&self) -> ActionLimits;
}

pub struct SimStep<S, O> {
    pub state: S,
    pub observation: Arc<O>,
    pub reward: f64,
    pub terminal: bool,
}

/// Noise-free shelf simulator rendering observations with the task priors.
#[derive(Debug, Clone)]
pub struct ShelfSim {
    pub physics: PhysicsConfig,
    pub reward: RewardSpec,
    pub priors: Arc<TaskPriors>,
}

impl RolloutSim for ShelfSim {
    type State = ShelfState;
    type Obs = Observation;

    fn observe(&self, state: &ShelfState) -> Arc<Observation> {
        Arc::new(render_observation(state, &self.priors))
    }

    fn step(&self, state: &ShelfState, action: &Action) -> SimStep<ShelfState, Observation> {
        let (next, _) = physics_step(state, action, &self.physics);
        let terminal = detect_terminal(&next);
        let observation = self.observe(&next);
        SimStep {
            state: next,
            observation,
            reward: self.reward.reward(terminal == PhysicalTerminal::Dropped),
            terminal: terminal != PhysicalTerminal::None,
        }
    }

    fn limits(&self) -> ActionLimits {
        self.physics.limits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub first_action: Action,
    pub rewards: Vec<f64>,
    /// V(ō_h), present only when the rollout did not terminate.
    pub bootstrap: Option<f64>,
    pub ret: f64,
    pub length: usize,
    pub terminated: bool,
}

impl RolloutResult {
    /// Σ γ^(j−1) r_j plus γ^h V when not terminated.
    pub fn recompute(&self, gamma: f64, h: usize) -> f64 {
        let mut r: f64 = self
            .rewards
            .iter()
            .enumerate()
            .map(|(j, r)| gamma.powi(j as i32) * r)
            .sum();
        if let Some(v) = self.bootstrap {
            r += gamma.powi(h as i32) * v;
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhpResult {
    pub action: Action,
    pub ret: f64,
    pub best: usize,
    pub rollouts: Vec<RolloutResult>,
}

/// Random stream for rollout `rollout` of root `root`.
pub fn rollout_rng(seed: u64, root: usize, rollout: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((root as u64) << 32) | rollout as u64);
    rng
}

#[allow(clippy::too_many_arguments)]
fn rollout<S: RolloutSim, H: Heuristic<S::Obs> + ?Sized>(
    sim: &S,
    root: &S::State,
    history: &History<S::Obs>,
    h: usize,
    gamma: f64,
    heuristic: &H,
    mut rng: ChaCha8Rng,
) -> Result<RolloutResult, HeuristicError> {
    let limits = sim.limits();
    let mut hist = history.clone();
    hist.push(sim.observe(root));
    let mut s = root.clone();
    let mut rewards = Vec::with_capacity(h);
    let mut first = None;
    let mut ret = 0.0;
    let mut terminated = false;
    for j in 0..h {
        let out = heuristic.evaluate(&hist)?;
        let a = sample_action(&out.policy, &limits, &mut rng);
        first.get_or_insert(a);
        let step = sim.step(&s, &a);
        ret += gamma.powi(j as i32) * step.reward;
        rewards.push(step.reward);
        hist.push(step.observation);
        s = step.state;
        if step.terminal {
            terminated = true;
            break;
        }
    }
    let bootstrap = if terminated {
        None
    } else {
        let v = heuristic.evaluate(&hist)?.value;
        ret += gamma.powi(h as i32) * v;
        Some(v)
    };
    Ok(RolloutResult {
        first_action: first.expect("h >= 1"),
        length: rewards.len(),
        rewards,
        bootstrap,
        ret,
        terminated,
    })
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn map_indexed<T: Send, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Receding-horizon query from one root: `m` policy rollouts of depth `h`,
/// returning the first action and return of the best one.
#[allow(clippy::too_many_arguments)]
pub fn rhp<S: RolloutSim, H: Heuristic<S::Obs> + ?Sized>(
    sim: &S,
    root: &S::State,
    history: &History<S::Obs>,
    m: usize,
    h: usize,
    gamma: f64,
    heuristic: &H,
    seed: u64,
    root_index: usize,
    parallel: bool,
) -> Result<RhpResult, HeuristicError> {
    assert!(m >= 1 && h >= 1, "m and h must be at least 1");
    let results = map_indexed(m, parallel, |i| {
        rollout(sim, root, history, h, gamma, heuristic, rollout_rng(seed, root_index, i))
    });
    let rollouts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rets: Vec<f64> = rollouts.iter().map(|r| r.ret).collect();
    let best = argmax_first(&rets).expect("m >= 1");
    Ok(RhpResult {
        action: rollouts[best].first_action,
        ret: rets[best],
        best,
        rollouts,
    })
}

#[derive(Debug, Clone)]
pub struct HybridResult {
    pub action: Action,
    /// Index of the root whose action was chosen.
    pub selected: usize,
    pub weights: Vec<f64>,
    pub per_root: Vec<RhpResult>,
}

impl HybridResult {
    pub fn weighted_returns(&self) -> Vec<f64> {
        self.weights.iter().zip(&self.per_root).map(|(w, r)| w * r.ret).collect()
    }
}

/// RHP over every weighted root, picking the action of the largest `w × R`.
pub fn plan_over_roots<S: RolloutSim, H: Heuristic<S::Obs> + ?Sized>(
    sim: &S,
    roots: &[(S::State, f64)],
    history: &History<S::Obs>,
    config: &PlannerConfig,
    heuristic: &H,
    seed: u64,
) -> Result<HybridResult, PlannerError> {
    config.validate()?;
    assert!(!roots.is_empty(), "at least one root state");
    let results = map_indexed(roots.len(), config.parallel, |k| {
        rhp(
            sim,
            &roots[k].0,
            history,
            config.m,
            config.h,
            config.gamma,
            heuristic,
            seed,
            k,
            config.parallel,
        )
    });
    let per_root = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let weights: Vec<f64> = roots.iter().map(|r| r.1).collect();
    let weighted: Vec<f64> = weights.iter().zip(&per_root).map(|(w, r)| w * r.ret).collect();
    let selected = argmax_first(&weighted).expect("non-empty");
    Ok(HybridResult {
        action: per_root[selected].action,
        selected,
        weights,
        per_root,
    })
}

fn observed_objects(obs: &Observation) -> Vec<ObjectState> {
    let grasped = obs.gripper.grasped_id();
    obs.visible_objects
        .iter()
        .filter_map(|o| sighted_object(&obs.priors, o, grasped))
        .collect()
}

/// Simulation object for a sighting, with nominal shape and mean parameters.
pub(crate) fn sighted_object(priors: &TaskPriors, o: &VisibleObject, grasped: Option<ObjectId>) -> Option<ObjectState> {
    let shape = priors.shapes.get(&o.type_id)?.clone();
    Some(ObjectState {
        id: o.id,
        type_id: o.type_id,
        nominal_shape: shape.clone(),
        shape,
        pose: o.pose,
        density: 1.0,
        friction: 0.3,
        status: if Some(o.id) == grasped {
            ObjectStatus::Grasped
        } else {
            ObjectStatus::Free
        },
    })
}

fn place_target(obs: &Observation, obstacles: &[ObjectState], pose: Pose2) -> Option<ShelfState> {
    let priors = &obs.priors;
    let shape = priors.target_shape()?.clone();
    let poly = transform_polygon(&shape, &pose);
    let ws = priors.shelf.workspace();
    if !poly.vertices.iter().all(|v| ws.contains(*v)) {
        return None;
    }
    let blocked = obstacles
        .iter()
        .map(|o| o.world_polygon())
        .chain(priors.shelf.walls())
        .any(|p| penetration(&p, &poly).is_some_and(|m| m.depth > 1e-9));
    if blocked {
        return None;
    }
    let mut objects = obstacles.to_vec();
    objects.push(ObjectState {
        id: HYPOTHESIS_TARGET_ID,
        type_id: priors.target_type,
        nominal_shape: shape.clone(),
        shape,
        pose,
        density: 1.0,
        friction: 0.3,
        status: ObjectStatus::Free,
    });
    Some(ShelfState {
        shelf: priors.shelf,
        gripper: obs.gripper,
        objects,
        target_id: HYPOTHESIS_TARGET_ID,
    })
}

/// Root states for the hybrid planner. An empty result means no feasible
/// placement of the target exists.
pub fn generate_root_states<H: Heuristic<Observation> + ?Sized>(
    history: &History<Observation>,
    heuristic: &H,
    config: &PlannerConfig,
    seed: u64,
) -> Result<Vec<RootHypothesis>, PlannerError> {
    let obs = history.last().ok_or(HeuristicError::EmptyHistory)?;
    let objects = observed_objects(obs);
    if let Some(t) = obs.target() {
        let state = ShelfState {
            shelf: obs.priors.shelf,
            gripper: obs.gripper,
            objects,
            target_id: t.id,
        };
        return Ok(vec![RootHypothesis {
            state,
            weight: 1.0,
            peak_pixel: None,
            source: RootSource::Visible,
        }]);
    }

    let frame = obs.frame();
    let heatmap = heuristic.evaluate(history)?.heatmap;
    let mut roots = Vec::new();
    if let Ok(peaks) = extract_peaks(&heatmap, config.peak_threshold, config.max_peaks) {
        for p in peaks {
            let pos = frame.pixel_center_world(p.row, p.col);
            if let Some(state) = place_target(obs, &objects, Pose2::from_position(pos, 0.0)) {
                roots.push(RootHypothesis {
                    state,
                    weight: p.weight,
                    peak_pixel: Some((p.row, p.col)),
                    source: RootSource::HeatmapPeak,
                });
            }
        }
    }
    if roots.is_empty() {
        // uniform sample of feasible occluded pixels
        let mut candidates = Vec::new();
        for row in 0..HEATMAP_SIZE {
            for col in 0..HEATMAP_SIZE {
                let w = frame.pixel_center_world(row, col);
                if obs.occluded_region.classify(w) == Region::Occluded {
                    candidates.push((row, col));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ccd);
        while roots.len() < config.max_peaks && !candidates.is_empty() {
            let (row, col) = candidates.swap_remove(rng.random_range(0..candidates.len()));
            let pos = frame.pixel_center_world(row, col);
            if let Some(state) = place_target(obs, &objects, Pose2::from_position(pos, 0.0)) {
                roots.push(RootHypothesis {
                    state,
                    weight: 1.0,
                    peak_pixel: Some((row, col)),
                    source: RootSource::OccludedSample,
                });
            }
        }
    }
    let total: f64 = roots.iter().map(|r| r.weight).sum();
    for r in roots.iter_mut() {
        r.weight /= total;
    }
    Ok(roots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridMode {
    AllRoots,
    /// Only the most likely root.
    MostLikely,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub action: Action,
    pub roots: Vec<RootHypothesis>,
    pub result: Option<HybridResult>,
}

/// One planning step of the hybrid planner on the current history.
pub fn hybrid_plan<H: Heuristic<Observation> + ?Sized>(
    sim: &ShelfSim,
    history: &History<Observation>,
    config: &PlannerConfig,
    heuristic: &H,
    seed: u64,
    mode: HybridMode,
) -> Result<PlanOutcome, PlannerError> {
    config.validate()?;
    let mut roots = generate_root_states(history, heuristic, config, seed)?;
    if roots.is_empty() {
        // nowhere to put the target: follow the policy
        let out = heuristic.evaluate(history)?;
        let mut rng = rollout_rng(seed, usize::MAX >> 32, 0);
        let action = sample_action(&out.policy, &sim.physics.limits, &mut rng);
        return Ok(PlanOutcome {
            action,
            roots,
            result: None,
        });
    }
    if mode == HybridMode::MostLikely {
        let w: Vec<f64> = roots.iter().map(|r| r.weight).collect();
        let k = argmax_first(&w).expect("non-empty");
        let mut r = roots.swap_remove(k);
        r.weight = 1.0;
        roots = vec![r];
    }
    let pairs: Vec<(ShelfState, f64)> = roots.iter().map(|r| (r.state.clone(), r.weight)).collect();
    let result = plan_over_roots(sim, &pairs, history, config, heuristic, seed)?;
    Ok(PlanOutcome {
        action: result.action,
        roots,
        result: Some(result),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heuristic::{ActionDistribution, HeuristicOutput};

    fn bump(h: &mut HeatMap, r: usize, c: usize, peak: f32) {
        for dr in -3i32..=3 {
            for dc in -3i32..=3 {
                let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                let v = peak * (-((dr * dr + dc * dc) as f32) / 4.0).exp();
                h.set(rr as usize, cc as usize, v.max(h.get(rr as usize, cc as usize)));
            }
        }
    }

    #[test]
    fn single_bump_is_one_peak() {
        let mut h = HeatMap::filled(0.0);
        bump(&mut h, 20, 30, 0.8);
        let p = extract_peaks(&h, 0.5, 5).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].row, p[0].col), (20, 30));
        assert_eq!(p[0].weight, 1.0);
    }

    #[test]
    fn equal_bumps_split_weight() {
        let mut h = HeatMap::filled(0.0);
        bump(&mut h, 10, 10, 0.9);
        bump(&mut h, 40, 40, 0.9);
        let p = extract_peaks(&h, 0.5, 5).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].weight, 0.5);
        assert_eq!(p[1].weight, 0.5);
    }

    #[test]
    fn weak_bump_below_threshold_is_dropped() {
        let mut h = HeatMap::filled(0.0);
        bump(&mut h, 10, 10, 0.9);
        bump(&mut h, 40, 40, 0.3);
        let p = extract_peaks(&h, 0.5, 5).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].row, p[0].col), (10, 10));
    }

    #[test]
    fn plateau_peak_is_first_cell_and_capped() {
        let mut h = HeatMap::filled(0.0);
        for r in 5..8 {
            for c in 9..12 {
                h.set(r, c, 0.5);
            }
        }
        for k in 0..8 {
            h.set(30, 2 + 4 * k, 0.5);
        }
        let p = extract_peaks(&h, 0.5, 5).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!((p[0].row, p[0].col), (5, 9));
        assert!((p.iter().map(|p| p.weight).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_zero_heatmap_is_degenerate() {
        assert!(matches!(
            extract_peaks(&HeatMap::filled(0.0), 0.5, 5),
            Err(PlannerError::DegenerateHeatmap(_))
        ));
    }

    /// Counter state; each step yields a reward looked up from a table
    /// indexed by the (discrete) action.
    struct TableSim {
        rewards: Vec<f64>,
        terminal_after: Option<usize>,
    }

    impl RolloutSim for TableSim {
        type State = usize;
        type Obs = usize;

        fn observe(&self, s: &usize) -> Arc<usize> {
            Arc::new(*s)
        }

        fn step(&self, s: &usize, a: &Action) -> SimStep<usize, usize> {
            let k = (a.dgrip.round() as usize).min(self.rewards.len() - 1);
            SimStep {
                state: s + 1,
                observation: Arc::new(s + 1),
                reward: self.rewards[k],
                terminal: self.terminal_after.is_some_and(|t| s + 1 >= t),
            }
        }

        fn limits(&self) -> ActionLimits {
            ActionLimits::default()
        }
    }

    /// Policy with a fixed mean; value equal to a constant.
    struct FixedHeuristic {
        mean: [f64; 4],
        std: [f64; 4],
        value: f64,
    }

    impl Heuristic<usize> for FixedHeuristic {
        fn evaluate(&self, _: &History<usize>) -> Result<HeuristicOutput, HeuristicError> {
            Ok(HeuristicOutput {
                policy: ActionDistribution {
                    mean: self.mean,
                    std: self.std,
                },
                value: self.value,
                heatmap: HeatMap::filled(0.0),
            })
        }
    }

    #[test]
    fn base_case_return() {
        let sim = TableSim {
            rewards: vec![-1.0],
            terminal_after: None,
        };
        let heur = FixedHeuristic {
            mean: [0.0; 4],
            std: [1e-9; 4],
            value: -7.0,
        };
        let hist = History::from_vec(vec![Arc::new(0usize)]);
        let r = rhp(&sim, &0, &hist, 1, 1, 0.995, &heur, 1, 0, false).unwrap();
        assert_eq!(r.ret, -1.0 + 0.995 * -7.0);
    }

    #[test]
    fn closed_form_two_by_three() {
        let sim = TableSim {
            rewards: vec![-1.0],
            terminal_after: None,
        };
        let heur = FixedHeuristic {
            mean: [0.0; 4],
            std: [1e-9; 4],
            value: -3.5,
        };
        let hist = History::from_vec(vec![Arc::new(0usize)]);
        let g: f64 = 0.995;
        let r = rhp(&sim, &0, &hist, 2, 3, g, &heur, 1, 0, false).unwrap();
        let expected = -1.0 - g - g * g + g.powi(3) * -3.5;
        assert!((r.ret - expected).abs() < 1e-12);
        assert_eq!(r.rollouts.len(), 2);
        for ro in &r.rollouts {
            assert!((ro.recompute(g, 3) - ro.ret).abs() < 1e-12);
        }
    }

    #[test]
    fn terminated_rollout_has_no_bootstrap() {
        let sim = TableSim {
            rewards: vec![-51.0],
            terminal_after: Some(1),
        };
        let heur = FixedHeuristic {
            mean: [0.0; 4],
            std: [1e-9; 4],
            value: -3.5,
        };
        let hist = History::from_vec(vec![Arc::new(0usize)]);
        let r = rhp(&sim, &0, &hist, 1, 4, 0.995, &heur, 1, 0, false).unwrap();
        assert_eq!(r.ret, -51.0);
        assert_eq!(r.rollouts[0].length, 1);
        assert!(r.rollouts[0].terminated);
        assert_eq!(r.rollouts[0].bootstrap, None);
    }

    #[test]
    fn argmax_ties_prefer_first() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_first(&[-2.0, -2.0]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn weighted_selection_picks_second_root() {
        // root k's rollouts all see reward table[k]; V = 0, h = 1, undiscounted
        struct RootSim;
        impl RolloutSim for RootSim {
            type State = f64;
            type Obs = f64;
            fn observe(&self, s: &f64) -> Arc<f64> {
                Arc::new(*s)
            }
            fn step(&self, s: &f64, _: &Action) -> SimStep<f64, f64> {
                SimStep {
                    state: *s,
                    observation: Arc::new(*s),
                    reward: *s,
                    terminal: false,
                }
            }
            fn limits(&self) -> ActionLimits {
                ActionLimits::default()
            }
        }
        struct Zero;
        impl Heuristic<f64> for Zero {
            fn evaluate(&self, h: &History<f64>) -> Result<HeuristicOutput, HeuristicError> {
                let s = **h.last().unwrap();
                Ok(HeuristicOutput {
                    policy: ActionDistribution {
                        mean: [0.0, 0.0, 0.0, s / 100.0],
                        std: [1e-12; 4],
                    },
                    value: 0.0,
                    heatmap: HeatMap::filled(0.0),
                })
            }
        }
        let cfg = PlannerConfig {
            m: 2,
            h: 1,
            gamma: 0.0,
            parallel: false,
            ..PlannerConfig::default()
        };
        let hist = History::from_vec(vec![Arc::new(0.0)]);
        let roots = vec![(10.0, 0.7), (30.0, 0.3)];
        let r = plan_over_roots(&RootSim, &roots, &hist, &cfg, &Zero, 3).unwrap();
        assert_eq!(r.selected, 1);
        assert_eq!(r.weighted_returns(), vec![7.0, 9.0]);
        assert!((r.action.dgrip - 0.3).abs() < 1e-9);
        for scale in [1e-3, 2.0, 1e4] {
            let scaled: Vec<(f64, f64)> = roots.iter().map(|(s, w)| (*s, w * scale)).collect();
            assert_eq!(plan_over_roots(&RootSim, &scaled, &hist, &cfg, &Zero, 3).unwrap().selected, 1);
        }
        let equal = vec![(10.0, 0.5), (10.0, 0.5)];
        assert_eq!(plan_over_roots(&RootSim, &equal, &hist, &cfg, &Zero, 3).unwrap().selected, 0);
    }

    #[test]
    fn parallel_and_serial_rollouts_agree() {
        let sim = TableSim {
            rewards: vec![-1.0, -2.0, -0.5],
            terminal_after: None,
        };
        let heur = FixedHeuristic {
            mean: [0.0, 0.0, 0.0, 1.0],
            std: [0.01, 0.01, 0.1, 0.8],
            value: -3.0,
        };
        let hist = History::from_vec(vec![Arc::new(0usize)]);
        let a = rhp(&sim, &0, &hist, 8, 3, 0.995, &heur, 42, 2, false).unwrap();
        let b = rhp(&sim, &0, &hist, 8, 3, 0.995, &heur, 42, 2, true).unwrap();
        assert_eq!(a, b);
    }
}
