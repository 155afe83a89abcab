//! Comparison methods: policy-only baselines and a hierarchical
//! search / rearrange / retrieve planner driven by a kinodynamic RRT.

use crate::geometry::{normalize_angle, Polygon, Pose2, Region, Vec2};
use crate::heuristic::{sample_action, Heuristic, HeuristicError};
use crate::observation::{History, Observation, TaskPriors, VisibleObject};
use crate::physics::{
    detect_terminal, grasp_headings, grasp_pose, grasp_preshape, gripper_clear, physics_step, Action, GripperGeometry,
    ObjectId, PhysicalTerminal, PhysicsConfig, ShelfState, GRASP_MARGIN,
};
use crate::planner::sighted_object;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

/// Mean of the policy distribution.
pub fn greedy_action<H: Heuristic<Observation> + ?Sized>(
    history: &History<Observation>,
    heuristic: &H,
    physics: &PhysicsConfig,
) -> Result<Action, HeuristicError> {
    Ok(heuristic.evaluate(history)?.policy.squashed_mean(&physics.limits))
}

/// One draw from the policy distribution.
pub fn stochastic_action<H: Heuristic<Observation> + ?Sized>(
    history: &History<Observation>,
    heuristic: &H,
    physics: &PhysicsConfig,
    rng: &mut impl Rng,
) -> Result<Action, HeuristicError> {
    let out = heuristic.evaluate(history)?;
    Ok(sample_action(&out.policy, &physics.limits, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrtConfig {
    /// Maximum number of node expansions.
    pub budget: usize,
    /// Probability of sampling the goal hint instead of a random pose.
    pub goal_bias: f64,
    /// Random controls tried per expansion besides the steering control.
    pub controls: usize,
    /// Meters per radian in the configuration distance.
    pub rotation_weight: f64,
    /// Consecutive extensions towards a goal-hint sample while they make progress.
    pub connect_steps: usize,
    /// Depth in front of the shelf covered by configuration samples.
    pub front_margin: f64,
}

impl Default for RrtConfig {
    fn default() -> Self {
        Self {
            budget: 3000,
            goal_bias: 0.3,
            controls: 4,
            rotation_weight: 0.05,
            connect_steps: 20,
            front_margin: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrtNode {
    pub state: ShelfState,
    pub parent: Option<usize>,
    pub action_from_parent: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrtTree {
    pub nodes: Vec<RrtNode>,
}

impl RrtTree {
    /// Actions leading from the root to node `index`.
    pub fn path_to(&self, index: usize) -> Vec<Action> {
        let mut out = Vec::new();
        let mut i = index;
        while let Some(p) = self.nodes[i].parent {
            out.push(self.nodes[i].action_from_parent);
            i = p;
        }
        out.reverse();
        out
    }
}

#[derive(Debug, Clone)]
pub struct RrtSearch {
    pub tree: RrtTree,
    pub goal: Option<usize>,
    pub expansions: usize,
}

impl RrtSearch {
    pub fn plan(&self) -> Option<Vec<Action>> {
        self.goal.map(|g| self.tree.path_to(g))
    }
}

fn config_distance(a: &Pose2, b: &Pose2, rotation_weight: f64) -> f64 {
    (a.position() - b.position()).norm() + rotation_weight * normalize_angle(a.theta - b.theta).abs()
}

/// Body-frame control that moves `from` towards `to` within the limits.
fn steer(from: &Pose2, to: &Pose2, physics: &PhysicsConfig) -> Action {
    let v = scale_to_cap(from.inverse_transform_vector(to.position() - from.position()), physics.limits.step_cap);
    let rot = normalize_angle(to.theta - from.theta).clamp(-physics.limits.rotation_cap, physics.limits.rotation_cap);
    Action::new(v.x, v.y, rot, 0.0)
}

fn scale_to_cap(v: Vec2, cap: f64) -> Vec2 {
    let m = v.x.abs().max(v.y.abs());
    if m > cap {
        v * (cap / m)
    } else {
        v
    }
}

/// Successor of `state` under `action`, unless something drops or the
/// gripper does not move.
fn expand(state: &ShelfState, action: &Action, physics: &PhysicsConfig) -> Option<ShelfState> {
    let (next, events) = physics_step(state, action, physics);
    if !events.dropped_ids.is_empty() || detect_terminal(&next) == PhysicalTerminal::Dropped {
        return None;
    }
    let a = state.gripper.pose;
    let b = next.gripper.pose;
    let moved = (a.position() - b.position()).norm() > 1e-9 || (a.theta - b.theta).abs() > 1e-9;
    moved.then_some(next)
}

/// Grows a kinodynamic RRT from `start` until `goal` holds at a node or the
/// expansion budget runs out.
pub fn grow_rrt(
    start: &ShelfState,
    goal: &dyn Fn(&ShelfState) -> bool,
    hint: Option<Pose2>,
    config: &RrtConfig,
    physics: &PhysicsConfig,
    rng: &mut impl Rng,
) -> RrtSearch {
    let mut tree = RrtTree {
        nodes: vec![RrtNode {
            state: start.clone(),
            parent: None,
            action_from_parent: Action::NONE,
        }],
    };
    if goal(start) {
        return RrtSearch {
            tree,
            goal: Some(0),
            expansions: 0,
        };
    }
    let ws = start.shelf.workspace();
    let limits = physics.limits;
    let mut expansions = 0;
    while expansions < config.budget {
        let (sample, connect) = match hint {
            Some(h) if rng.random::<f64>() < config.goal_bias => (h, true),
            _ => (
                Pose2::new(
                    rng.random_range(ws.min.x..=ws.max.x),
                    rng.random_range(ws.min.y - config.front_margin..=ws.max.y),
                    rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
                ),
                false,
            ),
        };
        let dist = |s: &ShelfState| config_distance(&s.gripper.pose, &sample, config.rotation_weight);
        let mut from = (0..tree.nodes.len())
            .min_by(|&a, &b| dist(&tree.nodes[a].state).total_cmp(&dist(&tree.nodes[b].state)))
            .expect("tree has a root");
        let mut from_dist = dist(&tree.nodes[from].state);
        for _ in 0..if connect { config.connect_steps.max(1) } else { 1 } {
            if expansions >= config.budget {
                break;
            }
            expansions += 1;
            let state = &tree.nodes[from].state;
            let mut candidates = vec![steer(&state.gripper.pose, &sample, physics)];
            candidates.extend((0..config.controls).map(|_| {
                Action::new(
                    rng.random_range(-limits.step_cap..=limits.step_cap),
                    rng.random_range(-limits.step_cap..=limits.step_cap),
                    rng.random_range(-limits.rotation_cap..=limits.rotation_cap),
                    0.0,
                )
            }));
            let best = candidates
                .into_iter()
                .filter_map(|a| expand(state, &a, physics).map(|s| (dist(&s), s, a)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let Some((d, next, action)) = best else { break };
            let reached = goal(&next);
            tree.nodes.push(RrtNode {
                state: next,
                parent: Some(from),
                action_from_parent: action,
            });
            let index = tree.nodes.len() - 1;
            if reached {
                return RrtSearch {
                    tree,
                    goal: Some(index),
                    expansions,
                };
            }
            if d >= from_dist - 1e-9 {
                break;
            }
            from = index;
            from_dist = d;
        }
    }
    RrtSearch {
        tree,
        goal: None,
        expansions,
    }
}

/// Action sequence reaching a goal state, or `None` once the budget is spent.
pub fn kinodynamic_rrt(
    start: &ShelfState,
    goal: &dyn Fn(&ShelfState) -> bool,
    hint: Option<Pose2>,
    config: &RrtConfig,
    physics: &PhysicsConfig,
    rng: &mut impl Rng,
) -> Option<Vec<Action>> {
    grow_rrt(start, goal, hint, config, physics, rng).plan()
}

/// Whether closing the gripper now would capture object `id`.
pub fn ready_to_grasp(state: &ShelfState, id: ObjectId, geom: &GripperGeometry) -> bool {
    let Some(o) = state.object(id) else { return false };
    let g = &state.gripper;
    if g.grasp.is_some() || g.aperture < 0.5 {
        return false;
    }
    let rel = g.pose.inverse_transform_point(o.pose.position());
    rel.x.abs() < geom.gap(g.aperture) / 2.0 - 0.002 && rel.y > 0.004 && rel.y < geom.finger_length - 0.004
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HighLevelKind {
    Search,
    Rearrange(ObjectId),
    MoveOut,
    Retrieve(ObjectId),
}

/// A high-level step and the low-level actions realizing it.
#[derive(Debug, Clone, PartialEq)]
pub struct HighLevelAction {
    pub kind: HighLevelKind,
    pub plan: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchicalConfig {
    /// Waypoints of the search sweep in front of the shelf.
    pub waypoints: usize,
    /// Gripper y coordinate along the sweep.
    pub sweep_y: f64,
    pub rrt: RrtConfig,
    pub grasp_margin: f64,
    /// Distance from the free-space center counted as placed.
    pub place_tolerance: f64,
    /// High-level decisions per control step before backing off.
    pub max_decisions: usize,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        Self {
            waypoints: 20,
            sweep_y: -0.10,
            rrt: RrtConfig::default(),
            grasp_margin: GRASP_MARGIN,
            place_tolerance: 0.03,
            max_decisions: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Search,
    Decide,
    MoveOut,
}

/// Closed-loop driver for the hierarchical planner. High-level plans run
/// open loop; only the search sweep stops early once the target shows up.
#[derive(Debug, Clone)]
pub struct HierarchicalController {
    config: HierarchicalConfig,
    physics: PhysicsConfig,
    priors: Arc<TaskPriors>,
    rng: ChaCha8Rng,
    memory: BTreeMap<ObjectId, VisibleObject>,
    located: bool,
    stage: Stage,
    current: Option<HighLevelAction>,
    cursor: usize,
    log: Vec<HighLevelKind>,
}

impl HierarchicalController {
    pub fn new(config: HierarchicalConfig, physics: PhysicsConfig, priors: Arc<TaskPriors>, seed: u64) -> Self {
        Self {
            config,
            physics,
            priors,
            rng: ChaCha8Rng::seed_from_u64(seed),
            memory: BTreeMap::new(),
            located: false,
            stage: Stage::Search,
            current: None,
            cursor: 0,
            log: Vec::new(),
        }
    }

    /// High-level actions issued so far.
    pub fn log(&self) -> &[HighLevelKind] {
        &self.log
    }

    /// Whether the target has been detected during a search.
    pub fn located(&self) -> bool {
        self.located
    }

    pub fn remembered(&self) -> &BTreeMap<ObjectId, VisibleObject> {
        &self.memory
    }

    pub fn current(&self) -> Option<&HighLevelAction> {
        self.current.as_ref()
    }

    fn remember(&mut self, obs: &Observation) {
        let visible: Vec<ObjectId> = obs.visible_ids();
        // forget sightings whose place is in view but empty
        self.memory.retain(|id, o| {
            visible.contains(id) || obs.occluded_region.classify(o.pose.position()) != Region::Observable
        });
        for o in &obs.visible_objects {
            self.memory.insert(o.id, o.clone());
        }
        let in_search = self.stage == Stage::Search
            || self.current.as_ref().is_some_and(|c| c.kind == HighLevelKind::Search);
        if in_search && obs.target().is_some() {
            self.located = true;
        }
    }

    /// Next low-level action for the latest observation in `history`.
    pub fn next_action(&mut self, history: &History<Observation>) -> Action {
        let Some(obs) = history.last() else { return Action::NONE };
        self.remember(obs);
        for _ in 0..self.config.max_decisions.max(1) {
            if let Some(cur) = &self.current {
                let searching_done = cur.kind == HighLevelKind::Search && self.located;
                if !searching_done && self.cursor < cur.plan.len() {
                    self.cursor += 1;
                    return cur.plan[self.cursor - 1];
                }
                self.current = None;
            }
            let next = self.decide(obs);
            self.cursor = 0;
            if let Some(h) = next {
                self.log.push(h.kind);
                self.current = Some(h);
            }
        }
        // nothing could be planned: back away from the shelf
        Action::new(0.0, -self.physics.limits.step_cap, 0.0, 0.0)
    }

    /// Chooses the next high-level action following the search, rearrange /
    /// move-out, retrieve loop. `None` means planning failed and the loop
    /// restarts with a search.
    fn decide(&mut self, obs: &Observation) -> Option<HighLevelAction> {
        match self.stage {
            Stage::Search => {
                self.stage = Stage::Decide;
                if obs.target().is_some() {
                    self.located = true;
                }
                let plan = if self.located && obs.target().is_some() {
                    Vec::new()
                } else {
                    self.sweep_plan(&obs.gripper.pose)
                };
                Some(HighLevelAction {
                    kind: HighLevelKind::Search,
                    plan,
                })
            }
            Stage::Decide => {
                let target = self.memory.values().find(|o| o.type_id == self.priors.target_type).cloned();
                match target {
                    Some(t) if self.located => {
                        self.stage = Stage::Search;
                        self.retrieve_plan(obs, &t).map(|plan| HighLevelAction {
                            kind: HighLevelKind::Retrieve(t.id),
                            plan,
                        })
                    }
                    _ => {
                        let g = obs.gripper.pose.position();
                        let closest = self
                            .memory
                            .values()
                            .filter(|o| o.type_id != self.priors.target_type)
                            .map(|o| ((o.pose.position() - g).norm(), o.id))
                            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                            .map(|(_, id)| id);
                        let Some(id) = closest else {
                            self.stage = Stage::Search;
                            return None;
                        };
                        match self.rearrange_plan(obs, id) {
                            Some(plan) => {
                                self.stage = Stage::MoveOut;
                                Some(HighLevelAction {
                                    kind: HighLevelKind::Rearrange(id),
                                    plan,
                                })
                            }
                            None => {
                                self.stage = Stage::Search;
                                None
                            }
                        }
                    }
                }
            }
            Stage::MoveOut => {
                self.stage = Stage::Search;
                Some(HighLevelAction {
                    kind: HighLevelKind::MoveOut,
                    plan: self.move_out_plan(&obs.gripper.pose),
                })
            }
        }
    }

    /// Straight-line motion between two poses, ignoring contacts.
    fn line_plan(&self, from: &Pose2, to: &Pose2) -> (Vec<Action>, Pose2) {
        let cap = self.physics.limits.step_cap;
        let rcap = self.physics.limits.rotation_cap;
        let d = to.position() - from.position();
        let dth = normalize_angle(to.theta - from.theta);
        let n = (d.x.abs() / cap).max(d.y.abs() / cap).max(dth.abs() / rcap).ceil() as usize;
        let mut pose = *from;
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let left = (n - k) as f64;
            let dw = (to.position() - pose.position()) * (1.0 / left);
            let dt = normalize_angle(to.theta - pose.theta) / left;
            let body = pose.inverse_transform_vector(dw);
            out.push(Action::new(body.x, body.y, dt, 0.0));
            pose = Pose2::from_position(pose.position() + dw, pose.theta + dt);
        }
        (out, pose)
    }

    fn sweep_plan(&self, from: &Pose2) -> Vec<Action> {
        let half = self.priors.shelf.width / 2.0;
        let n = self.config.waypoints.max(2);
        let y = self.config.sweep_y;
        let mut plan = Vec::new();
        let mut pose = *from;
        if pose.y > y {
            let (p, end) = self.line_plan(&pose, &Pose2::new(pose.x, y, 0.0));
            plan.extend(p);
            pose = end;
        }
        for i in 0..n {
            let x = -half + 2.0 * half * i as f64 / (n - 1) as f64;
            let (p, end) = self.line_plan(&pose, &Pose2::new(x, y, 0.0));
            plan.extend(p);
            pose = end;
        }
        plan
    }

    fn move_out_plan(&self, from: &Pose2) -> Vec<Action> {
        let (mut plan, pose) = self.line_plan(from, &Pose2::new(from.x, from.y, 0.0));
        if pose.y > self.config.sweep_y {
            plan.extend(self.line_plan(&pose, &Pose2::new(pose.x, self.config.sweep_y, 0.0)).0);
        }
        plan
    }

    /// Planning state assembled from remembered sightings.
    fn planning_state(&self, obs: &Observation, target: ObjectId) -> ShelfState {
        let grasped = obs.gripper.grasped_id();
        ShelfState {
            shelf: self.priors.shelf,
            gripper: obs.gripper,
            objects: self
                .memory
                .values()
                .filter_map(|o| sighted_object(&self.priors, o, grasped))
                .collect(),
            target_id: target,
        }
    }

    /// Pre-shapes the gripper and plans to a pose where closing captures `id`.
    /// Returns the plan and the state it reaches in the planning model.
    fn grasp_plan(&mut self, start: ShelfState, id: ObjectId) -> Option<(Vec<Action>, ShelfState)> {
        let geom = self.physics.gripper;
        let o = start.object(id)?.clone();
        let shape = self.priors.shapes.get(&o.type_id)?;
        let c = o.pose.position();
        let obstacles: Vec<Polygon> = start.objects.iter().filter(|x| x.id != id).map(|x| x.world_polygon()).collect();
        let headings = grasp_headings(shape, &o.pose, start.gripper.pose.position(), &geom, self.config.grasp_margin);
        let clear = |phi: f64, obstacles: &[Polygon]| {
            let a = grasp_preshape(shape, &o.pose, phi, &geom, self.config.grasp_margin);
            gripper_clear(&start.shelf, &grasp_pose(c, phi, &geom), a, &geom, obstacles)
        };
        let phi = headings
            .iter()
            .copied()
            .find(|&phi| clear(phi, &obstacles))
            .or_else(|| headings.iter().copied().find(|&phi| clear(phi, &[])))?;
        let aperture = grasp_preshape(shape, &o.pose, phi, &geom, self.config.grasp_margin);
        let mut plan = Vec::new();
        let mut state = start;
        if (state.gripper.aperture - aperture).abs() > 0.01 {
            let a = Action::new(0.0, 0.0, 0.0, aperture - state.gripper.aperture);
            state = physics_step(&state, &a, &self.physics).0;
            plan.push(a);
        }
        let goal = |s: &ShelfState| ready_to_grasp(s, id, &geom);
        let search = grow_rrt(&state, &goal, Some(grasp_pose(c, phi, &geom)), &self.config.rrt, &self.physics, &mut self.rng);
        let end = search.goal?;
        plan.extend(search.tree.path_to(end));
        Some((plan, search.tree.nodes[end].state.clone()))
    }

    fn retrieve_plan(&mut self, obs: &Observation, target: &VisibleObject) -> Option<Vec<Action>> {
        let start = self.planning_state(obs, target.id);
        let (mut plan, mut state) = self.grasp_plan(start, target.id)?;
        let close = Action::new(0.0, 0.0, 0.0, -1.0);
        state = physics_step(&state, &close, &self.physics).0;
        plan.push(close);
        if state.gripper.grasped_id() != Some(target.id) {
            return None;
        }
        // straight pull out of the shelf
        let cap = self.physics.limits.step_cap;
        for _ in 0..20 {
            let body = state.gripper.pose.inverse_transform_vector(Vec2::new(0.0, -cap));
            let a = Action::new(body.x, body.y, 0.0, 0.0);
            state = physics_step(&state, &a, &self.physics).0;
            plan.push(a);
            if detect_terminal(&state) != PhysicalTerminal::None {
                break;
            }
        }
        Some(plan)
    }

    /// Center of the largest empty disc in the back third of the shelf.
    fn free_space(&self, state: &ShelfState, moved: ObjectId) -> Vec2 {
        let ws = self.priors.shelf.workspace();
        let others: Vec<Polygon> = state.objects.iter().filter(|o| o.id != moved).map(|o| o.world_polygon()).collect();
        let step = 0.01;
        let y0 = ws.max.y - ws.height() / 3.0;
        let mut best = (f64::NEG_INFINITY, Vec2::new(0.0, ws.max.y - step));
        let nx = (ws.width() / step).floor() as usize;
        let ny = ((ws.max.y - y0) / step).floor() as usize;
        for iy in 0..=ny {
            for ix in 0..=nx {
                let p = Vec2::new(ws.min.x + ix as f64 * step, y0 + iy as f64 * step);
                let walls = (p.x - ws.min.x).min(ws.max.x - p.x).min(ws.max.y - p.y);
                let clearance = others.iter().map(|poly| point_polygon_distance(p, poly)).fold(walls, f64::min);
                if clearance > best.0 {
                    best = (clearance, p);
                }
            }
        }
        best.1
    }

    fn rearrange_plan(&mut self, obs: &Observation, id: ObjectId) -> Option<Vec<Action>> {
        let target = self.memory.values().find(|o| o.type_id == self.priors.target_type).map_or(id, |t| t.id);
        let start = self.planning_state(obs, target);
        let center = self.free_space(&start, id);
        match self.grasp_plan(start.clone(), id) {
            Some((mut plan, mut state)) => {
                let close = Action::new(0.0, 0.0, 0.0, -1.0);
                state = physics_step(&state, &close, &self.physics).0;
                plan.push(close);
                if state.gripper.grasped_id() != Some(id) {
                    return None;
                }
                let phi = state.gripper.pose.theta;
                let offset = state.gripper.pose.inverse_transform_point(state.object(id)?.pose.position());
                let hint = Pose2::from_position(center - Vec2::new(offset.x, offset.y).rotate(phi), phi);
                let tol = self.config.place_tolerance;
                let goal = |s: &ShelfState| s.object(id).is_some_and(|o| (o.pose.position() - center).norm() < tol);
                let search = grow_rrt(&state, &goal, Some(hint), &self.config.rrt, &self.physics, &mut self.rng);
                plan.extend(search.plan()?);
                plan.push(Action::new(0.0, 0.0, 0.0, 1.0));
                Some(plan)
            }
            None => {
                // too wide to grasp: push it towards the back
                let o = start.object(id)?.clone();
                let r = o.shape.circumradius();
                let c = o.pose.position();
                let before = Pose2::new(c.x, c.y - r - 0.015, 0.0);
                let goal = |s: &ShelfState| config_distance(&s.gripper.pose, &before, self.config.rrt.rotation_weight) < 0.01;
                let mut rrt_config = self.config.rrt;
                rrt_config.goal_bias = rrt_config.goal_bias.max(0.5);
                let mut plan = kinodynamic_rrt(&start, &goal, Some(before), &rrt_config, &self.physics, &mut self.rng)?;
                let push = (center.y - c.y).max(0.0).min(0.09);
                let n = (push / self.physics.limits.step_cap).ceil() as usize;
                plan.extend((0..n).map(|_| Action::new(0.0, push / n as f64, 0.0, 0.0)));
                Some(plan)
            }
        }
    }
}

fn point_polygon_distance(p: Vec2, poly: &Polygon) -> f64 {
    if poly.contains(p) {
        return 0.0;
    }
    poly.edges()
        .map(|(a, b)| {
            let ab = b - a;
            let t = ((p - a).dot(ab) / ab.norm_sq().max(1e-18)).clamp(0.0, 1.0);
            (p - (a + ab * t)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}
