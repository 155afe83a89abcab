//! Hand-written heuristic used when no learned model is available.

use super::{ActionDistribution, HeatMap, Heuristic, HeuristicError, HeuristicOutput, HEATMAP_SIZE};
use crate::geometry::{heading_towards, normalize_angle, Pose2, Region, Vec2};
use crate::observation::{footprint_pixels, History, Observation, VisibleObject};
use crate::physics::{grasp_headings, grasp_pose, grasp_preshape, gripper_clear, GRASP_MARGIN, Action, ActionLimits};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedParams {
    /// Without the generative head the heat map forgets where the target was
    /// last seen.
    pub generative_head: bool,
    pub limits: ActionLimits,
    /// Policy std as a fraction of each channel's cap.
    pub std_fraction: f64,
    pub repulse_radius: f64,
    /// Clearance required between the target and the open fingers.
    pub grasp_margin: f64,
    pub seen_value: f32,
    pub seen_decay: f32,
    pub unseen_value: f32,
    /// Occluded now but observed earlier in the episode.
    pub revisit_value: f32,
    pub floor_value: f32,
}

impl Default for ScriptedParams {
    fn default() -> Self {
        Self {
            generative_head: true,
            limits: ActionLimits::default(),
            std_fraction: 0.15,
            repulse_radius: 0.06,
            grasp_margin: GRASP_MARGIN,
            seen_value: 0.9,
            seen_decay: 0.98,
            unseen_value: 0.5,
            revisit_value: 0.2,
            floor_value: 0.01,
        }
    }
}

/// Potential-field policy plus a last-seen heat map.
#[derive(Debug, Clone, Default)]
pub struct ScriptedHeuristic {
    pub params: ScriptedParams,
}

impl ScriptedHeuristic {
    pub fn new(params: ScriptedParams) -> Self {
        Self { params }
    }

    pub fn without_heatmap() -> Self {
        Self::new(ScriptedParams {
            generative_head: false,
            ..ScriptedParams::default()
        })
    }

    pub fn heatmap(&self, history: &History<Observation>) -> Option<HeatMap> {
        let cur = history.last()?;
        let p = &self.params;
        let frame = cur.frame();
        let region = &cur.occluded_region;
        let mut occluded = vec![false; HEATMAP_SIZE * HEATMAP_SIZE];
        for row in 0..HEATMAP_SIZE {
            for col in 0..HEATMAP_SIZE {
                occluded[row * HEATMAP_SIZE + col] = region.classify(frame.pixel_center_world(row, col)) == Region::Occluded;
            }
        }

        let last_seen = if p.generative_head {
            history.iter().enumerate().rev().find_map(|(i, o)| o.target().map(|t| (i, o.object_polygon(t))))
        } else {
            cur.target().map(|t| (history.len() - 1, cur.object_polygon(t)))
        };
        if let Some((idx, Some(poly))) = last_seen {
            let elapsed = (history.len() - 1 - idx) as i32;
            let value = p.seen_value * p.seen_decay.powi(elapsed);
            let now = elapsed == 0;
            let cells: Vec<(usize, usize)> = footprint_pixels(&frame, &poly)
                .into_iter()
                .filter(|(r, c)| now || occluded[r * HEATMAP_SIZE + c])
                .collect();
            if !cells.is_empty() {
                let mut h = HeatMap::filled(p.floor_value);
                for (r, c) in cells {
                    h.set(r, c, value);
                }
                return Some(h);
            }
        }
        let past: Vec<&[bool]> = history.iter().rev().skip(1).map(|o| o.observed_cells()).collect();
        let mut h = HeatMap::filled(p.floor_value);
        for (i, occ) in occluded.iter().enumerate() {
            if *occ {
                let (row, col) = (i / HEATMAP_SIZE, i % HEATMAP_SIZE);
                let seen_before = cur
                    .shelf_cell(frame.pixel_center_world(row, col))
                    .is_some_and(|cell| past.iter().any(|g| g[cell]));
                h.set(row, col, if seen_before { p.revisit_value } else { p.unseen_value });
            }
        }
        Some(h)
    }

    pub fn policy_mean(&self, obs: &Observation, goal: Vec2) -> Action {
        let p = &self.params;
        let g = obs.gripper;
        let target = obs.target();
        match (g.grasped_id(), target) {
            (Some(id), Some(t)) if id == t.id => {
                let back = g.pose.inverse_transform_vector(Vec2::new(0.0, -1.0));
                let v = scale_to_cap(back * p.limits.step_cap, p.limits.step_cap);
                Action::new(v.x, v.y, 0.0, -1.0)
            }
            (Some(_), _) => Action::new(0.0, -p.limits.step_cap, 0.0, 1.0),
            (None, Some(t)) => self.clear_of_walls(obs, self.grasp_controller(obs, t)),
            (None, _) if g.aperture < 0.9 => {
                let mut a = self.explore(obs, goal);
                a.dgrip = 1.0;
                self.clear_of_walls(obs, a)
            }
            (None, _) => self.clear_of_walls(obs, self.explore(obs, goal)),
        }
    }

    /// Replaces an action whose end pose would press the gripper into a wall
    /// with the first clear variant: without rotation, rotation only, or
    /// shifted towards the middle of the shelf.
    fn clear_of_walls(&self, obs: &Observation, a: Action) -> Action {
        let p = &self.params;
        let g = obs.gripper;
        let geom = &obs.priors.gripper;
        let shelf = &obs.priors.shelf;
        let clear = |a: &Action| {
            let pose = Pose2::from_position(g.pose.position() + g.pose.transform_vector(Vec2::new(a.dx, a.dy)), g.pose.theta + a.dtheta);
            gripper_clear(shelf, &pose, (g.aperture + a.dgrip).clamp(0.0, 1.0), geom, &[])
        };
        if clear(&a) {
            return a;
        }
        let inward = g
            .pose
            .inverse_transform_vector(Vec2::new(-g.pose.x.signum() * p.limits.step_cap, 0.0));
        let shifted = |with_rotation: bool| {
            let v = scale_to_cap(Vec2::new(a.dx, a.dy) + inward, p.limits.step_cap);
            Action::new(v.x, v.y, if with_rotation { a.dtheta } else { 0.0 }, a.dgrip)
        };
        [
            Action::new(a.dx, a.dy, 0.0, a.dgrip),
            Action::new(0.0, 0.0, a.dtheta, a.dgrip),
            shifted(true),
            shifted(false),
            Action::new(inward.x, inward.y, 0.0, a.dgrip),
        ]
        .into_iter()
        .find(clear)
        .unwrap_or(a)
    }

    fn grasp_controller(&self, obs: &Observation, t: &VisibleObject) -> Action {
        let p = &self.params;
        let geom = &obs.priors.gripper;
        let g = obs.gripper.pose;
        let Some(shape) = obs.priors.shapes.get(&t.type_id) else {
            return Action::NONE;
        };
        let c = t.pose.position();
        let shelf = &obs.priors.shelf;
        let obstacles: Vec<_> = obs
            .visible_objects
            .iter()
            .filter(|o| o.id != t.id)
            .filter_map(|o| obs.object_polygon(o))
            .collect();
        let headings = grasp_headings(shape, &t.pose, g.position(), geom, p.grasp_margin);
        let preshape = |phi: f64| grasp_preshape(shape, &t.pose, phi, geom, p.grasp_margin);
        let clear = |phi: &&f64, obstacles: &[_]| gripper_clear(shelf, &grasp_pose(c, **phi, geom), preshape(**phi), geom, obstacles);
        let phi = headings
            .iter()
            .find(|phi| clear(phi, &obstacles))
            .or_else(|| headings.iter().find(|phi| clear(phi, &[])))
            .or(headings.first())
            .copied()
            .unwrap_or_else(|| heading_towards(c - g.position()).clamp(-FRAC_PI_2, FRAC_PI_2));
        let grasp = grasp_pose(c, phi, geom).position();
        let pregrasp = grasp - Pose2::new(0.0, 0.0, phi).forward() * 0.06;
        let heading_err = normalize_angle(phi - g.theta);
        let e = (grasp - g.position()).rotate(-phi);

        let rel = g.inverse_transform_point(c);
        let gap = geom.gap(obs.gripper.aperture);
        let in_fingers = rel.x.abs() < gap / 2.0 && rel.y > 0.004 && rel.y < geom.finger_length - 0.004;
        if in_fingers && heading_err.abs() < 0.15 {
            return Action::new(0.0, 0.0, 0.0, -1.0);
        }
        let want = preshape(phi);
        let shaped = obs.gripper.aperture >= want - 0.05;
        let aligned = e.x.abs() < 0.006 && heading_err.abs() < 0.1 && shaped;
        let goal = if aligned { grasp } else { pregrasp };
        let v = scale_to_cap(g.inverse_transform_vector(goal - g.position()), p.limits.step_cap);
        let rot = heading_err.clamp(-p.limits.rotation_cap, p.limits.rotation_cap);
        Action::new(v.x, v.y, rot, (want - obs.gripper.aperture).clamp(-1.0, 1.0))
    }

    fn explore(&self, obs: &Observation, goal: Vec2) -> Action {
        let p = &self.params;
        let g = obs.gripper.pose;
        let cap = p.limits.step_cap;
        let delta = goal - g.position();
        let mut v = if delta.norm() > 0.02 { delta.normalized() * cap } else { Vec2::ZERO };
        let probe = g.position() + g.forward() * (obs.priors.gripper.finger_length * 0.5);
        for o in &obs.visible_objects {
            if Some(o.id) == obs.gripper.grasped_id() {
                continue;
            }
            let away = probe - o.pose.position();
            let d = away.norm();
            if d < p.repulse_radius && d > 1e-9 {
                v += away * (1.0 / d) * (2.0 * cap * (p.repulse_radius - d) / p.repulse_radius);
            }
        }
        let v = scale_to_cap(g.inverse_transform_vector(v), cap);
        let bearing = heading_towards(delta).clamp(-FRAC_PI_2, FRAC_PI_2);
        let rot = normalize_angle(bearing - g.theta).clamp(-p.limits.rotation_cap, p.limits.rotation_cap);
        Action::new(v.x, v.y, rot, 0.0)
    }
}

/// Scales `v` down so that neither component exceeds `cap`.
fn scale_to_cap(v: Vec2, cap: f64) -> Vec2 {
    let m = v.x.abs().max(v.y.abs());
    if m > cap {
        v * (cap / m)
    } else {
        v
    }
}

impl Heuristic<Observation> for ScriptedHeuristic {
    fn evaluate(&self, history: &History<Observation>) -> Result<HeuristicOutput, HeuristicError> {
        let cur = history.last().ok_or(HeuristicError::EmptyHistory)?;
        let heatmap = self.heatmap(history).ok_or(HeuristicError::EmptyHistory)?;
        let (row, col) = heatmap.argmax();
        let goal = cur.frame().pixel_center_world(row, col);
        let mean = self.policy_mean(cur, goal).to_array();
        let caps = self.params.limits.caps();
        let std = caps.map(|c| c * self.params.std_fraction);
        let dist = (goal - cur.gripper.pose.position()).norm();
        let value = (-(dist / self.params.limits.step_cap + 10.0)).clamp(-50.0, 0.0);
        Ok(HeuristicOutput {
            policy: ActionDistribution { mean, std },
            value,
            heatmap,
        })
    }
}
