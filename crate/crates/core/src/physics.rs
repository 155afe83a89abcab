//! Deterministic quasi-static pushing, grasping and drop detection.
//!
//! Objects only move when displaced by the gripper, by a grasp, or by another
//! displaced object. Each action is split into substeps; every substep moves
//! the gripper kinematically and then resolves overlaps by projection along
//! separating-axis MTVs. Walls never move: a substep that cannot be made
//! penetration-free is rolled back and the rest of the action is absorbed.

use crate::geometry::{clip_convex, heading_towards, normalize_angle, penetration, transform_polygon, ConvexPolygon, Polygon, Pose2, Rect, Vec2};
use std::f64::consts::{FRAC_PI_2, PI};
use serde::{Deserialize, Serialize};

pub type ObjectId = u32;

/// Overlaps shallower than this are treated as contact.
const CONTACT_SLOP: f64 = 1e-9;
/// Extra push applied with every MTV so that contacts end up strictly apart.
const SEPARATION_BIAS: f64 = 1e-7;
const MAX_SUBSTEP_ROTATION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectStatus {
    Free,
    Grasped,
    Dropped,
    Retrieved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: ObjectId,
    pub type_id: u32,
    /// Shape used by the physics (possibly perturbed by noise).
    pub shape: ConvexPolygon,
    /// Shape of the object type as known to the task priors.
    pub nominal_shape: ConvexPolygon,
    pub pose: Pose2,
    pub density: f64,
    pub friction: f64,
    pub status: ObjectStatus,
}

impl ObjectState {
    pub fn world_polygon(&self) -> Polygon {
        transform_polygon(&self.shape, &self.pose)
    }
}

/// Shelf interior spans `x ∈ [−width/2, width/2]`, `y ∈ [0, depth]`. The
/// front edge is the open side at `y = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shelf {
    pub width: f64,
    pub depth: f64,
    pub wall_thickness: f64,
}

impl Default for Shelf {
    fn default() -> Self {
        Self {
            width: 0.50,
            depth: 0.35,
            wall_thickness: 0.02,
        }
    }
}

impl Shelf {
    pub fn workspace(&self) -> Rect {
        Rect::new(Vec2::new(-self.width / 2.0, 0.0), Vec2::new(self.width / 2.0, self.depth))
    }

    /// Left, right and back walls.
    pub fn walls(&self) -> [Polygon; 3] {
        let hw = self.width / 2.0;
        let t = self.wall_thickness;
        let d = self.depth;
        let rect = |x0: f64, y0: f64, x1: f64, y1: f64| Rect::new(Vec2::new(x0, y0), Vec2::new(x1, y1)).to_polygon();
        [
            rect(-hw - t, 0.0, -hw, d + t),
            rect(hw, 0.0, hw + t, d + t),
            rect(-hw - t, d, hw + t, d + t),
        ]
    }

    /// True if `p` lies strictly past the front edge or outside the shelf
    /// rectangle.
    pub fn is_off_shelf(&self, p: Vec2) -> bool {
        p.y < 0.0 || !self.workspace().contains(p)
    }
}

/// Two-finger parallel gripper modeled after an 85 mm stroke.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperGeometry {
    pub max_opening: f64,
    pub finger_length: f64,
    pub finger_width: f64,
    pub palm_depth: f64,
}

impl Default for GripperGeometry {
    fn default() -> Self {
        Self {
            max_opening: 0.085,
            finger_length: 0.05,
            finger_width: 0.01,
            palm_depth: 0.02,
        }
    }
}

impl GripperGeometry {
    pub fn palm_width(&self) -> f64 {
        self.max_opening + 2.0 * self.finger_width
    }

    pub fn gap(&self, aperture: f64) -> f64 {
        aperture.clamp(0.0, 1.0) * self.max_opening
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub id: ObjectId,
    /// Object pose in the gripper frame.
    pub offset: Pose2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub pose: Pose2,
    /// 1 = fully open.
    pub aperture: f64,
    pub grasp: Option<Grasp>,
}

impl GripperState {
    pub fn grasped_id(&self) -> Option<ObjectId> {
        self.grasp.map(|g| g.id)
    }

    /// Palm, left finger, right finger in the world frame.
    pub fn parts(&self, geom: &GripperGeometry) -> [Polygon; 3] {
        let gap = geom.gap(self.aperture);
        let hw = geom.palm_width() / 2.0;
        let l = geom.finger_length;
        let fw = geom.finger_width;
        let body = |x0: f64, y0: f64, x1: f64, y1: f64| {
            Polygon::new(
                [
                    Vec2::new(x0, y0),
                    Vec2::new(x1, y0),
                    Vec2::new(x1, y1),
                    Vec2::new(x0, y1),
                ]
                .iter()
                .map(|&p| self.pose.transform_point(p))
                .collect(),
            )
        };
        [
            body(-hw, -geom.palm_depth, hw, 0.0),
            body(-gap / 2.0 - fw, 0.0, -gap / 2.0, l),
            body(gap / 2.0, 0.0, gap / 2.0 + fw, l),
        ]
    }

    /// Rectangle between the fingers, regardless of aperture.
    pub fn between_fingers(&self, geom: &GripperGeometry) -> Polygon {
        let gap = geom.gap(self.aperture);
        let l = geom.finger_length;
        Polygon::new(
            [
                Vec2::new(-gap / 2.0, 0.0),
                Vec2::new(gap / 2.0, 0.0),
                Vec2::new(gap / 2.0, l),
                Vec2::new(-gap / 2.0, l),
            ]
            .iter()
            .map(|&p| self.pose.transform_point(p))
            .collect(),
        )
    }

    /// Capture region used for grasping; present only for apertures in
    /// [0.2, 0.8].
    pub fn capture_region(&self, geom: &GripperGeometry) -> Option<Polygon> {
        (0.2..=0.8)
            .contains(&self.aperture)
            .then(|| self.between_fingers(geom))
    }

    /// World position of the palm's front face center.
    pub fn palm_point(&self) -> Vec2 {
        self.pose.position()
    }
}

/// Per-action increments in the gripper frame: `dx` lateral, `dy` forward,
/// `dtheta` rotation, `dgrip` aperture change.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub dgrip: f64,
}

impl Action {
    pub const NONE: Action = Action {
        dx: 0.0,
        dy: 0.0,
        dtheta: 0.0,
        dgrip: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dtheta: f64, dgrip: f64) -> Self {
        Self { dx, dy, dtheta, dgrip }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dtheta, self.dgrip]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Clamps every channel to its cap; non-finite channels become zero.
    pub fn clamped(self, limits: &ActionLimits) -> Action {
        let c = |v: f64, cap: f64| if v.is_finite() { v.clamp(-cap, cap) } else { 0.0 };
        Action {
            dx: c(self.dx, limits.step_cap),
            dy: c(self.dy, limits.step_cap),
            dtheta: c(self.dtheta, limits.rotation_cap),
            dgrip: c(self.dgrip, 1.0),
        }
    }

    pub fn is_null(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.dtheta == 0.0 && self.dgrip == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub step_cap: f64,
    pub rotation_cap: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            step_cap: 0.03,
            rotation_cap: 0.2,
        }
    }
}

impl ActionLimits {
    pub fn caps(&self) -> [f64; 4] {
        [self.step_cap, self.step_cap, self.rotation_cap, 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    pub substeps: usize,
    /// Rotation gain for off-center pushes.
    pub kappa: f64,
    pub max_iterations: usize,
    /// Maximum residual penetration accepted after a substep.
    pub tolerance: f64,
    pub limits: ActionLimits,
    pub gripper: GripperGeometry,
    /// Region the gripper origin is confined to.
    pub gripper_bounds: Rect,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            substeps: 8,
            kappa: 0.5,
            max_iterations: 16,
            tolerance: 1e-4,
            limits: ActionLimits::default(),
            gripper: GripperGeometry::default(),
            gripper_bounds: Rect::new(Vec2::new(-0.40, -0.25), Vec2::new(0.40, 0.35)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShelfState {
    pub shelf: Shelf,
    pub gripper: GripperState,
    pub objects: Vec<ObjectState>,
    pub target_id: ObjectId,
}

impl ShelfState {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn target(&self) -> Option<&ObjectState> {
        self.object(self.target_id)
    }

    /// Largest penetration depth over object pairs, gripper/object pairs and
    /// object/wall pairs.
    pub fn max_penetration(&self, geom: &GripperGeometry) -> f64 {
        let polys: Vec<(ObjectId, Polygon)> = self
            .objects
            .iter()
            .filter(|o| o.status != ObjectStatus::Dropped)
            .map(|o| (o.id, o.world_polygon()))
            .collect();
        let grasped = self.gripper.grasped_id();
        let mut worst: f64 = 0.0;
        let mut depth = |a: &Polygon, b: &Polygon| {
            if let Some(m) = penetration(a, b) {
                worst = worst.max(m.depth);
            }
        };
        for i in 0..polys.len() {
            for j in i + 1..polys.len() {
                depth(&polys[i].1, &polys[j].1);
            }
            for w in self.shelf.walls() {
                depth(&w, &polys[i].1);
            }
        }
        for part in &self.gripper.parts(geom)[..1] {
            for (id, p) in &polys {
                if Some(*id) != grasped {
                    depth(part, p);
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    pub dropped_ids: Vec<ObjectId>,
    pub grasp_acquired: Option<ObjectId>,
    pub grasp_lost: Option<ObjectId>,
    pub retrieved: bool,
    /// True if part of the commanded motion was blocked.
    pub blocked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicalTerminal {
    None,
    Dropped,
    Retrieved,
}

/// Advances the world by one action.
pub fn physics_step(state: &ShelfState, action: &Action, cfg: &PhysicsConfig) -> (ShelfState, StepEvents) {
    let action = action.clamped(&cfg.limits);
    let mut events = StepEvents::default();
    if action.is_null() {
        return (state.clone(), events);
    }
    let mut s = state.clone();
    let start = s.gripper.pose;
    let start_aperture = s.gripper.aperture;
    let target_aperture = (start_aperture + action.dgrip).clamp(0.0, 1.0);
    let translation = start.transform_vector(Vec2::new(action.dx, action.dy));
    let n = cfg.substeps.max(1);
    let closing = target_aperture < start_aperture;

    for k in 1..=n {
        let f = k as f64 / n as f64;
        let p = cfg.gripper_bounds.clamp(start.position() + translation * f);
        let pose = Pose2::from_position(p, start.theta + action.dtheta * f);
        let aperture = start_aperture + (target_aperture - start_aperture) * f;
        let previous_aperture = s.gripper.aperture;

        let saved_gripper = s.gripper;
        let saved_objects: Vec<(Pose2, ObjectStatus)> = s.objects.iter().map(|o| (o.pose, o.status)).collect();

        s.gripper.pose = pose;
        s.gripper.aperture = aperture;

        if s.gripper.grasp.is_none() && previous_aperture >= 0.5 && aperture < 0.5 {
            if let Some(id) = try_grasp(&s, &cfg.gripper) {
                attach(&mut s, id);
                events.grasp_acquired = Some(id);
            }
        } else if let Some(g) = s.gripper.grasp {
            if previous_aperture <= 0.5 && aperture > 0.5 {
                release(&mut s);
                events.grasp_lost = Some(g.id);
            }
        }
        // fingers only close through an object on a step that reaches the grasp threshold
        let jammed = closing
            && target_aperture >= 0.5
            && s.gripper.grasp.is_none()
            && fingers_touch_squeezed(&s, cfg);
        follow_grasp(&mut s);

        if jammed || !resolve_substep(&mut s, cfg, closing) {
            s.gripper = saved_gripper;
            for (o, (pose, status)) in s.objects.iter_mut().zip(saved_objects) {
                o.pose = pose;
                o.status = status;
            }
            if events.grasp_acquired.is_some() && s.gripper.grasp.is_none() {
                events.grasp_acquired = None;
            }
            if events.grasp_lost.is_some() && s.gripper.grasp.is_some() {
                events.grasp_lost = None;
            }
            events.blocked = true;
            break;
        }
    }

    // drop and retrieval bookkeeping
    let grasped = s.gripper.grasped_id();
    let shelf = s.shelf;
    for o in s.objects.iter_mut() {
        if o.status == ObjectStatus::Free && shelf.is_off_shelf(o.pose.position()) {
            o.status = ObjectStatus::Dropped;
            events.dropped_ids.push(o.id);
        }
    }
    if grasped == Some(s.target_id) {
        let target = s.target().expect("target exists");
        if target.pose.y < 0.0 {
            events.retrieved = true;
        }
    }
    if events.retrieved {
        let tid = s.target_id;
        if let Some(o) = s.objects.iter_mut().find(|o| o.id == tid) {
            o.status = ObjectStatus::Retrieved;
        }
    }
    (s, events)
}

/// Gripper heading in [−π/2, π/2] (5° grid) at which the object fits
/// between the open fingers with `margin` to spare, preferring headings
/// that point from `approach_from` at the object.
pub fn grasp_heading(shape: &ConvexPolygon, pose: &Pose2, approach_from: Vec2, geom: &GripperGeometry, margin: f64) -> Option<f64> {
    grasp_headings(shape, pose, approach_from, geom, margin).first().copied()
}

/// All feasible grasp headings, most preferred first.
pub fn grasp_headings(shape: &ConvexPolygon, pose: &Pose2, approach_from: Vec2, geom: &GripperGeometry, margin: f64) -> Vec<f64> {
    let bearing = heading_towards(pose.position() - approach_from).clamp(-FRAC_PI_2, FRAC_PI_2);
    let max_width = geom.max_opening - margin;
    let mut out: Vec<f64> = (0..=36)
        .map(|j| -FRAC_PI_2 + j as f64 * PI / 36.0)
        .filter(|phi| shape.width_along(Vec2::new(1.0, 0.0).rotate(phi - pose.theta)) <= max_width)
        .collect();
    out.sort_by(|a, b| {
        let ka = (normalize_angle(a - bearing).abs(), a.abs());
        let kb = (normalize_angle(b - bearing).abs(), b.abs());
        ka.partial_cmp(&kb).expect("finite")
    });
    out
}

/// Clearance kept on each side of an object when pre-shaping for a grasp.
pub const GRASP_MARGIN: f64 = 0.012;

/// Smallest aperture above the grasp threshold that clears an object of the
/// given width with `margin` on both sides.
pub fn preshape_aperture(width: f64, geom: &GripperGeometry, margin: f64) -> f64 {
    ((width + 2.0 * margin) / geom.max_opening).clamp(0.6, 1.0)
}

/// Pre-shape aperture for grasping `shape` at `pose` with gripper heading `phi`.
pub fn grasp_preshape(shape: &ConvexPolygon, pose: &Pose2, phi: f64, geom: &GripperGeometry, margin: f64) -> f64 {
    let lateral = Vec2::new(1.0, 0.0).rotate(phi - pose.theta);
    preshape_aperture(shape.width_along(lateral), geom, margin)
}

/// Whether some grasp of the object keeps the pre-shaped gripper clear of
/// the shelf walls.
pub fn graspable_near_walls(shelf: &Shelf, shape: &ConvexPolygon, pose: &Pose2, geom: &GripperGeometry, margin: f64) -> bool {
    let c = pose.position();
    grasp_headings(shape, pose, c - Vec2::new(0.0, 1.0), geom, margin)
        .into_iter()
        .any(|phi| gripper_clear(shelf, &grasp_pose(c, phi, geom), grasp_preshape(shape, pose, phi, geom, margin), geom, &[]))
}

/// Whether a gripper at `pose` with the given aperture stays clear of the
/// walls and the given obstacles.
pub fn gripper_clear(shelf: &Shelf, pose: &Pose2, aperture: f64, geom: &GripperGeometry, obstacles: &[Polygon]) -> bool {
    let gripper = GripperState {
        pose: *pose,
        aperture,
        grasp: None,
    };
    let parts = gripper.parts(geom);
    parts.iter().all(|part| {
        shelf
            .walls()
            .iter()
            .chain(obstacles)
            .all(|o| penetration(part, o).is_none_or(|m| m.depth < 1e-4))
    })
}

/// Gripper pose that centers the object between the fingertips and palm.
pub fn grasp_pose(object: Vec2, heading: f64, geom: &GripperGeometry) -> Pose2 {
    let fwd = Pose2::new(0.0, 0.0, heading).forward();
    Pose2::from_position(object - fwd * (geom.finger_length * 0.5), heading)
}

/// Object whose centroid lies between the fingers; the one nearest the palm
/// wins if several qualify.
pub fn try_grasp(state: &ShelfState, geom: &GripperGeometry) -> Option<ObjectId> {
    let region = state.gripper.capture_region(geom)?;
    let palm = state.gripper.palm_point();
    state
        .objects
        .iter()
        .filter(|o| o.status == ObjectStatus::Free && region.contains(o.pose.position()))
        .map(|o| ((o.pose.position() - palm).norm(), o.id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

pub fn detect_terminal(state: &ShelfState) -> PhysicalTerminal {
    let grasped = state.gripper.grasped_id();
    let dropped = state.objects.iter().any(|o| {
        o.status == ObjectStatus::Dropped
            || (Some(o.id) != grasped && o.status == ObjectStatus::Free && state.shelf.is_off_shelf(o.pose.position()))
    });
    if dropped {
        return PhysicalTerminal::Dropped;
    }
    match state.target() {
        Some(t) if grasped == Some(t.id) && t.pose.y < 0.0 => PhysicalTerminal::Retrieved,
        _ => PhysicalTerminal::None,
    }
}

fn attach(s: &mut ShelfState, id: ObjectId) {
    let pose = s.gripper.pose;
    if let Some(o) = s.objects.iter_mut().find(|o| o.id == id) {
        o.status = ObjectStatus::Grasped;
        s.gripper.grasp = Some(Grasp {
            id,
            offset: pose.inverse().compose(&o.pose),
        });
    }
}

fn release(s: &mut ShelfState) {
    if let Some(g) = s.gripper.grasp.take() {
        if let Some(o) = s.objects.iter_mut().find(|o| o.id == g.id) {
            o.status = ObjectStatus::Free;
        }
    }
}

fn follow_grasp(s: &mut ShelfState) {
    if let Some(g) = s.gripper.grasp {
        let pose = s.gripper.pose.compose(&g.offset);
        if let Some(o) = s.objects.iter_mut().find(|o| o.id == g.id) {
            o.pose = pose;
        }
    }
}

/// Resolves overlaps after the gripper moved. Returns false if the
/// configuration cannot be made penetration-free.
fn resolve_substep(s: &mut ShelfState, cfg: &PhysicsConfig, closing: bool) -> bool {
    let geom = &cfg.gripper;
    let walls = s.shelf.walls();
    let parts = s.gripper.parts(geom);
    let squeeze_zone = closing.then(|| s.gripper.between_fingers(geom));
    let grasped = s.gripper.grasped_id();

    // the gripper and anything it holds are kinematic; they must clear the walls
    for part in &parts {
        if walls.iter().any(|w| overlap(w, part) > cfg.tolerance) {
            return false;
        }
    }
    let grasped_poly = grasped.and_then(|id| s.object(id)).map(ObjectState::world_polygon);
    if let Some(gp) = &grasped_poly {
        if walls.iter().any(|w| overlap(w, gp) > cfg.tolerance) {
            return false;
        }
    }

    let movable: Vec<usize> = (0..s.objects.len())
        .filter(|&i| s.objects[i].status == ObjectStatus::Free)
        .collect();
    let mut polys: Vec<Polygon> = s.objects.iter().map(ObjectState::world_polygon).collect();
    // push-chain depth: 1 = touched by the gripper, larger = further down the chain
    let mut level: Vec<u32> = vec![u32::MAX; s.objects.len()];

    let squeezed = |i: usize, polys: &[Polygon]| -> bool {
        let _ = polys;
        squeeze_zone
            .as_ref()
            .is_some_and(|z| z.contains(s.objects[i].pose.position()))
    };
    let squeezed_flags: Vec<bool> = (0..s.objects.len()).map(|i| squeezed(i, &polys)).collect();

    for _ in 0..cfg.max_iterations {
        let mut moved = false;

        // gripper (and grasped object) push free objects
        for &i in &movable {
            let mut pushers: Vec<&Polygon> = Vec::with_capacity(4);
            pushers.push(&parts[0]);
            if !squeezed_flags[i] {
                pushers.push(&parts[1]);
                pushers.push(&parts[2]);
            }
            if let Some(gp) = &grasped_poly {
                pushers.push(gp);
            }
            for pusher in pushers {
                if let Some(m) = penetration(pusher, &polys[i]) {
                    if m.depth > CONTACT_SLOP {
                        let contact = contact_point(pusher, &polys[i]);
                        push_object(&mut s.objects[i], &mut polys[i], m.vector(), contact, cfg.kappa);
                        level[i] = 1;
                        moved = true;
                    }
                }
            }
        }

        // object–object propagation
        for (a_idx, &i) in movable.iter().enumerate() {
            for &j in &movable[a_idx + 1..] {
                let Some(m) = penetration(&polys[i], &polys[j]) else {
                    continue;
                };
                if m.depth <= CONTACT_SLOP {
                    continue;
                }
                let contact = contact_point(&polys[i], &polys[j]);
                let v = m.vector();
                if level[i] < level[j] {
                    push_object(&mut s.objects[j], &mut polys[j], v, contact, cfg.kappa);
                    level[j] = level[i].saturating_add(1);
                } else if level[j] < level[i] {
                    push_object(&mut s.objects[i], &mut polys[i], -v, contact, cfg.kappa);
                    level[i] = level[j].saturating_add(1);
                } else {
                    push_object(&mut s.objects[j], &mut polys[j], v * 0.5, contact, cfg.kappa);
                    push_object(&mut s.objects[i], &mut polys[i], v * -0.5, contact, cfg.kappa);
                }
                moved = true;
            }
        }

        // walls are immovable
        for &i in &movable {
            for w in &walls {
                if let Some(m) = penetration(w, &polys[i]) {
                    if m.depth > CONTACT_SLOP {
                        translate_object(&mut s.objects[i], &mut polys[i], m.vector());
                        moved = true;
                    }
                }
            }
        }

        if !moved {
            break;
        }
    }

    // final validation
    for (a_idx, &i) in movable.iter().enumerate() {
        for w in &walls {
            if overlap(w, &polys[i]) > cfg.tolerance {
                return false;
            }
        }
        for &j in &movable[a_idx + 1..] {
            if overlap(&polys[i], &polys[j]) > cfg.tolerance {
                return false;
            }
        }
        let checked_parts: &[Polygon] = if squeezed_flags[i] { &parts[..1] } else { &parts };
        for part in checked_parts {
            if overlap(part, &polys[i]) > cfg.tolerance {
                return false;
            }
        }
        if let Some(gp) = &grasped_poly {
            if overlap(gp, &polys[i]) > cfg.tolerance {
                return false;
            }
        }
    }
    true
}

/// Whether a finger penetrates a free object whose center lies between the fingers.
fn fingers_touch_squeezed(s: &ShelfState, cfg: &PhysicsConfig) -> bool {
    let parts = s.gripper.parts(&cfg.gripper);
    let zone = s.gripper.between_fingers(&cfg.gripper);
    s.objects
        .iter()
        .filter(|o| o.status == ObjectStatus::Free && zone.contains(o.pose.position()))
        .any(|o| {
            let poly = o.world_polygon();
            parts[1..].iter().any(|f| overlap(f, &poly) > cfg.tolerance)
        })
}

fn overlap(a: &Polygon, b: &Polygon) -> f64 {
    penetration(a, b).map_or(0.0, |m| m.depth)
}

fn contact_point(a: &Polygon, b: &Polygon) -> Vec2 {
    let inter = clip_convex(&b.vertices, &a.vertices);
    match inter.len() {
        0 => b.centroid(),
        1 | 2 => inter.iter().fold(Vec2::ZERO, |acc, &p| acc + p) * (1.0 / inter.len() as f64),
        _ => Polygon::new(inter).centroid(),
    }
}

fn translate_object(o: &mut ObjectState, poly: &mut Polygon, v: Vec2) {
    let v = v + v.normalized() * SEPARATION_BIAS;
    o.pose.x += v.x;
    o.pose.y += v.y;
    for p in poly.vertices.iter_mut() {
        *p += v;
    }
}

/// Translates along the push and adds the off-center rotation
/// `kappa · (r × push) / (density · area)`.
fn push_object(o: &mut ObjectState, poly: &mut Polygon, push: Vec2, contact: Vec2, kappa: f64) {
    let lever = contact - o.pose.position();
    let area = o.shape.area().max(1e-9);
    let dtheta = (kappa * lever.cross(push) / (o.density * area)).clamp(-MAX_SUBSTEP_ROTATION, MAX_SUBSTEP_ROTATION);
    let v = push + push.normalized() * SEPARATION_BIAS;
    o.pose = Pose2::new(o.pose.x + v.x, o.pose.y + v.y, o.pose.theta + dtheta);
    *poly = o.world_polygon();
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn square(id: ObjectId, side: f64, pose: Pose2) -> ObjectState {
        let shape = ConvexPolygon::rectangle(side, side);
        ObjectState {
            id,
            type_id: id,
            nominal_shape: shape.clone(),
            shape,
            pose,
            density: 1.0,
            friction: 0.3,
            status: ObjectStatus::Free,
        }
    }

    fn state(gripper: Pose2, objects: Vec<ObjectState>) -> ShelfState {
        ShelfState {
            shelf: Shelf::default(),
            gripper: GripperState {
                pose: gripper,
                aperture: 1.0,
                grasp: None,
            },
            target_id: objects.first().map_or(0, |o| o.id),
            objects,
        }
    }

    #[test]
    fn null_action_is_identity() {
        let s = state(Pose2::new(0.0, -0.05, 0.0), vec![square(0, 0.04, Pose2::new(0.1, 0.2, 0.3))]);
        let (next, ev) = physics_step(&s, &Action::NONE, &PhysicsConfig::default());
        assert_eq!(next, s);
        assert_eq!(ev, StepEvents::default());
    }

    #[test]
    fn action_channels_are_clamped() {
        let a = Action::new(1.0, -1.0, 5.0, -3.0).clamped(&ActionLimits::default());
        assert_eq!(a, Action::new(0.03, -0.03, 0.2, -1.0));
        let a = Action::new(f64::NAN, 0.0, 0.0, 0.0).clamped(&ActionLimits::default());
        assert_eq!(a.dx, 0.0);
    }

    /// Palm face 0.01 m behind a square, pushed 0.03 m: the square moves by
    /// the 0.02 m overlap. Compared against a 256-substep run.
    #[test]
    fn head_on_push_matches_fine_substep_oracle() {
        let cfg = PhysicsConfig::default();
        let side = 0.04;
        let s = state(Pose2::new(0.0, 0.05, 0.0), vec![square(0, side, Pose2::new(0.0, 0.05 + 0.01 + side / 2.0, 0.0))]);
        let action = Action::new(0.0, 0.03, 0.0, 0.0);
        let (coarse, _) = physics_step(&s, &action, &cfg);
        let fine_cfg = PhysicsConfig { substeps: 256, ..cfg };
        let (fine, _) = physics_step(&s, &action, &fine_cfg);
        let moved = coarse.objects[0].pose.y - s.objects[0].pose.y;
        let moved_fine = fine.objects[0].pose.y - s.objects[0].pose.y;
        assert_abs_diff_eq!(moved_fine, 0.02, epsilon = 1e-3);
        assert_abs_diff_eq!(moved, moved_fine, epsilon = 1e-3);
        assert_abs_diff_eq!(coarse.objects[0].pose.x, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn wall_absorbs_push() {
        let cfg = PhysicsConfig::default();
        let side = 0.07;
        let depth = Shelf::default().depth;
        let obj_y = depth - side / 2.0 - 1e-6;
        let s = state(
            Pose2::new(0.0, obj_y - side / 2.0 - 0.005, 0.0),
            vec![square(0, side, Pose2::new(0.0, obj_y, 0.0))],
        );
        let (next, ev) = physics_step(&s, &Action::new(0.0, 0.03, 0.0, 0.0), &cfg);
        assert!(ev.blocked);
        let poly = next.objects[0].world_polygon();
        for w in next.shelf.walls() {
            assert!(overlap(&w, &poly) < cfg.tolerance);
        }
        assert!(next.max_penetration(&cfg.gripper) < cfg.tolerance);
        assert!(next.gripper.pose.y > s.gripper.pose.y);
    }

    #[test]
    fn capture_region_grasp_rules() {
        let geom = GripperGeometry::default();
        let mut s = state(Pose2::new(0.0, 0.0, 0.0), vec![square(0, 0.02, Pose2::new(0.2, 0.2, 0.0))]);
        s.gripper.aperture = 0.5;
        assert_eq!(try_grasp(&s, &geom), None);

        s.objects[0].pose = Pose2::new(0.0, 0.025, 0.0);
        assert_eq!(try_grasp(&s, &geom), Some(0));

        s.objects = vec![
            square(3, 0.01, Pose2::new(0.0, 0.02, 0.0)),
            square(7, 0.01, Pose2::new(0.0, 0.01, 0.0)),
        ];
        assert_eq!(try_grasp(&s, &geom), Some(7));

        s.gripper.aperture = 0.95;
        assert_eq!(try_grasp(&s, &geom), None);
    }

    #[test]
    fn closing_on_object_grasps_it() {
        let cfg = PhysicsConfig::default();
        let s = state(Pose2::new(0.0, 0.05, 0.0), vec![square(0, 0.03, Pose2::new(0.0, 0.05 + 0.025, 0.0))]);
        let (next, ev) = physics_step(&s, &Action::new(0.0, 0.0, 0.0, -1.0), &cfg);
        assert_eq!(ev.grasp_acquired, Some(0));
        assert_eq!(next.gripper.grasped_id(), Some(0));
        assert_eq!(next.objects[0].status, ObjectStatus::Grasped);
        // grasped object follows the gripper
        let (moved, _) = physics_step(&next, &Action::new(0.0, -0.03, 0.0, 0.0), &cfg);
        assert_abs_diff_eq!(moved.objects[0].pose.y - next.objects[0].pose.y, -0.03, epsilon = 1e-9);
        // re-opening loses the grasp
        let (open, ev) = physics_step(&moved, &Action::new(0.0, 0.0, 0.0, 1.0), &cfg);
        assert_eq!(ev.grasp_lost, Some(0));
        assert_eq!(open.gripper.grasp, None);
    }

    #[test]
    fn terminal_detection() {
        let mut s = state(Pose2::new(0.0, -0.1, 0.0), vec![square(0, 0.02, Pose2::new(0.0, 0.2, 0.0)), square(1, 0.02, Pose2::new(0.1, 0.1, 0.0))]);
        assert_eq!(detect_terminal(&s), PhysicalTerminal::None);
        s.objects[1].pose.y = -0.001;
        assert_eq!(detect_terminal(&s), PhysicalTerminal::Dropped);
        s.objects[1].pose.y = 0.1;
        s.objects[0].pose.y = -0.001;
        s.objects[0].status = ObjectStatus::Grasped;
        s.gripper.grasp = Some(Grasp { id: 0, offset: Pose2::IDENTITY });
        assert_eq!(detect_terminal(&s), PhysicalTerminal::Retrieved);
    }

    #[test]
    fn pulling_a_grasped_target_out_retrieves_it() {
        let cfg = PhysicsConfig::default();
        let s = state(Pose2::new(0.0, -0.02, 0.0), vec![square(0, 0.03, Pose2::new(0.0, 0.005, 0.0))]);
        let (g, ev) = physics_step(&s, &Action::new(0.0, 0.0, 0.0, -1.0), &cfg);
        assert_eq!(ev.grasp_acquired, Some(0));
        let (out, ev) = physics_step(&g, &Action::new(0.0, -0.03, 0.0, 0.0), &cfg);
        assert!(ev.retrieved);
        assert!(ev.dropped_ids.is_empty());
        assert_eq!(detect_terminal(&out), PhysicalTerminal::Retrieved);
    }

    #[test]
    fn pushing_chain_moves_second_object() {
        let cfg = PhysicsConfig::default();
        let side = 0.04;
        let y0 = 0.02 + side / 2.0 + 0.001;
        let s = state(
            Pose2::new(0.0, 0.02, 0.0),
            vec![square(0, side, Pose2::new(0.0, y0, 0.0)), square(1, side, Pose2::new(0.0, y0 + side + 0.002, 0.0))],
        );
        let (next, _) = physics_step(&s, &Action::new(0.0, 0.03, 0.0, 0.0), &cfg);
        assert!(next.objects[1].pose.y > s.objects[1].pose.y + 0.02);
        assert!(next.max_penetration(&cfg.gripper) < cfg.tolerance);
    }
}
