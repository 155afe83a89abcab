//! Camera visibility by an exact angular sweep around the camera origin.
//!
//! Every critical direction (occluder and workspace vertices, pairwise edge
//! crossings, edge/range-circle crossings and the two field-of-view limits)
//! splits the full turn into wedges. Inside a wedge the nearest occluder
//! edge, the workspace entry/exit edges and the range circle keep the same
//! order, so a single probe ray at the wedge bisector fixes which primitive
//! bounds the observable and occluded parts. Range arcs are approximated by
//! chords no wider than [`MAX_ARC_STEP`] when exporting polygons; point
//! classification uses the exact primitives.

use super::{normalize_angle, Polygon, Pose2, Rect, Vec2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const TWO_PI: f64 = 2.0 * PI;
const MIN_WEDGE: f64 = 1e-12;
const MAX_ARC_STEP: f64 = 0.25 * PI / 180.0;
const SEGMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Rigid offset of the camera from the gripper frame. The default sits
    /// behind the palm so that objects between the fingers stay in view.
    pub mount: Pose2,
    pub fov_half_angle: f64,
    pub max_range: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            mount: Pose2 {
                x: 0.0,
                y: -0.06,
                theta: 0.0,
            },
            fov_half_angle: 45f64.to_radians(),
            max_range: 1.0,
        }
    }
}

impl CameraModel {
    pub fn world_pose(&self, gripper: &Pose2) -> Pose2 {
        gripper.compose(&self.mount)
    }

    pub fn is_valid(&self) -> bool {
        self.fov_half_angle > 0.0 && self.fov_half_angle <= PI && self.max_range > 0.0 && self.mount.is_finite()
    }

    fn in_fov(&self, look: f64, angle: f64) -> bool {
        self.fov_half_angle >= PI || normalize_angle(angle - look).abs() <= self.fov_half_angle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Observable,
    Occluded,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Boundary {
    Origin,
    Line(Vec2, Vec2),
    Arc,
}

impl Boundary {
    /// Distance along the ray at `angle` to this boundary.
    fn distance(&self, origin: Vec2, angle: f64, range: f64, fallback: f64) -> f64 {
        match *self {
            Boundary::Origin => 0.0,
            Boundary::Arc => range,
            Boundary::Line(a, b) => {
                let d = Vec2::from_angle(angle);
                let e = b - a;
                let den = d.cross(e);
                let t = (a - origin).cross(e) / den;
                if t.is_finite() && t >= 0.0 {
                    t
                } else {
                    fallback
                }
            }
        }
    }

    fn point(&self, origin: Vec2, angle: f64, range: f64, fallback: f64) -> Vec2 {
        match self {
            Boundary::Origin => origin,
            _ => origin + Vec2::from_angle(angle) * self.distance(origin, angle, range, fallback),
        }
    }
}

#[derive(Debug, Clone)]
struct Wedge {
    start: f64,
    end: f64,
    /// `None` when the bisector misses the workspace.
    span: Option<WedgeSpan>,
}

#[derive(Debug, Clone)]
struct WedgeSpan {
    near: Boundary,
    far: Boundary,
    /// Far end of the observable part, if any.
    visible_until: Option<Boundary>,
    mid_near: f64,
    mid_far: f64,
    mid_visible: f64,
}

/// Partition of the workspace into observable and occluded polygons.
#[derive(Debug, Clone)]
pub struct VisibilityRegion {
    pub observable: Vec<Polygon>,
    pub occluded: Vec<Polygon>,
    origin: Vec2,
    range: f64,
    workspace: Rect,
    wedges: Vec<Wedge>,
}

impl VisibilityRegion {
    pub fn workspace(&self) -> Rect {
        self.workspace
    }

    pub fn camera_origin(&self) -> Vec2 {
        self.origin
    }

    pub fn observable_area(&self) -> f64 {
        self.observable.iter().map(Polygon::area).sum()
    }

    pub fn occluded_area(&self) -> f64 {
        self.occluded.iter().map(Polygon::area).sum()
    }

    pub fn classify(&self, p: Vec2) -> Region {
        if !self.workspace.contains(p) {
            return Region::Outside;
        }
        let v = p - self.origin;
        let r = v.norm();
        let angle = sweep_angle(v);
        let idx = self.wedges.partition_point(|w| w.end <= angle);
        let Some(wedge) = self.wedges.get(idx.min(self.wedges.len().saturating_sub(1))) else {
            return Region::Occluded;
        };
        let Some(span) = &wedge.span else {
            // numerically thin sliver next to a corner ray
            return Region::Occluded;
        };
        match &span.visible_until {
            Some(b) if r <= b.distance(self.origin, angle, self.range, span.mid_visible) => Region::Observable,
            _ => Region::Occluded,
        }
    }

    pub fn is_observable(&self, p: Vec2) -> bool {
        self.classify(p) == Region::Observable
    }
}

/// Angle in [−π, π).
fn sweep_angle(v: Vec2) -> f64 {
    let a = v.y.atan2(v.x);
    if a >= PI {
        a - TWO_PI
    } else {
        a
    }
}

pub fn visibility_region(
    camera: &CameraModel,
    gripper: &Pose2,
    occluders: &[Polygon],
    workspace: &Rect,
) -> VisibilityRegion {
    let cam = camera.world_pose(gripper);
    let origin = cam.position();
    let look = cam.forward().angle();
    let range = camera.max_range;

    let ws_poly = workspace.to_polygon();
    let mut segments: Vec<(Vec2, Vec2)> = ws_poly.edges().collect();
    for occ in occluders {
        segments.extend(occ.edges());
    }

    let mut angles: Vec<f64> = Vec::with_capacity(segments.len() * 4);
    let push_point = |q: Vec2, angles: &mut Vec<f64>| {
        let v = q - origin;
        if v.norm_sq() > 1e-24 {
            angles.push(sweep_angle(v));
        }
    };
    for &(a, _) in &segments {
        push_point(a, &mut angles);
    }
    for i in 0..segments.len() {
        let (a, b) = segments[i];
        for &(c, d) in &segments[i + 1..] {
            if let Some(q) = segment_intersection(a, b, c, d) {
                push_point(q, &mut angles);
            }
        }
        for q in segment_circle(a, b, origin, range) {
            push_point(q, &mut angles);
        }
    }
    if camera.fov_half_angle < PI {
        angles.push(sweep_angle(Vec2::from_angle(look - camera.fov_half_angle)));
        angles.push(sweep_angle(Vec2::from_angle(look + camera.fov_half_angle)));
    }
    angles.push(-PI);
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|b, a| (*b - *a).abs() < MIN_WEDGE);
    angles.push(-PI + TWO_PI);

    let mut wedges = Vec::with_capacity(angles.len());
    let mut observable = Vec::new();
    let mut occluded = Vec::new();

    for pair in angles.windows(2) {
        let (start, end) = (pair[0], pair[1]);
        if end - start < MIN_WEDGE {
            continue;
        }
        let mid = 0.5 * (start + end);
        let dir = Vec2::from_angle(mid);
        let span = probe(origin, dir, mid, look, camera, occluders, workspace);
        if let Some(span) = &span {
            emit_polygons(origin, range, start, end, span, &mut observable, &mut occluded);
        }
        wedges.push(Wedge { start, end, span });
    }
    debug_assert!(wedges.windows(2).all(|w| w[0].start < w[1].start));

    VisibilityRegion {
        observable,
        occluded,
        origin,
        range,
        workspace: *workspace,
        wedges,
    }
}

fn probe(
    origin: Vec2,
    dir: Vec2,
    angle: f64,
    look: f64,
    camera: &CameraModel,
    occluders: &[Polygon],
    workspace: &Rect,
) -> Option<WedgeSpan> {
    let (t_near, near, t_far, far) = ray_rect(origin, dir, workspace)?;

    let mut hit = (f64::INFINITY, Boundary::Arc);
    for occ in occluders {
        if let Some((t_in, _t_out, edge)) = occ.ray_interval(origin, dir) {
            if t_in < hit.0 {
                let b = match edge {
                    Some(i) => {
                        let n = occ.vertices.len();
                        Boundary::Line(occ.vertices[i], occ.vertices[(i + 1) % n])
                    }
                    None => Boundary::Origin,
                };
                hit = (t_in, b);
            }
        }
    }

    let mut visible = (camera.max_range, Boundary::Arc);
    if hit.0 < visible.0 {
        visible = hit;
    }
    if t_far < visible.0 {
        visible = (t_far, far);
    }

    let visible_until = (camera.in_fov(look, angle) && visible.0 > t_near + SEGMENT_EPS).then_some(visible.1);

    Some(WedgeSpan {
        near,
        far,
        visible_until,
        mid_near: t_near,
        mid_far: t_far,
        mid_visible: visible.0,
    })
}

fn emit_polygons(
    origin: Vec2,
    range: f64,
    start: f64,
    end: f64,
    span: &WedgeSpan,
    observable: &mut Vec<Polygon>,
    occluded: &mut Vec<Polygon>,
) {
    let mut pieces: Vec<(Boundary, f64, Boundary, f64, bool)> = Vec::with_capacity(2);
    match span.visible_until {
        Some(v) => {
            pieces.push((span.near, span.mid_near, v, span.mid_visible, true));
            if span.mid_far > span.mid_visible + SEGMENT_EPS {
                pieces.push((v, span.mid_visible, span.far, span.mid_far, false));
            }
        }
        None => pieces.push((span.near, span.mid_near, span.far, span.mid_far, false)),
    }
    let has_arc = pieces
        .iter()
        .any(|(a, _, b, _, _)| matches!(a, Boundary::Arc) || matches!(b, Boundary::Arc));
    let steps = if has_arc {
        ((end - start) / MAX_ARC_STEP).ceil().max(1.0) as usize
    } else {
        1
    };
    for k in 0..steps {
        let a0 = start + (end - start) * k as f64 / steps as f64;
        let a1 = if k + 1 == steps {
            end
        } else {
            start + (end - start) * (k + 1) as f64 / steps as f64
        };
        for &(inner, t_in, outer, t_out, is_visible) in &pieces {
            let mut verts = vec![
                inner.point(origin, a0, range, t_in),
                outer.point(origin, a0, range, t_out),
                outer.point(origin, a1, range, t_out),
                inner.point(origin, a1, range, t_in),
            ];
            verts.dedup_by(|b, a| (*b - *a).norm_sq() < 1e-30);
            if verts.len() > 1 && (verts[0] - verts[verts.len() - 1]).norm_sq() < 1e-30 {
                verts.pop();
            }
            if verts.len() < 3 {
                continue;
            }
            let poly = Polygon::new(verts);
            if poly.area() <= 0.0 {
                continue;
            }
            if is_visible {
                observable.push(poly);
            } else {
                occluded.push(poly);
            }
        }
    }
}

/// Ray/rectangle slab test. Returns entry distance and boundary, exit
/// distance and boundary.
fn ray_rect(origin: Vec2, dir: Vec2, rect: &Rect) -> Option<(f64, Boundary, f64, Boundary)> {
    let c = rect.corners();
    // edges: 0 bottom, 1 right, 2 top, 3 left
    let edge = |i: usize| Boundary::Line(c[i], c[(i + 1) % 4]);

    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    let mut in_edge = None;
    let mut out_edge = None;

    for (o, d, lo, hi, lo_edge, hi_edge) in [
        (origin.x, dir.x, rect.min.x, rect.max.x, 3, 1),
        (origin.y, dir.y, rect.min.y, rect.max.y, 0, 2),
    ] {
        if d.abs() < 1e-300 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (t_lo, t_hi) = ((lo - o) / d, (hi - o) / d);
        let (enter, enter_edge, exit, exit_edge) = if d > 0.0 {
            (t_lo, lo_edge, t_hi, hi_edge)
        } else {
            (t_hi, hi_edge, t_lo, lo_edge)
        };
        if enter > t_in {
            t_in = enter;
            in_edge = Some(enter_edge);
        }
        if exit < t_out {
            t_out = exit;
            out_edge = Some(exit_edge);
        }
    }
    let out_edge = out_edge?;
    if t_out <= t_in.max(0.0) + SEGMENT_EPS {
        return None;
    }
    if t_in <= 0.0 {
        Some((0.0, Boundary::Origin, t_out, edge(out_edge)))
    } else {
        Some((t_in, edge(in_edge?), t_out, edge(out_edge)))
    }
}

fn segment_intersection(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> Option<Vec2> {
    let r = b - a;
    let s = d - c;
    let den = r.cross(s);
    if den.abs() < 1e-300 {
        return None;
    }
    let t = (c - a).cross(s) / den;
    let u = (c - a).cross(r) / den;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then(|| a + r * t)
}

fn segment_circle(a: Vec2, b: Vec2, center: Vec2, radius: f64) -> impl Iterator<Item = Vec2> {
    let d = b - a;
    let f = a - center;
    let qa = d.dot(d);
    let qb = 2.0 * f.dot(d);
    let qc = f.dot(f) - radius * radius;
    let disc = qb * qb - 4.0 * qa * qc;
    let mut out = [None, None];
    if qa > 0.0 && disc >= 0.0 {
        let sq = disc.sqrt();
        for (k, t) in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)].into_iter().enumerate() {
            if (0.0..=1.0).contains(&t) {
                out[k] = Some(a + d * t);
            }
        }
    }
    out.into_iter().flatten()
}

/// Direct visibility test of a single point: inside the field of view,
/// within range, and the open camera-to-point segment avoids every occluder
/// interior.
pub fn point_visible(camera: &CameraModel, gripper: &Pose2, occluders: &[Polygon], p: Vec2) -> bool {
    let cam = camera.world_pose(gripper);
    let origin = cam.position();
    let v = p - origin;
    let r = v.norm();
    if r > camera.max_range {
        return false;
    }
    if r > 0.0 {
        let f = cam.forward();
        let off = f.cross(v).atan2(f.dot(v)).abs();
        if camera.fov_half_angle < PI && off > camera.fov_half_angle {
            return false;
        }
    }
    !occluders
        .iter()
        .any(|occ| occ.segment_crosses_interior(origin, p, SEGMENT_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_polygon, ConvexPolygon};
    use approx::assert_relative_eq;

    fn workspace() -> Rect {
        Rect::new(Vec2::new(-0.25, 0.0), Vec2::new(0.25, 0.35))
    }

    fn omni() -> CameraModel {
        CameraModel {
            mount: Pose2::IDENTITY,
            fov_half_angle: PI,
            ..CameraModel::default()
        }
    }

    #[test]
    fn unobstructed_centered_camera_sees_everything() {
        let ws = workspace();
        let region = visibility_region(&omni(), &Pose2::new(0.0, 0.175, 0.0), &[], &ws);
        assert_relative_eq!(region.observable_area(), ws.area(), max_relative = 1e-6);
        assert!(region.occluded_area() < 1e-12);
    }

    #[test]
    fn square_ahead_casts_shadow() {
        let ws = workspace();
        let occ = transform_polygon(&ConvexPolygon::rectangle(0.05, 0.05), &Pose2::new(0.0, 0.15, 0.0));
        let region = visibility_region(&CameraModel::default(), &Pose2::new(0.0, -0.05, 0.0), &[occ.clone()], &ws);
        assert_eq!(region.classify(Vec2::new(0.0, 0.3)), Region::Occluded);
        assert_eq!(region.classify(Vec2::new(0.0, 0.15)), Region::Occluded);
        assert_eq!(region.classify(Vec2::new(0.0, 0.05)), Region::Observable);
        assert_eq!(region.classify(Vec2::new(0.0, 0.5)), Region::Outside);
        let total = region.observable_area() + region.occluded_area();
        assert_relative_eq!(total, ws.area(), max_relative = 1e-9);
    }

    #[test]
    fn behind_camera_is_occluded() {
        let ws = workspace();
        let region = visibility_region(&CameraModel::default(), &Pose2::new(0.0, 0.2, 0.0), &[], &ws);
        assert_eq!(region.classify(Vec2::new(0.0, 0.1)), Region::Occluded);
        assert!(!point_visible(&CameraModel::default(), &Pose2::new(0.0, 0.2, 0.0), &[], Vec2::new(0.0, 0.1)));
    }

    #[test]
    fn point_visible_basics() {
        let cam = CameraModel::default();
        let g = Pose2::new(0.0, 0.0, 0.0);
        assert!(point_visible(&cam, &g, &[], Vec2::new(0.0, 1e-6)));
        assert!(!point_visible(&cam, &g, &[], Vec2::new(0.0, 1.01)));
        let occ = transform_polygon(&ConvexPolygon::rectangle(0.05, 0.05), &Pose2::new(0.0, 0.2, 0.0));
        assert!(!point_visible(&cam, &g, &[occ.clone()], Vec2::new(0.0, 0.4)));
        // a point on the near face is seen; one on the far face is not
        assert!(point_visible(&cam, &g, &[occ.clone()], Vec2::new(0.0, 0.175)));
        assert!(!point_visible(&cam, &g, &[occ], Vec2::new(0.0, 0.225)));
    }

    #[test]
    fn camera_inside_occluder_sees_nothing() {
        let ws = workspace();
        let occ = transform_polygon(&ConvexPolygon::rectangle(0.05, 0.05), &Pose2::new(0.0, 0.15, 0.0));
        let region = visibility_region(&omni(), &Pose2::new(0.0, 0.15, 0.0), &[occ], &ws);
        assert!(region.observable_area() < 1e-12);
        assert_relative_eq!(region.occluded_area(), ws.area(), max_relative = 1e-9);
    }
}
